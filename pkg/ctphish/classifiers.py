"""
Certificate classifiers: the random-forest model with its meta-classifiers,
the rule-based heuristic scorer and a registry for external scorers.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import yaml

from .certs import CertificateRecord
from .config import PACKAGE_DATA_DIR
from .errors import DimensionMismatch, EmptyClass, EmptyInput, UntrainedModel
from .features import (
    CategoricalCodec,
    FeatureExtractor,
    FeatureVector,
    feature_names,
)
from .forest import RandomForest

logger = logging.getLogger(__name__)

MODEL_FORMAT = "ctphish-model"
MODEL_VERSION = 1
METAS = ("min", "max", "avg", "med")
MODES = ("per_domain", "cert")
FAKE_TLDS = frozenset({"com", "net", "org", "edu", "mil", "gov"})
DEFAULT_RULES_PATH = PACKAGE_DATA_DIR / "default_rules.yaml"


# --- meta classifiers -------------------------------------------------------

def combine_meta(scores: Sequence[float], meta: str) -> float:
    """Aggregate per-domain scores into one certificate score."""
    if not scores:
        raise EmptyInput("no per-domain scores")
    ordered = sorted(float(s) for s in scores)
    lo, hi = ordered[0], ordered[-1]
    if meta == "min":
        return lo
    if meta == "max":
        return hi
    if meta == "avg":
        value = math.fsum(ordered) / len(ordered)
    elif meta == "med":
        mid = len(ordered) // 2
        value = ordered[mid] if len(ordered) % 2 else (ordered[mid - 1] + ordered[mid]) / 2.0
    else:
        raise ValueError(f"unknown meta classifier {meta!r}")
    return min(hi, max(lo, value))


# --- rule scorer ------------------------------------------------------------

@dataclass
class RuleSet:
    keyword_weights: Dict[str, float] = field(default_factory=dict)
    suspicious_tlds: Dict[str, float] = field(default_factory=dict)
    nesting_labels: int = 4
    nesting_points: float = 0.0
    issuer_match: str = "Let's Encrypt"
    issuer_points: float = 0.0
    cap: float = 140.0
    dash_min_count: int = 4
    dash_points: float = 0.0
    fake_tld_points: float = 0.0

    def __post_init__(self):
        self.keyword_weights = {k.lower(): float(v) for k, v in self.keyword_weights.items()}
        self.suspicious_tlds = {k.lower().lstrip("."): float(v) for k, v in self.suspicious_tlds.items()}
        weights = (list(self.keyword_weights.values()) + list(self.suspicious_tlds.values())
                   + [self.nesting_points, self.issuer_points, self.dash_points, self.fake_tld_points])
        if any(w < 0 for w in weights):
            raise ValueError("rule points must be >= 0")
        if self.cap <= 0:
            raise ValueError("cap must be > 0")

    @classmethod
    def from_dict(cls, data: Mapping) -> "RuleSet":
        nesting = data.get("nesting") or {}
        issuer = data.get("issuer") or {}
        dashes = data.get("dashes") or {}
        return cls(
            keyword_weights=dict(data.get("keywords") or {}),
            suspicious_tlds=dict(data.get("suspicious_tlds") or {}),
            nesting_labels=int(nesting.get("labels", 4)),
            nesting_points=float(nesting.get("points", 0)),
            issuer_match=str(issuer.get("match", "Let's Encrypt")),
            issuer_points=float(issuer.get("points", 0)),
            cap=float(data.get("cap", 140)),
            dash_min_count=int(dashes.get("min_count", 4)),
            dash_points=float(dashes.get("points", 0)),
            fake_tld_points=float((data.get("fake_tld") or {}).get("points", 0)),
        )

    def to_dict(self) -> Dict:
        return {
            "version": 1,
            "cap": self.cap,
            "keywords": dict(self.keyword_weights),
            "suspicious_tlds": dict(self.suspicious_tlds),
            "nesting": {"labels": self.nesting_labels, "points": self.nesting_points},
            "issuer": {"match": self.issuer_match, "points": self.issuer_points},
            "dashes": {"min_count": self.dash_min_count, "points": self.dash_points},
            "fake_tld": {"points": self.fake_tld_points},
        }

    @classmethod
    def load(cls, path=None) -> "RuleSet":
        path = Path(path or DEFAULT_RULES_PATH)
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(yaml.safe_load(f) or {})


def rule_points(record: CertificateRecord, rules: RuleSet) -> float:
    points = 0.0
    for d in record.domains:
        name = d.stripped
        points += sum(w for word, w in rules.keyword_weights.items() if word in name)
        tld = rules.suspicious_tlds.get(d.public_suffix)
        if tld is None:
            tld = rules.suspicious_tlds.get(d.public_suffix.rsplit(".", 1)[-1], 0.0)
        points += tld
        host_labels = len(d.labels) - int(d.is_wildcard)
        points += rules.nesting_points * max(0, host_labels - rules.nesting_labels)
        dashes = d.full.count("-")
        if rules.dash_points and not d.is_idn and dashes >= rules.dash_min_count:
            points += rules.dash_points * dashes
        if rules.fake_tld_points and any(label in FAKE_TLDS for label in d.subdomain_labels):
            points += rules.fake_tld_points
    if rules.issuer_match and rules.issuer_match.lower() in record.issuer_dn.lower():
        points += rules.issuer_points
    return points


def score_rules(record: CertificateRecord, rules: RuleSet) -> float:
    """Heuristic score in [0, 1]; needs no training."""
    return min(1.0, rule_points(record, rules) / rules.cap)


# --- trained models ---------------------------------------------------------

@dataclass
class TrainedModel:
    kind: str
    feature_set: str = "all"
    mode: str = "per_domain"
    meta: str = "n/a"
    forest: Optional[RandomForest] = None
    rules: Optional[RuleSet] = None
    codec: CategoricalCodec = field(default_factory=lambda: CategoricalCodec(frozen=True))
    train_manifest: Dict = field(default_factory=dict)
    payload: Dict = field(default_factory=dict)

    @property
    def classifier_id(self) -> str:
        if self.kind == "forest":
            suffix = "cert" if self.mode == "cert" else self.meta
            return f"RF_{self.feature_set}_{suffix}"
        return self.kind

    def to_dict(self) -> Dict:
        data = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": self.kind,
            "feature_set": self.feature_set,
            "mode": self.mode,
            "meta": self.meta,
            "feature_names": feature_names(self.feature_set),
            "codec": self.codec.to_dict(),
            "train_manifest": self.train_manifest,
        }
        if self.forest is not None:
            data["forest"] = self.forest.to_dict()
        if self.rules is not None:
            data["rules"] = self.rules.to_dict()
        if self.payload:
            data["payload"] = self.payload
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainedModel":
        if data.get("format") != MODEL_FORMAT or int(data.get("version", 0)) > MODEL_VERSION:
            raise ValueError("not a supported model file")
        feature_set = data.get("feature_set", "all")
        if data.get("feature_names") and list(data["feature_names"]) != feature_names(feature_set):
            raise DimensionMismatch("model feature names differ from this catalog")
        return cls(
            kind=data["kind"],
            feature_set=feature_set,
            mode=data.get("mode", "per_domain"),
            meta=data.get("meta", "n/a"),
            forest=RandomForest.from_dict(data["forest"]) if "forest" in data else None,
            rules=RuleSet.from_dict(data["rules"]) if "rules" in data else None,
            codec=CategoricalCodec.from_dict(data.get("codec", {})),
            train_manifest=dict(data.get("train_manifest", {})),
            payload=dict(data.get("payload", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        logger.info(f"Saved {self.classifier_id} model to {path}")
        return path

    @classmethod
    def load(cls, path) -> "TrainedModel":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def rules_model(path=None) -> TrainedModel:
    return TrainedModel(kind="rules", rules=RuleSet.load(path), train_manifest={"rules": str(path or DEFAULT_RULES_PATH)})


def load_model(spec: str) -> TrainedModel:
    """A model file path, or ``rules`` / ``rules:<file>`` for the heuristic scorer."""
    if spec == "rules":
        return rules_model()
    if spec.startswith("rules:"):
        return rules_model(spec.split(":", 1)[1])
    return TrainedModel.load(spec)


def training_matrix(dataset, extractor: FeatureExtractor, mode: str):
    """One row per (certificate, domain) pair, or per certificate in cert mode."""
    rows, labels = [], []
    for item in dataset.records:
        for vector in extractor.vectors(item.record, mode):
            rows.append(vector.values)
            labels.append(1 if item.label == "phish" else 0)
    if not rows:
        raise EmptyClass("dataset produced no training samples")
    return np.stack(rows), np.asarray(labels, dtype=np.int64)


def train_forest(dataset, feature_set: str = "all", mode: str = "per_domain", n_trees: int = 200,
                 seed: int = 0, meta: str = "max", n_jobs: int = 1,
                 popular_ranks: Optional[Mapping[str, int]] = None) -> TrainedModel:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "per_domain" and meta not in METAS:
        raise ValueError(f"unknown meta classifier {meta!r}")
    labels = {item.label for item in dataset.records}
    if labels != {"benign", "phish"}:
        raise EmptyClass(f"dataset needs both labels, has {sorted(labels)}")

    codec = CategoricalCodec().fit(item.record for item in dataset.records).freeze()
    extractor = FeatureExtractor(codec, feature_set, popular_ranks=popular_ranks)
    X, y = training_matrix(dataset, extractor, mode)
    forest = RandomForest(n_trees=n_trees, seed=seed, n_jobs=n_jobs).fit(X, y)

    manifest = {
        "dataset_hash": dataset.dataset_hash(),
        "seed": seed,
        "n_trees": n_trees,
        "samples": int(len(y)),
        "phish_samples": int(y.sum()),
        "timestamp": dataset.created_at.isoformat(),
    }
    return TrainedModel(kind="forest", feature_set=feature_set, mode=mode,
                        meta=meta if mode == "per_domain" else "n/a",
                        forest=forest, codec=codec, train_manifest=manifest)


def validation_scores(model: TrainedModel, dataset,
                      popular_ranks: Optional[Mapping[str, int]] = None) -> Dict[str, List]:
    """
    (score, label) pairs for every certificate of ``dataset``, keyed by
    classifier id. A per-domain forest is scored under every meta classifier.
    """
    scorer = scorer_for(model, popular_ranks=popular_ranks)
    if model.kind != "forest" or model.mode == "cert":
        return {model.classifier_id: [(scorer.score_record(item.record), item.label) for item in dataset.records]}
    per_domain = [(scorer.domain_scores(item.record), item.label) for item in dataset.records]
    return {
        f"RF_{model.feature_set}_{meta}": [(combine_meta(scores, meta), label) for scores, label in per_domain]
        for meta in METAS
    }


def score(model: TrainedModel, vector: FeatureVector) -> float:
    """Mean leaf phish fraction over the model's trees."""
    if model.forest is None or not model.forest.trees:
        raise UntrainedModel(f"{model.kind} model has no forest")
    if vector.feature_set != model.feature_set:
        raise DimensionMismatch(f"vector uses {vector.feature_set} features, model {model.feature_set}")
    return float(model.forest.predict_proba(vector.values)[0])


# --- scorer registry --------------------------------------------------------

class CertificateScorer:
    """Scores one certificate record in [0, 1]."""

    def __init__(self, model: TrainedModel, **options):
        self.model = model

    def score_record(self, record: CertificateRecord) -> float:
        raise NotImplementedError


_SCORERS: Dict[str, Callable[..., CertificateScorer]] = {}


def register_scorer(kind: str):
    """Class decorator binding a model kind to its scorer."""
    def decorator(cls):
        _SCORERS[kind] = cls
        return cls
    return decorator


def scorer_for(model: TrainedModel, **options) -> CertificateScorer:
    try:
        factory = _SCORERS[model.kind]
    except KeyError:
        raise ValueError(f"no scorer registered for model kind {model.kind!r}") from None
    return factory(model, **options)


@register_scorer("forest")
class ForestScorer(CertificateScorer):
    def __init__(self, model: TrainedModel, popular_ranks: Optional[Mapping[str, int]] = None, **options):
        super().__init__(model)
        if model.forest is None:
            raise UntrainedModel("forest model without trees")
        self.extractor = FeatureExtractor(model.codec, model.feature_set, popular_ranks=popular_ranks)

    def score_record(self, record: CertificateRecord) -> float:
        vectors = self.extractor.vectors(record, self.model.mode)
        scores = self.model.forest.predict_proba(np.stack([v.values for v in vectors]))
        if self.model.mode == "cert":
            return float(scores[0])
        return combine_meta(scores.tolist(), self.model.meta)

    def domain_scores(self, record: CertificateRecord) -> List[float]:
        vectors = self.extractor.per_domain(record)
        return self.model.forest.predict_proba(np.stack([v.values for v in vectors])).tolist()


@register_scorer("rules")
class RuleScorer(CertificateScorer):
    def __init__(self, model: TrainedModel, **options):
        super().__init__(model)
        self.rules = model.rules or RuleSet.load()

    def score_record(self, record: CertificateRecord) -> float:
        return score_rules(record, self.rules)
