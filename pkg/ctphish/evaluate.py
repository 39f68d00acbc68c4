"""
Metric engine: ROC curves, threshold analysis at fixed false-positive rates and
operating reports with lower-bound TPR semantics.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import DegenerateSet

logger = logging.getLogger(__name__)

SCORE_LABELS = ("benign", "phish", "unknown")
DEFAULT_TARGETS = (1e-3, 1e-4)


@dataclass(frozen=True)
class ScoredItem:
    score: float
    label: str
    domains: Tuple[str, ...] = ()
    fingerprint: str = ""

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("scores must be finite")
        if self.label not in SCORE_LABELS:
            raise ValueError(f"label must be one of {SCORE_LABELS}")


@dataclass
class ScoredSet:
    items: List[ScoredItem] = field(default_factory=list)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[float, str]]) -> "ScoredSet":
        return cls([ScoredItem(float(s), label) for s, label in pairs])

    @classmethod
    def from_results(cls, results: Iterable, labels: Optional[Mapping[str, str]] = None) -> "ScoredSet":
        """
        Items from classification results. Ground-truth ``labels`` by fingerprint
        win; otherwise a confirmed verdict means phish and anything else unknown.
        """
        items = []
        for result in results:
            if labels is not None and result.fingerprint in labels:
                label = labels[result.fingerprint]
            else:
                label = "phish" if result.verdict == "confirmed_phish" else "unknown"
            items.append(ScoredItem(result.score, label, tuple(result.domains), result.fingerprint))
        return cls(items)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        scores = np.array([i.score for i in self.items], dtype=np.float64)
        positive = np.array([i.label == "phish" for i in self.items], dtype=bool)
        return scores, positive


@dataclass(frozen=True)
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


def _confusion_at_thresholds(set_: ScoredSet):
    """(thresholds descending, tp, fp, P, N) with positives being score >= threshold."""
    scores, positive = set_.arrays()
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateSet(f"need both classes, got {n_pos} phish and {n_neg} negatives")
    order = np.argsort(-scores, kind="stable")
    scores, positive = scores[order], positive[order]
    tp = np.cumsum(positive)
    fp = np.cumsum(~positive)
    # last index of each distinct score
    ends = np.r_[np.nonzero(scores[1:] != scores[:-1])[0], len(scores) - 1]
    top = math.nextafter(float(scores[0]), math.inf)
    thresholds = np.r_[top, scores[ends]]
    return thresholds, np.r_[0, tp[ends]], np.r_[0, fp[ends]], n_pos, n_neg


def roc(set_: ScoredSet) -> List[RocPoint]:
    """
    ROC points at every distinct score, thresholds descending, from (0,0) to (1,1).
    Unknown labels count as negatives.
    """
    thresholds, tp, fp, n_pos, n_neg = _confusion_at_thresholds(set_)
    return [RocPoint(float(f) / n_neg, float(t) / n_pos, float(th)) for th, t, f in zip(thresholds, tp, fp)]


def threshold_at_fpr(set_: ScoredSet, target_fpr: float) -> float:
    """Smallest threshold whose empirical FPR stays within ``target_fpr``."""
    if not 0.0 < target_fpr < 1.0:
        raise ValueError("target_fpr must be in (0, 1)")
    thresholds, _, fp, _, n_neg = _confusion_at_thresholds(set_)
    # fp is nondecreasing as thresholds fall
    allowed = np.nonzero(fp / n_neg <= target_fpr)[0]
    return float(thresholds[allowed[-1]])


def write_roc_csv(set_: ScoredSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([asdict(p) for p in roc(set_)], columns=["threshold", "fpr", "tpr"])
    frame.to_csv(path, index=False)
    return path


# --- operating reports ------------------------------------------------------

@dataclass(frozen=True)
class OperatingPoint:
    classifier: str
    target_fpr: float
    threshold: float
    tp: int
    tpr: float
    fp: int
    fp_budget: int
    positives: int
    negatives: int


@dataclass
class OperatingReport:
    points: List[OperatingPoint] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {"points": [asdict(p) for p in self.points]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(p) for p in self.points])

    def render_text(self) -> str:
        """One row per classifier, #TP and TPR per target FPR."""
        if not self.points:
            return "no results"
        rows: Dict[str, Dict[str, str]] = {}
        for p in self.points:
            row = rows.setdefault(p.classifier, {})
            row[f"#TP @ FPR {p.target_fpr:g}"] = str(p.tp)
            row[f"TPR @ FPR {p.target_fpr:g}"] = f"{p.tpr:.4f}"
        return pd.DataFrame.from_dict(rows, orient="index").to_string()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def resolve_labels(set_: ScoredSet, verifier=None) -> ScoredSet:
    """Unknown items become phish when the verifier confirms them, else benign."""
    items = []
    for item in set_.items:
        label = item.label
        if label == "unknown":
            confirmed = verifier is not None and verifier.verify_domains(item.domains).value == "confirmed_phish"
            label = "phish" if confirmed else "benign"
        items.append(ScoredItem(item.score, label, item.domains, item.fingerprint))
    return ScoredSet(items)


def operating_point(name: str, set_: ScoredSet, target_fpr: float) -> OperatingPoint:
    scores, positive = set_.arrays()
    n_pos = int(positive.sum())
    n_neg = len(scores) - n_pos
    budget = math.ceil(target_fpr * n_neg)
    if n_pos == 0:
        threshold = math.nextafter(float(scores.max()), math.inf) if len(scores) else 1.0
    elif n_neg == 0:
        threshold = float(scores.min())
    else:
        threshold = threshold_at_fpr(set_, target_fpr)
    flagged = scores >= threshold
    tp = int((flagged & positive).sum())
    fp = int((flagged & ~positive).sum())
    return OperatingPoint(
        classifier=name, target_fpr=target_fpr, threshold=threshold, tp=tp,
        tpr=tp / n_pos if n_pos else 0.0, fp=fp, fp_budget=budget,
        positives=n_pos, negatives=n_neg,
    )


def report(results: Sequence[Tuple[str, ScoredSet]], targets: Sequence[float] = DEFAULT_TARGETS,
           verifier=None) -> OperatingReport:
    """
    Operating points per classifier and target FPR. Positives count as true
    positives only when labeled or confirmed phish, so TPR is a lower bound.
    """
    out = OperatingReport()
    for name, scored in results:
        resolved = resolve_labels(scored, verifier)
        for target in targets:
            point = operating_point(name, resolved, target)
            logger.info(f"{name} @ FPR {target:g}: threshold={point.threshold:.6f} "
                        f"TP={point.tp} FP={point.fp}/{point.fp_budget}")
            out.points.append(point)
    return out
