"""
Feature extraction for certificates and the domain names they carry.

The catalog has 126 features: 22 certificate features, 55 domain features and
49 keyword features. Most lexical statistics operate on a name's core (labels
left of the public suffix, dots removed); length-type features use the full name.
"""
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import Levenshtein
import numpy as np
import pandas as pd
from scipy.stats import entropy

from .certs import CertificateRecord
from .config import PACKAGE_DATA_DIR
from .domains import DomainName, decompose_domain, load_ranked_domains
from .errors import DimensionMismatch, EmptyInput, UntrainedModel

logger = logging.getLogger(__name__)

CERT_FEATURES = [
    "is_ov", "is_ev", "is_dv", "sub_has_c", "sub_has_st", "sub_has_l", "sub_only_cn",
    "sub_has_cn", "sub_dn_count", "sub_char_count", "sub_ext_count", "valid_period",
    "policies_count", "is_wildcard", "has_ocsp", "has_cdp", "san_count", "average_sd_count",
    "san_tld_count", "key_algorithm", "key_size", "issuer",
]

_NGRAM_STATS = ["std", "median", "mean", "min", "max", "bottom_quartile", "top_quartile"]

DOMAIN_FEATURES = [
    "sub_cn_entropy", "sub_cn_is_com", "name_san_entropy", "has_uppercase_letters", "num_dash",
    "num_dash_rd", "num_tokens", "tld_in_token", "https_in_domain", "longest_token",
    "special_char_ratio", "is_ip", "is_idn_domain", "san_to_alexa_entropy", "vowel_ratio",
    "digit_ratio", "length", "contains_wwwdot", "contains_subdomain_of_only_digits",
    "subdomain_lengths_mean", "parts", "contains_digits", "has_valid_tld",
    "contains_one_char_subdomains", "prefix_repetition", "char_diversity",
    "contains_tld_as_infix", "alphabet_size", "shannon_entropy", "hex_part_ratio",
    "underscore_ratio", "ratio_of_repeated_chars", "consecutive_consonant_ratio",
    "consecutive_digits_ratio",
] + [f"{n}_gram_{stat}" for n in (1, 2, 3) for stat in _NGRAM_STATS]

COMMON_TLDS = ("com", "net", "org", "info", "biz", "gov", "edu", "mil", "int")
VOWELS = frozenset("aeiou")
_TOKEN_SPLIT = re.compile(r"[.\-_]")
_HEX_LABEL = re.compile(r"^[0-9a-f]+$")
_CONSONANT_RUN = re.compile(r"[b-df-hj-np-tv-z]{2,}")
_DIGIT_RUN = re.compile(r"[0-9]{2,}")
_ORG_IN_DN = re.compile(r"(?:^|,)O=((?:\\.|[^,])*)")

FEATURE_SETS = ("all", "selected")
CERT = "CERT"


def _read_list(path) -> List[str]:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip() and not line.startswith("#")]


@dataclass(frozen=True)
class KeywordList:
    words: Tuple[str, ...]

    def __post_init__(self):
        words = tuple(w.lower() for w in self.words)
        if len(set(words)) != len(words):
            raise ValueError("keyword list contains duplicates")
        object.__setattr__(self, "words", words)

    @classmethod
    def load(cls, path=None) -> "KeywordList":
        return cls(tuple(_read_list(path or PACKAGE_DATA_DIR / "keywords.txt")))

    @property
    def feature_names(self) -> List[str]:
        return [f"kw_{w}" for w in self.words] + ["has_any_keyword", "keyword_count"]


DEFAULT_KEYWORDS = KeywordList.load()
KEYWORD_FEATURES = DEFAULT_KEYWORDS.feature_names
FEATURE_NAMES = CERT_FEATURES + DOMAIN_FEATURES + KEYWORD_FEATURES
SELECTED_FEATURES = _read_list(PACKAGE_DATA_DIR / "selected_features.txt")
EV_OIDS = frozenset(_read_list(PACKAGE_DATA_DIR / "ev_oids.txt"))


def feature_names(feature_set: str = "all") -> List[str]:
    if feature_set == "all":
        return list(FEATURE_NAMES)
    if feature_set == "selected":
        return list(SELECTED_FEATURES)
    raise ValueError(f"unknown feature set {feature_set!r}")


_SELECTED_INDEX = np.array([FEATURE_NAMES.index(name) for name in SELECTED_FEATURES], dtype=np.intp)


# --- string statistics ------------------------------------------------------

def shannon_entropy(values: Union[str, Sequence]) -> float:
    """Base-2 entropy of the symbol distribution; 0 for empty input."""
    counts = list(Counter(values).values())
    if not counts:
        return 0.0
    return float(entropy(counts, base=2))


def ngram_stats(text: str, n: int) -> List[float]:
    """
    std, median, mean, min, max, bottom and top quartile of the n-gram
    occurrence counts of ``text``. Population std, linear-interpolation quartiles.
    """
    counts = Counter(text[i:i + n] for i in range(len(text) - n + 1))
    if not counts:
        return [0.0] * len(_NGRAM_STATS)
    arr = np.array(sorted(counts.values()), dtype=np.float64)
    return [
        float(arr.std()),
        float(np.median(arr)),
        float(arr.mean()),
        float(arr.min()),
        float(arr.max()),
        float(np.percentile(arr, 25)),
        float(np.percentile(arr, 75)),
    ]


def _ratio(part: float, whole: float) -> float:
    return part / whole if whole else 0.0


def _run_ratio(pattern: re.Pattern, text: str) -> float:
    return _ratio(sum(len(m.group()) for m in pattern.finditer(text)), len(text))


# --- categorical codec ------------------------------------------------------

def issuer_key(issuer_dn: str) -> str:
    """Issuer organization when present, else the whole DN."""
    match = _ORG_IN_DN.search(issuer_dn)
    return match.group(1).replace("\\", "") if match else issuer_dn


class CategoricalCodec:
    """
    Frequency-ranked integer codes for issuer and key algorithm. Codes start
    at 1 for the most frequent training value; 0 is reserved for unseen values.
    """

    def __init__(self, issuers: Optional[Dict[str, int]] = None,
                 algorithms: Optional[Dict[str, int]] = None, frozen: bool = False):
        self.issuers = dict(issuers or {})
        self.algorithms = dict(algorithms or {})
        self.frozen = frozen

    @staticmethod
    def _rank(values: Iterable[str]) -> Dict[str, int]:
        counts = Counter(values)
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {value: code for code, (value, _) in enumerate(ordered, start=1)}

    def fit(self, records: Iterable[CertificateRecord]) -> "CategoricalCodec":
        if self.frozen:
            raise ValueError("codec is frozen")
        records = list(records)
        self.issuers = self._rank(issuer_key(r.issuer_dn) for r in records)
        self.algorithms = self._rank(r.key_algorithm for r in records)
        return self

    def freeze(self) -> "CategoricalCodec":
        self.frozen = True
        return self

    def encode_issuer(self, issuer_dn: str) -> int:
        return self.issuers.get(issuer_key(issuer_dn), 0)

    def encode_algorithm(self, algorithm: str) -> int:
        return self.algorithms.get(algorithm, 0)

    def to_dict(self) -> Dict:
        return {"issuers": self.issuers, "algorithms": self.algorithms}

    @classmethod
    def from_dict(cls, data: Mapping) -> "CategoricalCodec":
        return cls(data.get("issuers"), data.get("algorithms"), frozen=True)

    def __eq__(self, other):
        return isinstance(other, CategoricalCodec) and self.to_dict() == other.to_dict()


# --- extraction -------------------------------------------------------------

def extract_cert_features(record: CertificateRecord, codec: CategoricalCodec,
                          ev_oids: Iterable[str] = EV_OIDS) -> List[float]:
    ev_oids = frozenset(ev_oids)
    attrs = record.subject_attrs
    is_ev = any(oid in ev_oids for oid in record.policy_oids)
    is_ov = not is_ev and "O" in attrs
    is_dv = not (is_ev or is_ov)

    san_domains = [decompose_domain(name) for name in record.sans]
    label_counts = [len(d.labels) for d in san_domains]

    return [
        float(is_ov), float(is_ev), float(is_dv),
        float("C" in attrs), float("ST" in attrs), float("L" in attrs),
        float(attrs == frozenset({"CN"})), float("CN" in attrs),
        float(record.subject_attr_count), float(record.subject_char_count),
        float(record.extension_count), float(record.valid_period_days),
        float(len(record.policy_oids)),
        float(any(d.is_wildcard for d in record.domains)),
        float(record.has_ocsp), float(record.has_cdp),
        float(len(record.sans)),
        float(np.mean(label_counts)) if label_counts else 0.0,
        float(len({d.public_suffix for d in san_domains})),
        float(codec.encode_algorithm(record.key_algorithm)),
        float(record.key_size_bits),
        float(codec.encode_issuer(record.issuer_dn)),
    ]


def _name_san_entropy(cn: DomainName, sans: Sequence[DomainName]) -> float:
    distances = []
    for san in sans:
        longest = max(len(cn.core), len(san.core))
        distances.append(Levenshtein.distance(cn.core, san.core) / longest if longest else 0.0)
    if len(distances) < 2 or not any(distances):
        return 0.0
    return float(entropy(distances, base=2) / math.log2(len(distances)))


def _san_to_popular_entropy(sans: Sequence[DomainName], popular_ranks: Mapping[str, int]) -> float:
    if not sans:
        return 0.0
    n = len(popular_ranks)
    total = 0.0
    for san in sans:
        rank = popular_ranks.get(san.registered_domain)
        weight = 1.0 if rank is None else rank / (n + 1)
        total += shannon_entropy(san.core) * weight
    return total / len(sans)


def extract_domain_features(d: DomainName, cn: Optional[DomainName], sans: Sequence[DomainName],
                            popular_ranks: Mapping[str, int]) -> List[float]:
    cn = cn or d
    full, core = d.full, d.core
    prefix = d.prefix_labels
    tokens = [t for t in _TOKEN_SPLIT.split(d.host) if t]
    prefix_tokens = [t for label in prefix for t in re.split(r"[-_]", label) if t]
    counts = Counter(core)
    letters = [c for c in core if c.isalpha()]

    values = [
        shannon_entropy(cn.prefix_labels[0] if cn.prefix_labels else cn.core),
        float(d.public_suffix == "com"),
        _name_san_entropy(cn, sans),
        float(any(c.isupper() for c in full)),
        float(full.count("-")),
        float(d.registered_domain.count("-")),
        float(len(tokens)),
        float(any(tld in token for token in prefix_tokens for tld in COMMON_TLDS)),
        float("https" in full),
        float(max((len(t) for t in tokens), default=0)),
        _ratio(sum(1 for c in full if not c.isalnum()), len(full)),
        float(d.is_ip),
        float(d.is_idn),
        _san_to_popular_entropy(sans, popular_ranks),
        _ratio(sum(1 for c in letters if c in VOWELS), len(letters)),
        _ratio(sum(1 for c in core if c.isdigit()), len(core)),
        float(len(full)),
        float("www." in full),
        float(any(label.isdigit() for label in d.subdomain_labels)),
        float(np.mean([len(label) for label in prefix])) if prefix else 0.0,
        float(len(prefix)),
        float(any(c.isdigit() for c in full)),
        float(d.suffix_known),
        float(any(len(label) == 1 for label in prefix)),
        float(len(set(prefix)) < len(prefix)),
        _ratio(len(counts), len(core)),
        float(any(tld in core[1:-1] for tld in COMMON_TLDS)),
        float(len(counts)),
        shannon_entropy(core),
        _ratio(sum(1 for label in prefix if _HEX_LABEL.match(label)), len(prefix)),
        _ratio(full.count("_"), len(full)),
        _ratio(sum(1 for c in counts.values() if c > 1), len(counts)),
        _run_ratio(_CONSONANT_RUN, core),
        _run_ratio(_DIGIT_RUN, core),
    ]
    for n in (1, 2, 3):
        values.extend(ngram_stats(core, n))
    return values


def extract_keyword_features(d: DomainName, keywords: KeywordList = DEFAULT_KEYWORDS) -> List[float]:
    name = d.stripped.lower()
    flags = [float(word in name) for word in keywords.words]
    count = sum(flags)
    return flags + [float(count > 0), float(count)]


# --- vectors ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    feature_set: str
    subject: Tuple[str, Union[int, str]]

    def __post_init__(self):
        expected = len(feature_names(self.feature_set))
        if self.values.shape != (expected,):
            raise DimensionMismatch(f"{self.feature_set} vector needs {expected} values, "
                                    f"got {self.values.shape}")

    @property
    def names(self) -> List[str]:
        return feature_names(self.feature_set)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def select(values: np.ndarray, feature_set: str) -> np.ndarray:
    if feature_set == "all":
        return values
    return values[..., _SELECTED_INDEX]


def average_vectors(per_domain: Sequence[FeatureVector]) -> FeatureVector:
    """Coordinate-wise mean; columns that agree across inputs are kept exactly."""
    if not per_domain:
        raise EmptyInput("no vectors to average")
    feature_set = per_domain[0].feature_set
    fingerprint = per_domain[0].subject[0]
    for vector in per_domain:
        if vector.feature_set != feature_set or vector.subject[0] != fingerprint:
            raise ValueError("vectors must share feature set and certificate")
    matrix = np.stack([v.values for v in per_domain])
    averaged = np.empty(matrix.shape[1], dtype=np.float64)
    for j in range(matrix.shape[1]):
        column = matrix[:, j]
        if np.all(column == column[0]):
            averaged[j] = column[0]
        else:
            averaged[j] = math.fsum(column) / len(column)
    return FeatureVector(averaged, feature_set, (fingerprint, CERT))


class FeatureExtractor:
    """
    Turns certificate records into feature vectors under a frozen codec.
    """

    def __init__(self, codec: CategoricalCodec, feature_set: str = "all",
                 keywords: KeywordList = DEFAULT_KEYWORDS,
                 popular_ranks: Optional[Mapping[str, int]] = None,
                 ev_oids: Iterable[str] = EV_OIDS):
        if feature_set not in FEATURE_SETS:
            raise ValueError(f"unknown feature set {feature_set!r}")
        if len(keywords.words) != len(DEFAULT_KEYWORDS.words):
            raise DimensionMismatch("keyword list must have as many entries as the catalog")
        self.codec = codec
        self.feature_set = feature_set
        self.keywords = keywords
        self.popular_ranks = (popular_ranks if popular_ranks is not None
                              else load_ranked_domains(PACKAGE_DATA_DIR / "popular_domains.txt"))
        self.ev_oids = frozenset(ev_oids)

    @property
    def names(self) -> List[str]:
        return feature_names(self.feature_set)

    def per_domain(self, record: CertificateRecord) -> List[FeatureVector]:
        cert_values = extract_cert_features(record, self.codec, self.ev_oids)
        domains = record.domains or [decompose_domain("")]
        cn = decompose_domain(record.common_name) if record.common_name else None
        sans = [decompose_domain(name) for name in record.sans]
        vectors = []
        for index, d in enumerate(domains):
            row = np.array(
                cert_values
                + extract_domain_features(d, cn, sans, self.popular_ranks)
                + extract_keyword_features(d, self.keywords),
                dtype=np.float64,
            )
            vectors.append(FeatureVector(select(row, self.feature_set), self.feature_set,
                                         (record.fingerprint_hex, index)))
        return vectors

    def per_cert(self, record: CertificateRecord) -> FeatureVector:
        return average_vectors(self.per_domain(record))

    def vectors(self, record: CertificateRecord, mode: str) -> List[FeatureVector]:
        if mode == "cert":
            return [self.per_cert(record)]
        return self.per_domain(record)


def feature_frame(vectors: Sequence[FeatureVector], labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
    if not vectors:
        raise EmptyInput("no vectors to export")
    frame = pd.DataFrame(np.stack([v.values for v in vectors]), columns=vectors[0].names)
    frame.insert(0, "fingerprint", [v.subject[0] for v in vectors])
    frame.insert(1, "domain_index", [v.subject[1] for v in vectors])
    if labels is not None:
        frame.insert(2, "label", list(labels))
    return frame


def export_features(vectors: Sequence[FeatureVector], path, labels: Optional[Sequence[str]] = None) -> Path:
    """Write a feature matrix as CSV with canonical feature names as header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feature_frame(vectors, labels).to_csv(path, index=False)
    logger.info(f"Exported {len(vectors)} feature vectors to {path}")
    return path


def mdi_selection(model, k: Optional[int] = None, threshold: Optional[float] = None,
                  exclude_keywords: bool = True) -> List[int]:
    """
    Feature indices ranked by mean decrease in impurity, highest first.

    Keep the top ``k``, or every feature with importance >= ``threshold``.
    """
    forest = getattr(model, "forest", None)
    if forest is None or not forest.trees:
        raise UntrainedModel("MDI selection needs a trained forest")
    if getattr(model, "feature_set", "all") != "all":
        raise ValueError("MDI selection runs on a forest trained with feature_set=all")
    importances = forest.feature_importances()
    candidates = range(len(CERT_FEATURES) + len(DOMAIN_FEATURES)) if exclude_keywords else range(len(importances))
    ranked = sorted(candidates, key=lambda j: (-importances[j], j))
    if threshold is not None:
        ranked = [j for j in ranked if importances[j] >= threshold]
    if k is not None:
        ranked = ranked[:k]
    return ranked


def feature_category(name: str) -> str:
    if name in CERT_FEATURES:
        return "certificate"
    if name in DOMAIN_FEATURES:
        return "domain"
    return "keyword"


def importance_frame(model) -> pd.DataFrame:
    importances = model.forest.feature_importances()
    names = feature_names(model.feature_set)
    frame = pd.DataFrame({"feature": names, "mdi": importances})
    frame["category"] = [feature_category(name) for name in names]
    return frame.sort_values(["mdi", "feature"], ascending=[False, True], kind="mergesort").reset_index(drop=True)
