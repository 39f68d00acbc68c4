"""
Domain-name decomposition against a bundled public-suffix snapshot.
"""
import ipaddress
import logging
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple

import tldextract

logger = logging.getLogger(__name__)

# tldextract ships a versioned PSL snapshot; no suffix list is fetched at runtime.
_extractor = tldextract.TLDExtract(suffix_list_urls=(), cache_dir=None)


def configure_public_suffix(path: Optional[str] = None) -> None:
    """Swap in a public-suffix snapshot file (``None`` restores the bundled one)."""
    global _extractor
    if path:
        _extractor = tldextract.TLDExtract(
            suffix_list_urls=(Path(path).resolve().as_uri(),),
            cache_dir=None,
            fallback_to_snapshot=True,
        )
        logger.info(f"Using public suffix snapshot {path}")
    else:
        _extractor = tldextract.TLDExtract(suffix_list_urls=(), cache_dir=None)
    decompose_domain.cache_clear()


def normalize_name(name: str) -> str:
    """Lowercase and strip one trailing dot; punycode is left as-is."""
    name = name.strip().lower()
    if name.endswith("."):
        name = name[:-1]
    return name


@dataclass(frozen=True)
class DomainName:
    full: str
    labels: Tuple[str, ...]
    public_suffix: str
    registered_domain: str
    core: str
    is_wildcard: bool
    is_idn: bool
    is_ip: bool
    suffix_known: bool
    # labels left of the public suffix, wildcard label removed
    prefix_labels: Tuple[str, ...] = ()

    @property
    def host(self) -> str:
        """The name without a leading wildcard label."""
        return self.full[2:] if self.is_wildcard else self.full

    @property
    def stripped(self) -> str:
        """The name without public suffix and wildcard label."""
        return ".".join(self.prefix_labels)

    @property
    def subdomain_labels(self) -> Tuple[str, ...]:
        """Labels left of the registered domain."""
        return self.prefix_labels[:-1]


def _parse_ip(name: str) -> bool:
    try:
        ipaddress.ip_address(name.strip("[]"))
        return True
    except ValueError:
        return False


@lru_cache(maxsize=65536)
def decompose_domain(name: str) -> DomainName:
    """
    Split a domain into labels, public suffix, registered domain and core.

    Every string decomposes. Unknown suffixes fall back to the last label.
    """
    full = normalize_name(name)
    labels = tuple(full.split("."))
    is_idn = any(label.startswith("xn--") for label in labels)

    if _parse_ip(full):
        return DomainName(
            full=full, labels=labels, public_suffix="", registered_domain=full,
            core=full.replace(".", ""), is_wildcard=False, is_idn=False,
            is_ip=True, suffix_known=False, prefix_labels=labels,
        )

    is_wildcard = len(labels) > 1 and labels[0] == "*"
    host_labels = labels[1:] if is_wildcard else labels

    suffix = _extractor(".".join(host_labels)).suffix
    suffix_known = bool(suffix)
    n_suffix = len(suffix.split(".")) if suffix_known else 1
    n_suffix = min(n_suffix, len(host_labels))

    public_suffix = ".".join(host_labels[-n_suffix:])
    prefix_labels = host_labels[:-n_suffix]
    if prefix_labels:
        registered_domain = ".".join(host_labels[-(n_suffix + 1):])
    else:
        registered_domain = public_suffix

    return DomainName(
        full=full,
        labels=labels,
        public_suffix=public_suffix,
        registered_domain=registered_domain,
        core="".join(prefix_labels),
        is_wildcard=is_wildcard,
        is_idn=is_idn,
        is_ip=False,
        suffix_known=suffix_known,
        prefix_labels=prefix_labels,
    )


def _read_lines(path) -> list:
    with open(path, "r", encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip() and not line.lstrip().startswith("#")]


def load_domain_list(path) -> frozenset:
    """Newline-delimited domain list, normalized."""
    return frozenset(normalize_name(line) for line in _read_lines(path))


def load_ranked_domains(path) -> dict:
    """Domains in rank order, one per line; returns domain -> rank (1-based)."""
    ranks = {}
    for line in _read_lines(path):
        name = normalize_name(line.split(",")[-1])
        ranks.setdefault(name, len(ranks) + 1)
    return ranks
