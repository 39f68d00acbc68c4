"""
Dataset building: benign certificates sampled from CT chunks, malicious
certificates fetched from live phishing URLs, both filtered and assembled into
a labeled dataset.
"""
import hashlib
import json
import logging
import socket
import ssl
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
from urllib.parse import urlsplit

import numpy as np

from .certs import CertificateRecord, dedup_key, parse_der
from .ctlog import ChunkPlan, CTLogClient
from .domains import load_domain_list, normalize_name
from .errors import EmptyClass, MalformedDer, PipelineError
from .intel import IntelSnapshot

logger = logging.getLogger(__name__)

LABELS = ("benign", "phish")


class DropReason(str, Enum):
    DUPLICATE = "duplicate"
    MALFORMED = "malformed"
    PHISHING_DB = "phishing_db"
    PREFIX = "prefix"
    MALICIOUS_DOMAIN = "malicious_domain"
    BENIGN_SERVICE = "benign_service"
    POPULAR_DOMAIN = "popular_domain"


class FetchFailure(str, Enum):
    CONNECT_FAILED = "ConnectFailed"
    HANDSHAKE_FAILED = "HandshakeFailed"
    NO_CERTIFICATE = "NoCertificate"
    MALFORMED = "MalformedDer"
    BAD_URL = "BadUrl"


@dataclass(frozen=True)
class FilterLists:
    benign_services: frozenset = frozenset()
    popular_domains: frozenset = frozenset()
    malicious_domains: frozenset = frozenset()

    def __post_init__(self):
        for name in ("benign_services", "popular_domains", "malicious_domains"):
            object.__setattr__(self, name, frozenset(normalize_name(d) for d in getattr(self, name)))

    @classmethod
    def load(cls, benign_services=None, popular_domains=None, malicious_domains=None) -> "FilterLists":
        return cls(
            benign_services=load_domain_list(benign_services) if benign_services else frozenset(),
            popular_domains=load_domain_list(popular_domains) if popular_domains else frozenset(),
            malicious_domains=load_domain_list(malicious_domains) if malicious_domains else frozenset(),
        )


@dataclass
class FilterOutcome:
    """Kept records plus exactly one drop reason per removed input."""
    kept: List[CertificateRecord] = field(default_factory=list)
    dropped: Counter = field(default_factory=Counter)
    input_count: int = 0
    warnings: List[str] = field(default_factory=list)

    def drop(self, reason: DropReason) -> None:
        self.dropped[reason] += 1

    @property
    def accounted(self) -> bool:
        return self.input_count == len(self.kept) + sum(self.dropped.values())

    def get_summary(self) -> Dict:
        return {
            'input': self.input_count,
            'kept': len(self.kept),
            'dropped': {reason.value: count for reason, count in sorted(self.dropped.items())},
            'partial': bool(self.warnings),
            'warnings': list(self.warnings),
        }


def filter_benign(records: Iterable[CertificateRecord], filters: FilterLists,
                  intel: IntelSnapshot, outcome: Optional[FilterOutcome] = None) -> FilterOutcome:
    """Deduplicate, then drop records known to the phishing database or prefix list."""
    outcome = outcome or FilterOutcome()
    seen = set()
    for record in records:
        outcome.input_count += 1
        key = dedup_key(record)
        if key in seen:
            outcome.drop(DropReason.DUPLICATE)
            continue
        seen.add(key)
        domains = record.domains
        if intel.match_domains(domains) is not None:
            outcome.drop(DropReason.PHISHING_DB)
        elif intel.prefix_check(domains):
            outcome.drop(DropReason.PREFIX)
        elif any(d.registered_domain in filters.malicious_domains for d in domains):
            outcome.drop(DropReason.MALICIOUS_DOMAIN)
        else:
            outcome.kept.append(record)
    return outcome


def build_benign(client: CTLogClient, plan: ChunkPlan, filters: FilterLists, intel: IntelSnapshot,
                 workers: int = 4) -> FilterOutcome:
    """
    Download every chunk of the plan and filter the certificates found.

    A chunk that fails is recorded in the outcome's warnings; the remaining
    chunks still produce records.
    """
    outcome = FilterOutcome()

    def fetch(chunk: Tuple[int, int]):
        try:
            return chunk, client.get_entries(*chunk), None
        except PipelineError as e:
            return chunk, [], e

    def parsed():
        window = max(1, workers) * 2
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            # at most `window` chunks are held in memory at once
            for start in range(0, len(plan.chunks), window):
                for chunk, entries, error in pool.map(fetch, plan.chunks[start:start + window]):
                    if error is not None:
                        message = f"{client.source.name} chunk [{chunk[0]}, {chunk[1]}) failed: {error}"
                        logger.warning(message)
                        outcome.warnings.append(message)
                        continue
                    for entry in entries:
                        try:
                            yield parse_der(entry.der, seen_at=entry.timestamp,
                                            ct_log_index=(entry.log_name, entry.index))
                        except MalformedDer as e:
                            logger.warning(f"{entry.log_name}/{entry.index}: {e}")
                            outcome.input_count += 1
                            outcome.drop(DropReason.MALFORMED)

    filter_benign(parsed(), filters, intel, outcome)
    logger.info(f"Benign build: {outcome.get_summary()}")
    return outcome


def _target(url: str) -> str:
    """Host of a phishing URL; raises ValueError when the URL does not parse."""
    url = url.strip()
    if "://" not in url:
        url = "https://" + url
    parts = urlsplit(url)
    # reading .port raises on a malformed port
    if not parts.hostname or parts.port == 0:
        raise ValueError(f"no usable host in {url!r}")
    return parts.hostname


def _capture(url: str, timeout: float, attempts: int, port: int
             ) -> Tuple[Optional[CertificateRecord], Optional[FetchFailure]]:
    try:
        host = _target(url)
    except ValueError as e:
        logger.debug(f"{url!r}: {e}")
        return None, FetchFailure.BAD_URL
    context = ssl.create_default_context()
    context.check_hostname = False
    context.verify_mode = ssl.CERT_NONE

    failure = FetchFailure.CONNECT_FAILED
    der = None
    for _ in range(max(1, attempts)):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            failure = FetchFailure.CONNECT_FAILED
            logger.debug(f"{host}:{port} connect failed: {e}")
            continue
        try:
            with context.wrap_socket(sock, server_hostname=host) as tls:
                der = tls.getpeercert(binary_form=True)
        except (ssl.SSLError, OSError) as e:
            failure = FetchFailure.HANDSHAKE_FAILED
            logger.debug(f"{host}:{port} handshake failed: {e}")
            continue
        finally:
            sock.close()
        if der:
            break
        failure = FetchFailure.NO_CERTIFICATE

    if der:
        try:
            return parse_der(der, seen_at=datetime.now(timezone.utc)), None
        except MalformedDer:
            failure = FetchFailure.MALFORMED
    return None, failure


def fetch_malicious_cert(url: str, timeout: float = 10.0, attempts: int = 2, port: int = 443,
                         stats: Optional[Counter] = None) -> Optional[CertificateRecord]:
    """
    Capture the leaf certificate a phishing URL's host presents on ``port``.

    One TLS handshake per attempt, SNI set to the host, no chain validation and
    no HTTP request, so redirects are never followed. A port inside the URL is
    ignored.
    """
    record, failure = _capture(url, timeout, attempts, port)
    if failure is not None:
        if stats is not None:
            stats[failure] += 1
        logger.warning(f"No certificate for {url}: {failure.value}")
    return record


def fetch_malicious_certs(urls: Sequence[str], workers: int = 8, timeout: float = 10.0, attempts: int = 2,
                          port: int = 443) -> Tuple[List[CertificateRecord], Counter]:
    stats: Counter = Counter()
    records = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for url, (record, failure) in zip(urls, pool.map(lambda u: _capture(u, timeout, attempts, port), urls)):
            if failure is not None:
                stats[failure] += 1
                logger.warning(f"No certificate for {url}: {failure.value}")
            else:
                records.append(record)
    return records, stats


def filter_malicious(records: Iterable[CertificateRecord], filters: FilterLists) -> FilterOutcome:
    """Deduplicate, then drop certificates of shared services and popular domains."""
    outcome = FilterOutcome()
    seen = set()
    for record in records:
        outcome.input_count += 1
        key = dedup_key(record)
        if key in seen:
            outcome.drop(DropReason.DUPLICATE)
            continue
        seen.add(key)
        registered = {d.registered_domain for d in record.domains}
        if registered & filters.benign_services:
            outcome.drop(DropReason.BENIGN_SERVICE)
        elif registered & filters.popular_domains:
            outcome.drop(DropReason.POPULAR_DOMAIN)
        else:
            outcome.kept.append(record)
    logger.info(f"Malicious filter: {outcome.get_summary()}")
    return outcome


# --- labeled datasets -------------------------------------------------------

@dataclass(frozen=True)
class LabeledRecord:
    record: CertificateRecord
    label: str
    provenance: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")


def _provenance(record: CertificateRecord, label: str) -> str:
    if record.ct_log_index:
        return f"ct:{record.ct_log_index[0]}:{record.ct_log_index[1]}"
    return "tls-fetch" if label == "phish" else "ct"


@dataclass
class LabeledDataset:
    records: List[LabeledRecord]
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def __post_init__(self):
        fingerprints = [item.record.fingerprint for item in self.records]
        if len(set(fingerprints)) != len(fingerprints):
            raise ValueError("dataset contains duplicate fingerprints")

    @property
    def counts(self) -> Dict[str, int]:
        counts = Counter(item.label for item in self.records)
        return {label: counts.get(label, 0) for label in LABELS}

    def dataset_hash(self) -> str:
        digest = hashlib.sha256()
        for item in self.records:
            digest.update(f"{item.record.fingerprint_hex}:{item.label}\n".encode("ascii"))
        return digest.hexdigest()

    def get_summary(self) -> Dict:
        return {
            'total': len(self.records),
            'counts': self.counts,
            'dataset_hash': self.dataset_hash(),
            'created_at': self.created_at.isoformat(),
        }

    def split(self, fraction: float, seed: int = 0) -> Tuple["LabeledDataset", "LabeledDataset"]:
        """Stratified (train, validation) split holding out ``fraction`` of each label."""
        if not 0.0 < fraction < 1.0:
            raise ValueError("fraction must be in (0, 1)")
        rng = np.random.default_rng(seed)
        held = set()
        for label in LABELS:
            indices = [i for i, item in enumerate(self.records) if item.label == label]
            count = int(len(indices) * fraction)
            held.update(indices[i] for i in rng.permutation(len(indices))[:count])
        train = [item for i, item in enumerate(self.records) if i not in held]
        validation = [item for i, item in enumerate(self.records) if i in held]
        return LabeledDataset(train, self.created_at), LabeledDataset(validation, self.created_at)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps({"_meta": {"created_at": self.created_at.isoformat()}}) + "\n")
            for item in self.records:
                f.write(json.dumps({"record": item.record.to_dict(), "label": item.label,
                                    "provenance": item.provenance}, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        records = []
        created_at = None
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                data = json.loads(line)
                if "_meta" in data:
                    created_at = datetime.fromisoformat(data["_meta"]["created_at"])
                    continue
                records.append(LabeledRecord(CertificateRecord.from_dict(data["record"]),
                                             data["label"], data.get("provenance", "")))
        dataset = cls(records)
        if created_at is not None:
            dataset.created_at = created_at
        return dataset


def _unique(records: Iterable[CertificateRecord]) -> List[CertificateRecord]:
    seen = {}
    for record in records:
        seen.setdefault(dedup_key(record), record)
    return list(seen.values())


def assemble(benign: Sequence[CertificateRecord], phish: Sequence[CertificateRecord], balance: bool = True,
             seed: int = 0, created_at: Optional[datetime] = None) -> LabeledDataset:
    """
    Label and combine both classes. With ``balance`` the larger class is
    uniformly subsampled, with the given seed, to the size of the smaller one.
    """
    phish = _unique(phish)
    phish_keys = {dedup_key(r) for r in phish}
    benign = [r for r in _unique(benign) if dedup_key(r) not in phish_keys]
    if not benign or not phish:
        raise EmptyClass(f"need both classes, got {len(benign)} benign and {len(phish)} phish")

    if balance and len(benign) != len(phish):
        rng = np.random.default_rng(seed)
        size = min(len(benign), len(phish))
        if len(benign) > size:
            benign = [benign[i] for i in np.sort(rng.choice(len(benign), size, replace=False))]
        else:
            phish = [phish[i] for i in np.sort(rng.choice(len(phish), size, replace=False))]

    items = ([LabeledRecord(r, "benign", _provenance(r, "benign")) for r in benign]
             + [LabeledRecord(r, "phish", _provenance(r, "phish")) for r in phish])
    dataset = LabeledDataset(items, created_at or datetime.now(timezone.utc))
    logger.info(f"Assembled dataset: {dataset.counts}")
    return dataset
