"""
Certificate Transparency v1 client: signed tree heads, entry ranges, chunk
planning over time spans and live following of logs.
"""
import base64
import binascii
import bisect
import json
import logging
import os
import tempfile
import threading
import time
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Tuple
from urllib.parse import urlsplit

import requests

from .errors import EmptySpan, LeafDecodeError, LogUnreachable, MalformedResponse, RangeRejected

logger = logging.getLogger(__name__)

X509_ENTRY = 0
PRECERT_ENTRY = 1
RETRY_STATUSES = {429, 500, 502, 503, 504}
LOOPBACK_HOSTS = {"localhost", "127.0.0.1", "::1"}


@dataclass(frozen=True)
class LogSource:
    name: str
    base_url: str
    scope_year: Optional[int] = None

    def __post_init__(self):
        parts = urlsplit(self.base_url)
        if not parts.netloc:
            raise ValueError(f"log {self.name}: base_url must be absolute")
        # plain http only for local fixture servers
        if parts.scheme != "https" and not (parts.scheme == "http" and parts.hostname in LOOPBACK_HOSTS):
            raise ValueError(f"log {self.name}: base_url must use https")
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))


@dataclass(frozen=True)
class LogEntry:
    log_name: str
    index: int
    timestamp: datetime
    leaf_input: bytes
    der: bytes
    is_precert: bool = False
    tbs: Optional[bytes] = None


@dataclass(frozen=True)
class ChunkPlan:
    chunks: Tuple[Tuple[int, int], ...]
    chunk_size: int
    gap: int
    span: Tuple[Optional[datetime], Optional[datetime]]

    @property
    def entry_count(self) -> int:
        return sum(end - start for start, end in self.chunks)


# --- RFC 6962 TLS structures -------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LeafDecodeError("truncated TLS structure")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def uint(self, n: int) -> int:
        return int.from_bytes(self.take(n), "big")

    def opaque(self, length_bytes: int) -> bytes:
        return self.take(self.uint(length_bytes))

    def done(self) -> bool:
        return self.pos == len(self.data)


def _len3(data: bytes) -> bytes:
    return len(data).to_bytes(3, "big") + data


def encode_x509_leaf(der: bytes, timestamp_ms: int) -> bytes:
    return (b"\x00\x00" + timestamp_ms.to_bytes(8, "big") + X509_ENTRY.to_bytes(2, "big")
            + _len3(der) + b"\x00\x00")


def encode_precert_leaf(tbs: bytes, issuer_key_hash: bytes, timestamp_ms: int) -> bytes:
    if len(issuer_key_hash) != 32:
        raise ValueError("issuer_key_hash must be 32 bytes")
    return (b"\x00\x00" + timestamp_ms.to_bytes(8, "big") + PRECERT_ENTRY.to_bytes(2, "big")
            + issuer_key_hash + _len3(tbs) + b"\x00\x00")


def encode_chain(chain: List[bytes]) -> bytes:
    return _len3(b"".join(_len3(cert) for cert in chain))


def encode_precert_extra(pre_certificate: bytes, chain: List[bytes]) -> bytes:
    return _len3(pre_certificate) + encode_chain(chain)


def leaf_timestamp_ms(leaf: bytes) -> int:
    if len(leaf) < 10:
        raise LeafDecodeError("leaf too short for a timestamp")
    return int.from_bytes(leaf[2:10], "big")


def decode_leaf(leaf: bytes, extra_data: bytes) -> Tuple[int, bool, bytes, Optional[bytes]]:
    """
    Parse a MerkleTreeLeaf. Returns (timestamp_ms, is_precert, der, tbs).

    For precert entries the DER is the pre_certificate carried in extra_data.
    """
    reader = _Reader(leaf)
    version = reader.uint(1)
    leaf_type = reader.uint(1)
    if version != 0 or leaf_type != 0:
        raise LeafDecodeError(f"unsupported leaf version/type {version}/{leaf_type}")
    timestamp_ms = reader.uint(8)
    entry_type = reader.uint(2)
    if entry_type == X509_ENTRY:
        der = reader.opaque(3)
        tbs = None
    elif entry_type == PRECERT_ENTRY:
        reader.take(32)
        tbs = reader.opaque(3)
        extra = _Reader(extra_data)
        der = extra.opaque(3)
    else:
        raise LeafDecodeError(f"unknown entry type {entry_type}")
    reader.opaque(2)
    if not reader.done():
        raise LeafDecodeError("trailing bytes after leaf")
    if not der:
        raise LeafDecodeError("empty certificate")
    return timestamp_ms, entry_type == PRECERT_ENTRY, der, tbs


def _ms_to_datetime(ms: int) -> datetime:
    return datetime.fromtimestamp(ms / 1000, tz=timezone.utc)


def _b64(value) -> bytes:
    if not isinstance(value, str):
        raise LeafDecodeError("missing base64 field")
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as e:
        raise LeafDecodeError(f"bad base64: {e}") from e


def decode_entry(log_name: str, index: int, item: Dict) -> LogEntry:
    if not isinstance(item, dict):
        raise LeafDecodeError("entry is not an object")
    leaf = _b64(item.get("leaf_input"))
    extra = _b64(item.get("extra_data", ""))
    timestamp_ms, is_precert, der, tbs = decode_leaf(leaf, extra)
    return LogEntry(
        log_name=log_name, index=index, timestamp=_ms_to_datetime(timestamp_ms),
        leaf_input=leaf, der=der, is_precert=is_precert, tbs=tbs,
    )


# --- cursors ----------------------------------------------------------------

class CursorStore:
    """Persisted next-index per log. Single writer; writes are atomic."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._cursors: Dict[str, int] = {}
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as f:
                self._cursors = {k: int(v) for k, v in json.load(f).items()}

    def get(self, log_name: str) -> Optional[int]:
        with self._lock:
            return self._cursors.get(log_name)

    def set(self, log_name: str, next_index: int) -> None:
        with self._lock:
            self._cursors[log_name] = next_index
            self.path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".cursors")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(self._cursors, f, sort_keys=True)
            os.replace(tmp, self.path)


# --- client -----------------------------------------------------------------

class _TimestampView(Sequence):
    """Lazy sequence of leaf timestamps (ms) so bisect can search a log."""

    def __init__(self, client: "CTLogClient", size: int):
        self.client = client
        self.size = size

    def __len__(self):
        return self.size

    def __getitem__(self, index):
        return self.client.entry_timestamp_ms(index)


class CTLogClient:
    """
    Client for one CT log speaking the RFC 6962 JSON API.
    """

    def __init__(self, source: LogSource, session: Optional[requests.Session] = None,
                 timeout: float = 10.0, backoff_base: float = 1.0, backoff_factor: float = 2.0,
                 backoff_cap: float = 60.0, max_attempts: int = 8,
                 sleep: Callable[[float], None] = time.sleep):
        self.source = source
        self.session = session or requests.Session()
        self.timeout = timeout
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.backoff_cap = backoff_cap
        self.max_attempts = max_attempts
        self.sleep = sleep
        self.stats = Counter()
        self._stats_lock = threading.Lock()
        self._timestamps: Dict[int, int] = {}

    def _count(self, key: str, n: int = 1) -> None:
        with self._stats_lock:
            self.stats[key] += n

    def backoff_delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * self.backoff_factor ** attempt)

    def _get_json(self, endpoint: str, params: Optional[Dict] = None):
        url = f"{self.source.base_url}/ct/v1/{endpoint}"
        last_error = None
        for attempt in range(self.max_attempts):
            try:
                response = self.session.get(url, params=params, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as e:
                last_error = str(e)
            else:
                if response.status_code == 200:
                    try:
                        return response.json()
                    except ValueError as e:
                        raise MalformedResponse(f"{self.source.name}: invalid JSON from {endpoint}") from e
                if response.status_code in RETRY_STATUSES:
                    last_error = f"HTTP {response.status_code}"
                elif endpoint == "get-entries" and 400 <= response.status_code < 500:
                    raise RangeRejected(f"{self.source.name}: range {params} rejected "
                                        f"(HTTP {response.status_code})")
                else:
                    raise LogUnreachable(f"{self.source.name}: HTTP {response.status_code} from {endpoint}")

            if attempt + 1 < self.max_attempts:
                delay = self.backoff_delay(attempt)
                self._count("retries")
                logger.warning(f"{self.source.name}: {endpoint} failed ({last_error}), "
                               f"retrying in {delay:.1f}s")
                self.sleep(delay)

        raise LogUnreachable(f"{self.source.name}: {endpoint} failed after "
                             f"{self.max_attempts} attempts ({last_error})")

    def get_sth(self) -> Tuple[int, datetime]:
        data = self._get_json("get-sth")
        if not isinstance(data, dict):
            raise MalformedResponse(f"{self.source.name}: get-sth is not an object")
        tree_size = data.get("tree_size")
        timestamp = data.get("timestamp")
        if not isinstance(tree_size, int) or isinstance(tree_size, bool) or tree_size < 0:
            raise MalformedResponse(f"{self.source.name}: get-sth missing tree_size")
        if not isinstance(timestamp, int):
            raise MalformedResponse(f"{self.source.name}: get-sth missing timestamp")
        return tree_size, _ms_to_datetime(timestamp)

    def get_entries(self, start: int, end: int) -> List[LogEntry]:
        """
        Fetch entries in the half-open range [start, end).

        Server-truncated pages are followed by requests for the remainder.
        Entries that fail to decode are skipped and counted.
        """
        if start < 0 or end < start:
            raise ValueError(f"invalid range [{start}, {end})")
        entries: List[LogEntry] = []
        cursor = start
        while cursor < end:
            data = self._get_json("get-entries", {"start": cursor, "end": end - 1})
            page = data.get("entries") if isinstance(data, dict) else None
            if not isinstance(page, list) or not page:
                raise MalformedResponse(f"{self.source.name}: empty get-entries page at {cursor}")
            page = page[:end - cursor]
            self._count("requests")
            for offset, item in enumerate(page):
                index = cursor + offset
                try:
                    entries.append(decode_entry(self.source.name, index, item))
                except LeafDecodeError as e:
                    self._count("decode_skips")
                    logger.warning(f"{self.source.name}: skipping entry {index}: {e}")
            cursor += len(page)
        return entries

    def entry_timestamp_ms(self, index: int) -> int:
        if index not in self._timestamps:
            data = self._get_json("get-entries", {"start": index, "end": index})
            page = data.get("entries") if isinstance(data, dict) else None
            if not isinstance(page, list) or not page:
                raise MalformedResponse(f"{self.source.name}: no entry at {index}")
            self._timestamps[index] = leaf_timestamp_ms(_b64(page[0].get("leaf_input")))
        return self._timestamps[index]

    def locate_span(self, tree_size: int,
                    span: Tuple[Optional[datetime], Optional[datetime]]) -> Tuple[int, int]:
        """Binary-search leaf timestamps for the index range of [from, to)."""
        view = _TimestampView(self, tree_size)
        start_time, end_time = span
        lo = 0 if start_time is None else bisect.bisect_left(view, int(start_time.timestamp() * 1000))
        hi = tree_size if end_time is None else bisect.bisect_left(view, int(end_time.timestamp() * 1000))
        return lo, max(lo, hi)

    def plan_chunks(self, chunk_size: int, gap: int,
                    span: Tuple[Optional[datetime], Optional[datetime]] = (None, None)) -> ChunkPlan:
        if chunk_size < 1 or gap < 0:
            raise ValueError("chunk_size must be >= 1 and gap >= 0")
        tree_size, _ = self.get_sth()
        lo, hi = self.locate_span(tree_size, span)
        if lo >= hi:
            raise EmptySpan(f"{self.source.name}: no entries in span {span}")
        chunks = tuple((s, min(s + chunk_size, hi)) for s in range(lo, hi, chunk_size + gap))
        logger.info(f"{self.source.name}: planned {len(chunks)} chunks over [{lo}, {hi})")
        return ChunkPlan(chunks=chunks, chunk_size=chunk_size, gap=gap, span=span)

    def fetch_plan(self, plan: ChunkPlan, workers: int = 4) -> Iterator[LogEntry]:
        """Download chunks with a worker pool; entries are yielded in index order."""
        window = max(1, workers) * 2
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for i in range(0, len(plan.chunks), window):
                batch = plan.chunks[i:i + window]
                for entries in pool.map(lambda r: self.get_entries(*r), batch):
                    yield from entries

    def follow(self, poll_interval: float = 10.0, cursors: Optional[CursorStore] = None,
               start_index: Optional[int] = None, stop: Optional[threading.Event] = None,
               max_idle_polls: Optional[int] = None, batch_size: int = 256,
               persist: bool = True) -> Iterator[LogEntry]:
        """
        Emit every new entry exactly once in index order.

        Without a persisted cursor the stream starts at ``start_index`` or, by
        default, at the current tree size. With ``persist=False`` the cursor is
        only read; the consumer records progress itself.
        """
        name = self.source.name
        cursor = cursors.get(name) if cursors else None
        writer = cursors if persist else None
        if cursor is None:
            cursor = start_index if start_index is not None else self.get_sth()[0]
        logger.info(f"{name}: following from index {cursor}")
        # the cursor is written once per fetched batch and again when the stream closes
        persisted = emitted = cursor
        idle = 0
        try:
            while not (stop and stop.is_set()):
                tree_size, _ = self.get_sth()
                if tree_size > cursor:
                    idle = 0
                    while cursor < tree_size:
                        end = min(cursor + batch_size, tree_size)
                        for entry in self.get_entries(cursor, end):
                            yield entry
                            emitted = entry.index + 1
                        cursor = emitted = end
                        if writer:
                            writer.set(name, cursor)
                            persisted = cursor
                else:
                    idle += 1
                    if max_idle_polls is not None and idle >= max_idle_polls:
                        return
                if stop:
                    stop.wait(poll_interval)
                else:
                    self.sleep(poll_interval)
        finally:
            if writer and emitted != persisted:
                writer.set(name, emitted)
