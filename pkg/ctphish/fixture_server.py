"""
Local CT log server for tests and offline runs.

Serves RFC 6962 get-sth / get-entries for one or more logs described by a
YAML or JSON spec. Each log is mounted under /<name>/ct/v1/.
"""
import base64
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import yaml
from cryptography import x509
from cryptography.hazmat.primitives.serialization import Encoding
from flask import Flask, jsonify, request
from werkzeug.serving import make_server

from .ctlog import LogSource, encode_chain, encode_precert_extra, encode_precert_leaf, encode_x509_leaf
from .errors import SpecInvalid

logger = logging.getLogger(__name__)

DEFAULT_BASE_TIMESTAMP = datetime(2020, 5, 1, tzinfo=timezone.utc)
_ISSUER_KEY_HASH = bytes(32)


@dataclass
class FixtureLogSpec:
    name: str
    certificates: List[bytes]
    page_size: int = 256
    initial_size: Optional[int] = None
    growth_per_minute: float = 0.0
    base_timestamp: datetime = DEFAULT_BASE_TIMESTAMP
    timestamp_step_ms: int = 1000
    fail_statuses: List[int] = field(default_factory=list)
    precert_every: int = 0

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise SpecInvalid(f"invalid log name {self.name!r}")
        if not self.certificates:
            raise SpecInvalid(f"log {self.name}: no certificates")
        if self.page_size < 1:
            raise SpecInvalid(f"log {self.name}: page_size must be >= 1")
        if self.initial_size is not None and not 0 <= self.initial_size <= len(self.certificates):
            raise SpecInvalid(f"log {self.name}: initial_size outside [0, {len(self.certificates)}]")
        if self.growth_per_minute < 0:
            raise SpecInvalid(f"log {self.name}: growth_per_minute must be >= 0")
        if self.timestamp_step_ms < 0:
            raise SpecInvalid(f"log {self.name}: timestamp_step_ms must be >= 0")
        if any(not 400 <= int(s) <= 599 for s in self.fail_statuses):
            raise SpecInvalid(f"log {self.name}: fail_statuses must be HTTP error codes")
        if self.base_timestamp.tzinfo is None:
            self.base_timestamp = self.base_timestamp.replace(tzinfo=timezone.utc)


@dataclass
class FixtureSpec:
    logs: List[FixtureLogSpec]

    def __post_init__(self):
        if not self.logs:
            raise SpecInvalid("spec defines no logs")
        names = [log.name for log in self.logs]
        if len(names) != len(set(names)):
            raise SpecInvalid("log names must be unique")


def _read_certificates(path: Path) -> List[bytes]:
    """DER blobs from a PEM bundle, a single DER file or a directory of either."""
    if path.is_dir():
        return [der for child in sorted(path.iterdir()) if child.is_file() for der in _read_certificates(child)]
    data = path.read_bytes()
    if b"-----BEGIN CERTIFICATE-----" in data:
        try:
            return [cert.public_bytes(Encoding.DER) for cert in x509.load_pem_x509_certificates(data)]
        except ValueError as e:
            raise SpecInvalid(f"{path}: {e}") from e
    return [data]


def _parse_time(value) -> datetime:
    if isinstance(value, datetime):
        return value
    try:
        return datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    except ValueError as e:
        raise SpecInvalid(f"bad timestamp {value!r}") from e


def spec_from_mapping(data: Mapping, base_dir: Path = Path(".")) -> FixtureSpec:
    if not isinstance(data, Mapping) or not isinstance(data.get("logs"), list):
        raise SpecInvalid("spec needs a 'logs' list")
    logs = []
    for raw in data["logs"]:
        if not isinstance(raw, Mapping):
            raise SpecInvalid("each log must be a mapping")
        raw = dict(raw)
        certs = raw.pop("certificates", None)
        if isinstance(certs, str):
            certs = [certs]
        if not isinstance(certs, list):
            raise SpecInvalid(f"log {raw.get('name')}: 'certificates' must be a path or list of paths")
        ders: List[bytes] = []
        for item in certs:
            path = Path(item)
            path = path if path.is_absolute() else base_dir / path
            if not path.exists():
                raise SpecInvalid(f"certificate file {path} not found")
            ders.extend(_read_certificates(path))
        if "base_timestamp" in raw:
            raw["base_timestamp"] = _parse_time(raw["base_timestamp"])
        try:
            logs.append(FixtureLogSpec(certificates=ders, **raw))
        except TypeError as e:
            raise SpecInvalid(str(e)) from e
    return FixtureSpec(logs)


def load_fixture_spec(path) -> FixtureSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (OSError, ValueError, yaml.YAMLError) as e:
        raise SpecInvalid(f"{path}: {e}") from e
    return spec_from_mapping(data, path.parent)


def merkle_root(leaf_hashes: Sequence[bytes]) -> bytes:
    """RFC 6962 Merkle tree hash over precomputed leaf hashes."""
    if not leaf_hashes:
        return hashlib.sha256(b"").digest()
    level = list(leaf_hashes)
    # pairwise reduction keeps an odd trailing node unchanged, which matches
    # the largest-power-of-two split
    while len(level) > 1:
        paired = [hashlib.sha256(b"\x01" + level[i] + level[i + 1]).digest()
                  for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]


class FixtureLog:
    """Precomputed entries for one log plus its growth and fault state."""

    def __init__(self, spec: FixtureLogSpec, clock: Callable[[], float] = time.monotonic):
        self.spec = spec
        self.clock = clock
        self.started = clock()
        self._lock = threading.Lock()
        self._failures = list(spec.fail_statuses)
        self._roots: Dict[int, str] = {}
        self.entries: List[Dict[str, str]] = []
        self.timestamps: List[int] = []
        leaf_hashes = []
        base_ms = int(spec.base_timestamp.timestamp() * 1000)
        for i, der in enumerate(spec.certificates):
            ts = base_ms + i * spec.timestamp_step_ms
            if spec.precert_every and i % spec.precert_every == spec.precert_every - 1:
                leaf = encode_precert_leaf(self._tbs(der), _ISSUER_KEY_HASH, ts)
                extra = encode_precert_extra(der, [])
            else:
                leaf = encode_x509_leaf(der, ts)
                extra = encode_chain([])
            self.entries.append({
                "leaf_input": base64.b64encode(leaf).decode("ascii"),
                "extra_data": base64.b64encode(extra).decode("ascii"),
            })
            self.timestamps.append(ts)
            leaf_hashes.append(hashlib.sha256(b"\x00" + leaf).digest())
        self.leaf_hashes = leaf_hashes

    @staticmethod
    def _tbs(der: bytes) -> bytes:
        try:
            return x509.load_der_x509_certificate(der).tbs_certificate_bytes
        except ValueError:
            return der

    @property
    def tree_size(self) -> int:
        total = len(self.entries)
        if self.spec.initial_size is None:
            return total
        grown = int(self.spec.growth_per_minute * (self.clock() - self.started) / 60.0)
        return min(total, self.spec.initial_size + grown)

    def next_failure(self) -> Optional[int]:
        with self._lock:
            return self._failures.pop(0) if self._failures else None

    def root_hash(self, size: int) -> str:
        with self._lock:
            if size not in self._roots:
                self._roots[size] = base64.b64encode(merkle_root(self.leaf_hashes[:size])).decode("ascii")
            return self._roots[size]


def _int_arg(name: str) -> Optional[int]:
    value = request.args.get(name)
    try:
        return int(value)
    except (TypeError, ValueError):
        return None


def create_app(spec: FixtureSpec, clock: Callable[[], float] = time.monotonic) -> Flask:
    app = Flask(__name__)
    logs = {log.name: FixtureLog(log, clock) for log in spec.logs}
    app.config["FIXTURE_LOGS"] = logs

    def lookup(name: str):
        log = logs.get(name)
        if log is None:
            return None, (jsonify({"error": f"unknown log {name}"}), 404)
        status = log.next_failure()
        if status is not None:
            return None, (jsonify({"error": "injected failure"}), status)
        return log, None

    @app.route("/<name>/ct/v1/get-sth")
    def get_sth(name):
        log, failure = lookup(name)
        if failure:
            return failure
        size = log.tree_size
        timestamp = log.timestamps[size - 1] if size else int(log.spec.base_timestamp.timestamp() * 1000)
        return jsonify({
            "tree_size": size,
            "timestamp": timestamp,
            "sha256_root_hash": log.root_hash(size),
            "tree_head_signature": "",
        })

    @app.route("/<name>/ct/v1/get-entries")
    def get_entries(name):
        log, failure = lookup(name)
        if failure:
            return failure
        start, end = _int_arg("start"), _int_arg("end")
        size = log.tree_size
        if start is None or end is None or start < 0 or end < start or start >= size:
            return jsonify({"error": "invalid range"}), 400
        end = min(end, size - 1, start + log.spec.page_size - 1)
        return jsonify({"entries": log.entries[start:end + 1]})

    @app.route("/health")
    def health():
        """Health check endpoint."""
        return jsonify({
            "status": "healthy",
            "logs": {name: log.tree_size for name, log in logs.items()},
            "timestamp": datetime.now(timezone.utc).isoformat(),
        })

    return app


class FixtureServer:
    """Runs the fixture app on a background thread (port 0 picks a free port)."""

    def __init__(self, spec: FixtureSpec, host: str = "127.0.0.1", port: int = 0,
                 clock: Callable[[], float] = time.monotonic):
        self.spec = spec
        self.app = create_app(spec, clock)
        self._server = make_server(host, port, self.app, threaded=True)
        self.host = host
        self.port = self._server.server_port
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def base_url(self, name: str) -> str:
        return f"{self.url}/{name}"

    def log_sources(self) -> List[LogSource]:
        return [LogSource(log.name, self.base_url(log.name)) for log in self.spec.logs]

    def start(self) -> "FixtureServer":
        self._thread = threading.Thread(target=self._server.serve_forever, name="fixture-ct", daemon=True)
        self._thread.start()
        logger.info(f"Fixture CT server listening on {self.url}")
        return self

    def stop(self) -> None:
        self._server.shutdown()
        if self._thread is not None:
            self._thread.join()

    def serve_forever(self) -> None:
        logger.info(f"Fixture CT server listening on {self.url}")
        self._server.serve_forever()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
