"""
Classification pipeline: live classification of followed logs, retrospective
classification over time spans, result storage, re-verification and
post-processing hooks.
"""
import json
import logging
import os
import queue
import re
import shlex
import subprocess
import tempfile
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import yaml

from .certs import CertificateRecord, parse_der
from .classifiers import CertificateScorer, TrainedModel, scorer_for
from .ctlog import CTLogClient, CursorStore, LogEntry
from .errors import EmptySpan, MalformedDer, PipelineError

logger = logging.getLogger(__name__)

# end-of-stream marker placed on the queue by each producer
EOS = object()

# only these are substituted; other braces in a hook command are passed through
HOOK_PLACEHOLDER = re.compile(r"\{(domains|fingerprint|score|classifier)\}")


def _now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class ClassificationResult:
    fingerprint: str
    domains: Tuple[str, ...]
    score: float
    threshold: float
    predicted: str
    classifier_id: str
    classified_at: datetime
    log_index: Optional[Tuple[str, int]] = None
    verifications: List[Dict] = field(default_factory=list)

    def __post_init__(self):
        expected = "phish" if self.score >= self.threshold else "benign"
        if self.predicted != expected:
            raise ValueError(f"predicted {self.predicted!r} disagrees with score/threshold")

    @property
    def verdict(self) -> Optional[str]:
        return self.verifications[-1]["verdict"] if self.verifications else None

    @property
    def verified_at(self) -> Optional[datetime]:
        return datetime.fromisoformat(self.verifications[-1]["verified_at"]) if self.verifications else None

    def add_verification(self, verdict, at: Optional[datetime] = None) -> None:
        """Append to the history; timestamps never go backwards, confirmations never revert."""
        verdict = getattr(verdict, "value", verdict)
        at = at or _now()
        if self.verifications:
            at = max(at, self.verified_at)
            if self.verdict == "confirmed_phish":
                verdict = "confirmed_phish"
        self.verifications.append({"verdict": verdict, "verified_at": at.isoformat()})

    def to_dict(self) -> Dict:
        return {
            "fingerprint": self.fingerprint,
            "domains": list(self.domains),
            "score": self.score,
            "threshold": self.threshold,
            "predicted": self.predicted,
            "classifier_id": self.classifier_id,
            "classified_at": self.classified_at.isoformat(),
            "log_index": list(self.log_index) if self.log_index else None,
            "verifications": list(self.verifications),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ClassificationResult":
        log_index = data.get("log_index")
        return cls(
            fingerprint=data["fingerprint"],
            domains=tuple(data["domains"]),
            score=float(data["score"]),
            threshold=float(data["threshold"]),
            predicted=data["predicted"],
            classifier_id=data["classifier_id"],
            classified_at=datetime.fromisoformat(data["classified_at"]),
            log_index=(log_index[0], int(log_index[1])) if log_index else None,
            verifications=list(data.get("verifications", [])),
        )


# --- result store -----------------------------------------------------------

class ResultStore:
    """Append-only JSONL result file, flushed per result."""

    def __init__(self, path, truncate: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._file = open(self.path, "w" if truncate else "a", encoding="utf-8")

    def append(self, result: ClassificationResult) -> None:
        with self._lock:
            self._file.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
            self._file.flush()

    def close(self):
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_results(path) -> List[ClassificationResult]:
    with open(path, "r", encoding="utf-8") as f:
        return [ClassificationResult.from_dict(json.loads(line)) for line in f if line.strip()]


def write_results(results: Iterable[ClassificationResult], path) -> Path:
    """Replace a result file atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".results")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        for result in results:
            f.write(json.dumps(result.to_dict(), sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


# --- hooks ------------------------------------------------------------------

@dataclass
class HookSpec:
    command: Union[str, List[str]]
    trigger: str = "on_positive"
    timeout: float = 30.0
    enabled: bool = True
    name: str = ""

    def __post_init__(self):
        if self.trigger != "on_positive":
            raise ValueError(f"unsupported hook trigger {self.trigger!r}")
        if self.timeout <= 0:
            raise ValueError("hook timeout must be > 0")
        if isinstance(self.command, str):
            shlex.split(self.command)

    def argv(self, result: ClassificationResult) -> List[str]:
        parts = shlex.split(self.command) if isinstance(self.command, str) else list(self.command)
        values = {
            "domains": " ".join(result.domains),
            "fingerprint": result.fingerprint,
            "score": f"{result.score:.6f}",
            "classifier": result.classifier_id,
        }
        return [HOOK_PLACEHOLDER.sub(lambda m: values[m.group(1)], part) for part in parts]


def load_hooks(path) -> List[HookSpec]:
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return [HookSpec(**spec) for spec in data.get("hooks", [])]


class HookDispatcher:
    """
    Runs hook commands for positive results on a separate pool; the
    classification stream never waits on them.
    """

    def __init__(self, hooks: Sequence[HookSpec], workers: int = 2, stats: Optional["PipelineStats"] = None):
        self.hooks = [h for h in hooks if h.enabled]
        self.stats = stats or PipelineStats()
        self._pool = ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="hook")
        self.outcomes: List[Dict] = []
        self._lock = threading.Lock()

    def _run(self, hook: HookSpec, result: ClassificationResult) -> Dict:
        outcome = {"hook": hook.name or str(hook.command), "fingerprint": result.fingerprint,
                   "timed_out": False, "returncode": None}
        try:
            completed = subprocess.run(hook.argv(result), timeout=hook.timeout, capture_output=True, check=False)
            outcome["returncode"] = completed.returncode
            if completed.returncode != 0:
                logger.warning(f"Hook {outcome['hook']} exited with {completed.returncode}")
        except subprocess.TimeoutExpired:
            outcome["timed_out"] = True
            self.stats.add("hook_timeouts")
            logger.warning(f"Hook {outcome['hook']} timed out after {hook.timeout}s")
        except (OSError, ValueError) as e:
            outcome["returncode"] = -1
            logger.warning(f"Hook {outcome['hook']} failed to start: {e}")
        with self._lock:
            self.outcomes.append(outcome)
        return outcome

    def dispatch(self, result: ClassificationResult) -> List[Future]:
        if result.predicted != "phish":
            return []
        futures = []
        for hook in self.hooks:
            self.stats.add("hooks_dispatched")
            futures.append(self._pool.submit(self._run, hook, result))
        return futures

    def close(self, wait: bool = True) -> None:
        self._pool.shutdown(wait=wait)


# --- stats ------------------------------------------------------------------

class PipelineStats:
    """Thread-safe run counters."""

    FIELDS = ("entries", "parse_errors", "duplicates", "scored", "positives",
              "hooks_dispatched", "hook_timeouts", "source_failures")

    def __init__(self):
        self._lock = threading.Lock()
        self.counts = {name: 0 for name in self.FIELDS}
        self.started = time.monotonic()

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            self.counts[name] += n

    def __getitem__(self, name: str) -> int:
        return self.counts[name]

    def get_summary(self) -> Dict:
        with self._lock:
            summary = dict(self.counts)
        summary["elapsed_seconds"] = round(time.monotonic() - self.started, 3)
        return summary


# --- classification ---------------------------------------------------------

class Classifier:
    """
    Parse, deduplicate, score and emit results for a stream of log entries.
    """

    def __init__(self, model: TrainedModel, threshold: float, workers: int = 4,
                 hooks: Optional[HookDispatcher] = None, store: Optional[ResultStore] = None,
                 verifier=None, scorer: Optional[CertificateScorer] = None,
                 stats: Optional[PipelineStats] = None, dedup_window: int = 1_000_000):
        if not 0.0 <= threshold <= 1.0:
            raise ValueError("threshold must be in [0, 1]")
        if dedup_window < 1:
            raise ValueError("dedup_window must be >= 1")
        self.model = model
        self.threshold = threshold
        self.workers = max(1, workers)
        self.hooks = hooks
        self.store = store
        self.verifier = verifier
        self.scorer = scorer or scorer_for(model)
        self.stats = stats or PipelineStats()
        self.dedup_window = dedup_window
        # fingerprints in order of last sighting, oldest first
        self._seen: "OrderedDict[bytes, None]" = OrderedDict()

    def _first_sighting(self, fingerprint: bytes) -> bool:
        """True unless the fingerprint is among the last ``dedup_window`` distinct ones."""
        if fingerprint in self._seen:
            self._seen.move_to_end(fingerprint)
            return False
        self._seen[fingerprint] = None
        if len(self._seen) > self.dedup_window:
            self._seen.popitem(last=False)
        return True

    def _parse(self, entry: LogEntry) -> Optional[CertificateRecord]:
        try:
            return parse_der(entry.der, seen_at=entry.timestamp, ct_log_index=(entry.log_name, entry.index))
        except MalformedDer as e:
            self.stats.add("parse_errors")
            logger.warning(f"{entry.log_name}/{entry.index}: {e}")
            return None

    def _score(self, record: CertificateRecord) -> float:
        self.stats.add("scored")
        return float(self.scorer.score_record(record))

    def classify_batch(self, entries: Sequence[LogEntry], pool: ThreadPoolExecutor,
                       replay: bool = False) -> List[ClassificationResult]:
        """Results for one batch, in entry order. ``replay`` stamps results with the leaf time."""
        self.stats.add("entries", len(entries))
        records = list(pool.map(self._parse, entries))
        fresh: List[Tuple[LogEntry, CertificateRecord]] = []
        for entry, record in zip(entries, records):
            if record is None:
                continue
            if not self._first_sighting(record.fingerprint):
                self.stats.add("duplicates")
                continue
            fresh.append((entry, record))
        scores = list(pool.map(self._score, [record for _, record in fresh]))

        results = []
        for (entry, record), value in zip(fresh, scores):
            predicted = "phish" if value >= self.threshold else "benign"
            result = ClassificationResult(
                fingerprint=record.fingerprint_hex,
                domains=record.domain_names,
                score=value,
                threshold=self.threshold,
                predicted=predicted,
                classifier_id=self.model.classifier_id,
                classified_at=entry.timestamp if replay else _now(),
                log_index=(entry.log_name, entry.index),
            )
            if predicted == "phish":
                self.stats.add("positives")
                if self.verifier is not None:
                    result.add_verification(self.verifier.verify(result), result.classified_at)
                if self.hooks is not None:
                    self.hooks.dispatch(result)
            if self.store is not None:
                self.store.append(result)
            results.append(result)
        return results


def _produce(client: CTLogClient, out: queue.Queue, stats: PipelineStats, **follow_options) -> None:
    try:
        for entry in client.follow(**follow_options):
            out.put(entry)
    except PipelineError as e:
        stats.add("source_failures")
        logger.error(f"{client.source.name}: stopped following: {e}")
    finally:
        out.put(EOS)


def _acknowledge(cursors: CursorStore, batch: Sequence[LogEntry]) -> None:
    # each log's entries reach the queue in index order
    latest: Dict[str, int] = {}
    for entry in batch:
        latest[entry.log_name] = entry.index + 1
    for log_name, next_index in latest.items():
        cursors.set(log_name, next_index)


def classify_stream(clients: Sequence[CTLogClient], classifier: Classifier, queue_size: int = 1024,
                    batch_size: int = 64, cursors: Optional[CursorStore] = None,
                    stop: Optional[threading.Event] = None, **follow_options) -> Iterator[ClassificationResult]:
    """
    Follow every log on its own thread and classify entries as they arrive.

    The bounded queue pauses fetching when classification falls behind. An
    outage stops only the affected log; the others keep streaming. Cursors
    move once per batch, after the batch has been classified and stored.
    """
    entries: queue.Queue = queue.Queue(maxsize=queue_size)
    stop = stop or threading.Event()
    producers = [
        threading.Thread(target=_produce, args=(client, entries, classifier.stats),
                         kwargs={"cursors": cursors, "persist": False, "stop": stop, **follow_options},
                         name=f"follow-{client.source.name}", daemon=True)
        for client in clients
    ]
    for thread in producers:
        thread.start()

    finished = 0
    with ThreadPoolExecutor(max_workers=classifier.workers) as pool:
        try:
            while finished < len(producers):
                batch = []
                item = entries.get()
                while True:
                    if item is EOS:
                        finished += 1
                    else:
                        batch.append(item)
                    if len(batch) >= batch_size:
                        break
                    try:
                        item = entries.get_nowait()
                    except queue.Empty:
                        break
                if batch:
                    results = classifier.classify_batch(batch, pool)
                    if cursors:
                        _acknowledge(cursors, batch)
                    yield from results
        finally:
            stop.set()
    logger.info(f"Stream finished: {classifier.stats.get_summary()}")


def classify_range(clients: Sequence[CTLogClient], span, classifier: Classifier, chunk_size: int = 1000,
                   fetch_workers: int = 4, batch_size: int = 256) -> List[ClassificationResult]:
    """
    Classify every entry of each log whose leaf time falls in ``span``.

    Logs are processed in name order and entries in index order, so a replay
    with the same inputs yields identical results.
    """
    results: List[ClassificationResult] = []
    with ThreadPoolExecutor(max_workers=classifier.workers) as pool:
        for client in sorted(clients, key=lambda c: c.source.name):
            try:
                plan = client.plan_chunks(chunk_size, 0, span)
            except EmptySpan:
                logger.info(f"{client.source.name}: no entries in span")
                continue
            batch: List[LogEntry] = []
            for entry in client.fetch_plan(plan, fetch_workers):
                batch.append(entry)
                if len(batch) >= batch_size:
                    results.extend(classifier.classify_batch(batch, pool, replay=True))
                    batch = []
            if batch:
                results.extend(classifier.classify_batch(batch, pool, replay=True))
    logger.info(f"Range finished: {classifier.stats.get_summary()}")
    return results


def reverify(results_path, verifier, out_path=None, now: Optional[datetime] = None) -> List[ClassificationResult]:
    """
    Recompute verdicts of positive results against a newer feed snapshot.
    The verification history is appended to, never rewritten.
    """
    results = read_results(results_path)
    now = now or _now()
    changed = 0
    for result in results:
        if result.predicted != "phish":
            continue
        before = result.verdict
        result.add_verification(verifier.verify(result), now)
        changed += int(before != result.verdict)
    write_results(results, out_path or results_path)
    logger.info(f"Re-verified {sum(r.predicted == 'phish' for r in results)} positives, {changed} verdicts changed")
    return results
