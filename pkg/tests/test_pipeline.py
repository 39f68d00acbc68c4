import socket
import sys
import time
from datetime import datetime, timedelta, timezone

import pytest

from ctphish.classifiers import load_model
from ctphish.ctlog import CTLogClient, CursorStore, LogSource
from ctphish.intel import IntelSnapshot, Source, Verifier, parse_feed
from ctphish.pipeline import (
    ClassificationResult, Classifier, HookDispatcher, HookSpec, PipelineStats, ResultStore, classify_range,
    classify_stream, load_hooks, read_results, reverify, write_results,
)

from conftest import BASE_TIME, LE_ISSUER, simple_der

MALFORMED = b"\x30\x03\x02\x01\x00"


def benign_der(i):
    return simple_der(f"shop{i}.example.com", serial=i + 1)


def phish_der(i):
    return simple_der(f"paypal-login{i:03d}.ga", serial=1000 + i, issuer=LE_ISSUER)


@pytest.fixture(scope="module")
def two_logs():
    """argon and xenon overlap in 10 benign and 2 phishing certificates."""
    argon = [benign_der(i) for i in range(20)] + [phish_der(i) for i in range(5)]
    xenon = [benign_der(i) for i in range(10, 25)] + [phish_der(i) for i in range(3, 8)]
    return {"argon": argon, "xenon": xenon}


@pytest.fixture(scope="module")
def rules():
    return load_model("rules")


def _clients(server, **options):
    options.setdefault("sleep", lambda s: None)
    return [CTLogClient(source, **options) for source in server.log_sources()]


def _snapshot(*urls):
    entries, _ = parse_feed(Source.OPENPHISH, "\n".join(urls).encode())
    return IntelSnapshot.build(entries)


def test_range_dedups_across_logs(ct_server, two_logs, rules):
    server = ct_server(two_logs)
    classifier = Classifier(rules, threshold=0.5, workers=2)

    results = classify_range(_clients(server), (None, None), classifier, chunk_size=8, batch_size=7)

    assert len(results) == 33
    assert len({r.fingerprint for r in results}) == 33
    assert classifier.stats["entries"] == 45
    assert classifier.stats["duplicates"] == 12
    assert classifier.stats["positives"] == 8
    assert [r.log_index for r in results[:25]] == [("argon", i) for i in range(25)]
    positives = sorted(d for r in results if r.predicted == "phish" for d in r.domains)
    assert positives == [f"paypal-login{i:03d}.ga" for i in range(8)]
    assert all(r.classifier_id == "rules" for r in results)


def test_range_replay_is_deterministic(ct_server, two_logs, rules):
    server = ct_server(two_logs)

    def run(workers):
        classifier = Classifier(rules, threshold=0.5, workers=workers)
        return [r.to_dict() for r in classify_range(_clients(server), (None, None), classifier,
                                                    chunk_size=5, fetch_workers=workers)]

    first = run(1)
    assert run(1) == first
    assert run(4) == first
    assert first[0]["classified_at"] == BASE_TIME.isoformat()


def test_range_respects_span(ct_server, two_logs, rules):
    server = ct_server(two_logs)
    span = (BASE_TIME + timedelta(seconds=5), BASE_TIME + timedelta(seconds=10))

    results = classify_range(_clients(server), span, Classifier(rules, threshold=0.5))

    assert [r.log_index for r in results] == [("argon", i) for i in range(5, 10)] + \
        [("xenon", i) for i in range(5, 10)]


def test_empty_span_yields_nothing(ct_server, two_logs, rules):
    server = ct_server(two_logs)
    later = BASE_TIME + timedelta(days=30)
    assert classify_range(_clients(server), (later, later + timedelta(days=1)),
                          Classifier(rules, threshold=0.5)) == []


def test_dedup_memory_is_bounded(ct_server, rules):
    ders = [benign_der(i) for i in range(10)] + [benign_der(0), benign_der(9)]
    server = ct_server({"argon": ders})
    classifier = Classifier(rules, threshold=0.5, dedup_window=5)

    results = classify_range(_clients(server), (None, None), classifier, batch_size=4)

    # shop0 fell out of the window, shop9 is still remembered
    assert [r.log_index[1] for r in results] == list(range(11))
    assert classifier.stats["duplicates"] == 1
    assert len(classifier._seen) == 5
    with pytest.raises(ValueError):
        Classifier(rules, threshold=0.5, dedup_window=0)


def test_malformed_entries_are_counted(ct_server, rules):
    server = ct_server({"argon": [benign_der(0), MALFORMED, phish_der(0)]})
    classifier = Classifier(rules, threshold=0.5)
    results = classify_range(_clients(server), (None, None), classifier)
    assert len(results) == 2
    assert classifier.stats["parse_errors"] == 1


def test_stream_follows_every_log(ct_server, two_logs, rules, tmp_path):
    server = ct_server(two_logs)
    with ResultStore(tmp_path / "results.jsonl") as store:
        classifier = Classifier(rules, threshold=0.5, store=store)
        results = list(classify_stream(_clients(server), classifier, queue_size=16, batch_size=8,
                                       start_index=0, max_idle_polls=1, poll_interval=0.05))

    assert len(results) == 33
    assert classifier.stats["duplicates"] == 12
    assert len(read_results(tmp_path / "results.jsonl")) == 33
    for name in ("argon", "xenon"):
        indices = [r.log_index[1] for r in results if r.log_index[0] == name]
        assert indices == sorted(indices)


def test_stream_cursor_follows_classified_batches(ct_server, two_logs, rules, tmp_path):
    server = ct_server(two_logs)
    cursors = CursorStore(tmp_path / "cursors.json")

    results = list(classify_stream(_clients(server), Classifier(rules, threshold=0.5), batch_size=8,
                                   cursors=cursors, start_index=0, max_idle_polls=1, poll_interval=0.05))

    assert len(results) == 33
    assert CursorStore(tmp_path / "cursors.json").get("argon") == 25
    assert CursorStore(tmp_path / "cursors.json").get("xenon") == 20


class FailingClassifier(Classifier):
    """Classifies one batch, then fails on the next."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.batches = []

    def classify_batch(self, entries, pool, replay=False):
        if self.batches:
            raise RuntimeError("classification failed")
        self.batches.append(list(entries))
        return super().classify_batch(entries, pool, replay)


def test_stream_cursor_stays_behind_unclassified_entries(ct_server, two_logs, rules, tmp_path):
    server = ct_server({"argon": two_logs["argon"]})
    cursors = CursorStore(tmp_path / "cursors.json")
    classifier = FailingClassifier(rules, threshold=0.5)

    with pytest.raises(RuntimeError):
        list(classify_stream(_clients(server), classifier, batch_size=5, cursors=cursors,
                             start_index=0, max_idle_polls=1, poll_interval=0.05))

    [first] = classifier.batches
    assert CursorStore(tmp_path / "cursors.json").get("argon") == first[-1].index + 1 <= 5


def test_stream_survives_unreachable_log(ct_server, two_logs, rules):
    server = ct_server({"argon": two_logs["argon"]})
    with socket.create_server(("127.0.0.1", 0)) as s:
        dead_port = s.getsockname()[1]
    dead = CTLogClient(LogSource("dead", f"http://127.0.0.1:{dead_port}/dead"), max_attempts=1, timeout=1)
    classifier = Classifier(rules, threshold=0.5)

    results = list(classify_stream(_clients(server) + [dead], classifier,
                                   start_index=0, max_idle_polls=1, poll_interval=0.05))

    assert len(results) == 25
    assert classifier.stats["source_failures"] == 1


def test_positives_are_verified_on_the_fly(ct_server, two_logs, rules):
    server = ct_server({"argon": two_logs["argon"]})
    verifier = Verifier(_snapshot("https://paypal-login001.ga/signin"))
    classifier = Classifier(rules, threshold=0.5, verifier=verifier)

    results = classify_range(_clients(server), (None, None), classifier)

    verdicts = {r.domains[0]: r.verdict for r in results if r.predicted == "phish"}
    assert verdicts["paypal-login001.ga"] == "confirmed_phish"
    assert verdicts["paypal-login000.ga"] == "no_evidence"
    assert all(r.verdict is None for r in results if r.predicted == "benign")


# --- hooks ------------------------------------------------------------------

def test_hooks_run_for_positives_only(ct_server, two_logs, rules, tmp_path):
    server = ct_server({"argon": two_logs["argon"]})
    out = tmp_path / "hook.log"
    hook = HookSpec(command=[sys.executable, "-c",
                             "import sys; open(sys.argv[1], 'a').write(sys.argv[2] + '\\n')",
                             str(out), "{domains}"], name="record")
    stats = PipelineStats()
    hooks = HookDispatcher([hook], stats=stats)
    classifier = Classifier(rules, threshold=0.5, hooks=hooks, stats=stats)

    classify_range(_clients(server), (None, None), classifier)
    hooks.close()

    assert sorted(out.read_text().split()) == [f"paypal-login{i:03d}.ga" for i in range(5)]
    assert stats["hooks_dispatched"] == 5
    assert all(o["returncode"] == 0 for o in hooks.outcomes)


def test_slow_hook_times_out_without_blocking(ct_server, rules):
    server = ct_server({"argon": [phish_der(0), benign_der(0)]})
    stats = PipelineStats()
    hooks = HookDispatcher([HookSpec([sys.executable, "-c", "import time; time.sleep(30)"], timeout=5)],
                           stats=stats)
    classifier = Classifier(rules, threshold=0.5, hooks=hooks, stats=stats)

    started = time.monotonic()
    results = classify_range(_clients(server), (None, None), classifier)
    # classification is done before the hook gives up
    assert time.monotonic() - started < 5
    assert len(results) == 2
    assert stats["hook_timeouts"] == 0
    hooks.close()

    assert stats["hook_timeouts"] == 1
    assert hooks.outcomes[0]["timed_out"]


def test_hook_placeholders():
    result = ClassificationResult("ab" * 32, ("a.ga", "www.a.ga"), 0.75, 0.5, "phish", "rules", BASE_TIME)
    hook = HookSpec("notify --fp {fingerprint} --score {score} --by {classifier}")
    assert hook.argv(result) == ["notify", "--fp", "ab" * 32, "--score", "0.750000", "--by", "rules"]


def test_hook_commands_may_carry_literal_braces(tmp_path):
    result = ClassificationResult("ab" * 32, ("a.ga",), 0.75, 0.5, "phish", "rules", BASE_TIME)
    out = tmp_path / "hook.json"
    hook = HookSpec([sys.executable, "-c", "import sys; open(sys.argv[1], 'w').write(sys.argv[2])",
                     str(out), '{"fp": "{fingerprint}", "n": {0}}'], name="json")
    assert hook.argv(result)[-1] == '{"fp": "' + "ab" * 32 + '", "n": {0}}'

    hooks = HookDispatcher([hook])
    [future] = hooks.dispatch(result)
    assert future.result()["returncode"] == 0
    hooks.close()
    assert out.read_text() == '{"fp": "' + "ab" * 32 + '", "n": {0}}'


def test_hook_that_cannot_start_is_recorded(tmp_path):
    result = ClassificationResult("ab" * 32, ("a.ga",), 0.75, 0.5, "phish", "rules", BASE_TIME)
    hooks = HookDispatcher([HookSpec([str(tmp_path / "missing-binary"), "{domains}"], name="missing")])
    [future] = hooks.dispatch(result)
    hooks.close()
    assert future.result()["returncode"] == -1
    assert hooks.outcomes == [{"hook": "missing", "fingerprint": "ab" * 32, "timed_out": False,
                               "returncode": -1}]
    with pytest.raises(ValueError):
        HookSpec('notify "unterminated')


def test_load_hooks(tmp_path):
    path = tmp_path / "hooks.yaml"
    path.write_text("hooks:\n  - command: notify {domains}\n    timeout: 5\n  - command: [echo, x]\n"
                    "    enabled: false\n")
    hooks = load_hooks(path)
    assert [h.timeout for h in hooks] == [5, 30.0]
    assert len(HookDispatcher(hooks).hooks) == 1
    with pytest.raises(ValueError):
        HookSpec("notify", trigger="on_negative")


# --- results ----------------------------------------------------------------

def test_result_consistency_is_enforced():
    with pytest.raises(ValueError):
        ClassificationResult("ff", ("a.ga",), 0.4, 0.5, "phish", "rules", BASE_TIME)
    with pytest.raises(ValueError):
        Classifier(load_model("rules"), threshold=1.5)


def test_verification_history_is_monotone():
    result = ClassificationResult("ff", ("a.ga",), 0.9, 0.5, "phish", "rules", BASE_TIME)
    later = BASE_TIME + timedelta(days=1)
    result.add_verification("no_evidence", later)
    result.add_verification("confirmed_phish", BASE_TIME)
    result.add_verification("no_evidence", later + timedelta(days=1))

    assert [v["verdict"] for v in result.verifications] == ["no_evidence", "confirmed_phish", "confirmed_phish"]
    stamps = [datetime.fromisoformat(v["verified_at"]) for v in result.verifications]
    assert stamps == sorted(stamps)


def test_reverify_appends_and_never_reverts(tmp_path):
    results = [
        ClassificationResult("aa", ("paypal-login001.ga",), 0.9, 0.5, "phish", "rules", BASE_TIME),
        ClassificationResult("bb", ("apple-id.tk",), 0.8, 0.5, "phish", "rules", BASE_TIME),
        ClassificationResult("cc", ("shop.example.com",), 0.1, 0.5, "benign", "rules", BASE_TIME),
    ]
    results[0].add_verification("confirmed_phish", BASE_TIME)
    results[1].add_verification("no_evidence", BASE_TIME)
    path = write_results(results, tmp_path / "results.jsonl")
    now = datetime(2020, 6, 1, tzinfo=timezone.utc)

    updated = reverify(path, Verifier(_snapshot("https://apple-id.tk/")), now=now)

    assert [r.verdict for r in updated] == ["confirmed_phish", "confirmed_phish", None]
    assert [len(r.verifications) for r in updated] == [2, 2, 0]
    assert updated[1].verified_at == now
    assert [r.to_dict() for r in read_results(path)] == [r.to_dict() for r in updated]
