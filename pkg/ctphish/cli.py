"""
Command line entry point for the CT phishing pipeline.

Exit codes: 0 success, 1 operational error, 2 usage error.
"""
import argparse
import json
import logging
import sys
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .certs import read_records
from .classifiers import load_model, scorer_for, train_forest, validation_scores
from .config import PipelineConfig, setup_logging
from .ctlog import CTLogClient, CursorStore, LogSource
from .datasets import (
    FilterLists,
    LabeledDataset,
    assemble,
    build_benign,
    fetch_malicious_certs,
    filter_malicious,
)
from .domains import configure_public_suffix, load_ranked_domains
from .errors import ConfigError, DegenerateSet, PipelineError
from .evaluate import ScoredSet, report, threshold_at_fpr, write_roc_csv
from .features import CategoricalCodec, FeatureExtractor, export_features, feature_names, importance_frame, mdi_selection
from .fixture_server import FixtureServer, load_fixture_spec
from .intel import FeedFetcher, IntelSnapshot, IntelStore, Source, Verifier, parse_prefixes
from .pipeline import (
    Classifier,
    HookDispatcher,
    PipelineStats,
    ResultStore,
    classify_range,
    classify_stream,
    load_hooks,
    read_results,
    reverify,
    write_results,
)

logger = logging.getLogger(__name__)

MODE_ALIASES = {"domain": "per_domain", "per_domain": "per_domain", "cert": "cert"}


class UsageError(Exception):
    """Bad flag combination detected after parsing."""


def _echo(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, default=str))


def _timestamp(value: str) -> datetime:
    try:
        parsed = datetime.fromisoformat(value.replace("Z", "+00:00"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO timestamp: {value}") from None
    return parsed if parsed.tzinfo else parsed.replace(tzinfo=timezone.utc)


def _fraction(value: str) -> float:
    f = float(value)
    if not 0.0 < f < 1.0:
        raise argparse.ArgumentTypeError("must be in (0, 1)")
    return f


# --- shared helpers ---------------------------------------------------------

def _sources(config: PipelineConfig, args) -> List[LogSource]:
    sources = [config.log_source(name) for name in (args.log or [])]
    for spec in args.log_url or []:
        name, sep, url = spec.partition("=")
        if not sep:
            raise UsageError(f"--log-url expects NAME=URL, got {spec!r}")
        sources.append(LogSource(name, url))
    if not sources:
        sources = config.log_sources()
    if not sources:
        raise UsageError("no CT log given (use --log, --log-url or the logs section of the config)")
    return sources


def _client(config: PipelineConfig, source: LogSource) -> CTLogClient:
    http = config['http']
    return CTLogClient(source, timeout=http['timeout'], backoff_base=http['backoff_base'],
                       backoff_factor=http['backoff_factor'], backoff_cap=http['backoff_cap'],
                       max_attempts=http['max_attempts'])


def _popular_ranks(config: PipelineConfig) -> Dict[str, int]:
    path = config['filters']['popular_domains']
    return load_ranked_domains(path) if path else {}


def _snapshot(config: PipelineConfig) -> IntelSnapshot:
    path = config.store_path('intel')
    if not path.exists():
        logger.warning(f"No intel store at {path}; using an empty snapshot")
        return IntelSnapshot.build([])
    with IntelStore(path) as store:
        return store.snapshot()


def _verifier(config: PipelineConfig) -> Verifier:
    return Verifier(_snapshot(config), require_full_hash=bool(config['feeds']['require_full_hash']))


def _named_paths(values: Sequence[str]) -> List[Tuple[str, str]]:
    pairs = []
    for value in values:
        name, sep, path = value.partition("=")
        pairs.append((name, path) if sep else (Path(value).stem, value))
    return pairs


def _labels(path: Optional[str]) -> Optional[Dict[str, str]]:
    if not path:
        return None
    return {item.record.fingerprint_hex: item.label for item in LabeledDataset.load(path).records}


# --- subcommands ------------------------------------------------------------

def cmd_build_dataset(args, config: PipelineConfig) -> int:
    source = _sources(config, args)[0]
    client = _client(config, source)
    chunks = config['chunks']
    plan = client.plan_chunks(args.chunk_size or chunks['chunk_size'],
                              chunks['gap'] if args.gap is None else args.gap,
                              (args.start, args.end))
    filters = FilterLists.load(config['filters']['benign_services'], config['filters']['popular_domains'],
                               config['filters']['malicious_domains'])
    snapshot = _snapshot(config)
    benign = build_benign(client, plan, filters, snapshot, config['workers']['fetch'])

    if args.phish_records:
        phish_input = list(read_records(args.phish_records))
    else:
        if args.phish_urls:
            urls = [line.strip() for line in Path(args.phish_urls).read_text(encoding="utf-8").splitlines()
                    if line.strip() and not line.startswith("#")]
        else:
            urls = sorted(snapshot.hosts[h].url for h in snapshot.hosts)
        tls = config['tls']
        phish_input, failures = fetch_malicious_certs(urls, workers=config['workers']['tls'],
                                                      timeout=tls['timeout'], attempts=tls['attempts'],
                                                      port=tls['port'])
        logger.info(f"TLS fetch failures: {dict(failures)}")
    phish = filter_malicious(phish_input, filters)

    dataset = assemble(benign.kept, phish.kept, balance=not args.no_balance, seed=args.seed)
    out = Path(args.out) if args.out else config.store_path('datasets') / "dataset.jsonl"
    dataset.save(out)
    _echo({"benign": benign.get_summary(), "phish": phish.get_summary(),
           "dataset": dataset.get_summary(), "path": str(out)})
    return 0


def cmd_ingest_feeds(args, config: PipelineConfig) -> int:
    with IntelStore(config.store_path('intel')) as store:
        if args.file:
            if not args.source:
                raise UsageError("--file needs --source")
            raw = Path(args.file).read_bytes()
            if args.source == "prefixes":
                added = store.add_prefixes(parse_prefixes(raw, 4))
            elif args.source == "full_hashes":
                added = store.add_full_hashes(parse_prefixes(raw, 32))
            else:
                added = len(store.ingest(Source(args.source), raw))
            store.mark_fetched(args.source)
            _echo({"source": args.source, "added": added, "store": store.get_summary()})
            return 0

        urls = dict(config['feeds']['urls'])
        if args.source:
            if args.source not in urls:
                raise UsageError(f"no URL configured for feed {args.source!r}")
            urls = {args.source: urls[args.source]}
        fetcher = FeedFetcher(store, urls, config.feed_schedule(), timeout=config['feeds']['timeout'])
        if args.once:
            results = fetcher.run_due(force=True)
            _echo({"fetched": results, "store": store.get_summary()})
            return 1 if any(v < 0 for v in results.values()) else 0
        stop = threading.Event()
        try:
            fetcher.run(stop)
        except KeyboardInterrupt:
            stop.set()
    return 0


def cmd_train(args, config: PipelineConfig) -> int:
    model_cfg = config['model']
    dataset = LabeledDataset.load(args.dataset)
    validation = None
    if args.validation_split:
        dataset, validation = dataset.split(args.validation_split, args.seed)
    ranks = _popular_ranks(config)
    model = train_forest(
        dataset,
        feature_set=args.features or model_cfg['feature_set'],
        mode=MODE_ALIASES[args.mode] if args.mode else model_cfg['mode'],
        n_trees=args.trees or model_cfg['n_trees'],
        seed=model_cfg['seed'] if args.seed is None else args.seed,
        meta=args.meta or model_cfg['meta'],
        n_jobs=args.jobs,
        popular_ranks=ranks,
    )
    out = args.out or model_cfg['path'] or str(Path(config['store']['root']) / "model.json")
    model.save(out)
    summary = {"model": out, "classifier": model.classifier_id, "manifest": model.train_manifest}

    if validation is not None:
        thresholds = {}
        for name, pairs in validation_scores(model, validation, ranks).items():
            scored = ScoredSet.from_pairs(pairs)
            try:
                thresholds[name] = {f"{t:g}": threshold_at_fpr(scored, t)
                                    for t in config['thresholds']['fpr_targets']}
                if args.roc_dir:
                    write_roc_csv(scored, Path(args.roc_dir) / f"{name}.csv")
            except DegenerateSet as e:
                logger.warning(f"{name}: {e}")
        summary["validation"] = {"certificates": len(validation.records), "thresholds": thresholds}
    _echo(summary)
    return 0


def cmd_classify(args, config: PipelineConfig) -> int:
    if args.live == bool(args.start or args.end):
        raise UsageError("classify needs exactly one of --live or --from/--to")
    model = load_model(args.model)
    threshold = config['thresholds']['classify'] if args.threshold is None else args.threshold
    clients = [_client(config, s) for s in _sources(config, args)]
    stats = PipelineStats()
    hook_file = args.hooks or config['pipeline']['hooks']
    hooks = HookDispatcher(load_hooks(hook_file) if hook_file else [], config['workers']['hooks'], stats)
    verifier = _verifier(config) if args.verify else None
    out = Path(args.out) if args.out else config.store_path('results')
    scorer = scorer_for(model, popular_ranks=_popular_ranks(config))

    try:
        if args.live:
            chunks = config['chunks']
            cursors = None if args.no_cursor else CursorStore(config.store_path('cursors'))
            stop = threading.Event()
            with ResultStore(out) as store:
                classifier = Classifier(model, threshold, config['workers']['classify'], hooks, store,
                                        verifier, scorer, stats,
                                        dedup_window=config['pipeline']['dedup_window'])
                try:
                    for result in classify_stream(
                            clients, classifier, queue_size=config['pipeline']['queue_size'],
                            cursors=cursors, stop=stop, poll_interval=chunks['poll_interval'],
                            start_index=args.start_index, max_idle_polls=args.max_idle_polls,
                            batch_size=chunks['batch_size']):
                        if result.predicted == "phish":
                            logger.info(f"Positive {result.fingerprint[:16]} score={result.score:.4f} "
                                        f"{','.join(result.domains)}")
                except KeyboardInterrupt:
                    stop.set()
        else:
            classifier = Classifier(model, threshold, config['workers']['classify'], hooks, None,
                                    verifier, scorer, stats,
                                    dedup_window=config['pipeline']['dedup_window'])
            results = classify_range(clients, (args.start, args.end), classifier,
                                     chunk_size=config['chunks']['chunk_size'],
                                     fetch_workers=config['workers']['fetch'])
            write_results(results, out)
    finally:
        hooks.close(wait=True)
    _echo({"results": str(out), "classifier": model.classifier_id, "threshold": threshold,
           "stats": stats.get_summary()})
    return 0


def cmd_evaluate(args, config: PipelineConfig) -> int:
    targets = args.target or config['thresholds']['fpr_targets']
    if args.dataset:
        if not args.model:
            raise UsageError("--dataset needs --model")
        sets = {name: ScoredSet.from_pairs(pairs) for name, pairs in
                validation_scores(load_model(args.model), LabeledDataset.load(args.dataset),
                                  _popular_ranks(config)).items()}
    elif args.results:
        labels = _labels(args.labels)
        sets = {name: ScoredSet.from_results(read_results(path), labels) for name, path in _named_paths(args.results)}
    else:
        raise UsageError("evaluate needs --dataset/--model or --results")

    output = {}
    for name, scored in sets.items():
        output[name] = {f"{t:g}": threshold_at_fpr(scored, t) for t in targets}
        if args.roc_dir:
            write_roc_csv(scored, Path(args.roc_dir) / f"{name}.csv")
    _echo({"thresholds": output})
    return 0


def cmd_verify(args, config: PipelineConfig) -> int:
    results = reverify(args.results, _verifier(config), args.out)
    confirmed = sum(r.verdict == "confirmed_phish" for r in results)
    _echo({"results": args.out or args.results, "positives": sum(r.predicted == "phish" for r in results),
           "confirmed": confirmed})
    return 0


def cmd_report(args, config: PipelineConfig) -> int:
    labels = _labels(args.labels)
    sets = [(name, ScoredSet.from_results(read_results(path), labels)) for name, path in _named_paths(args.results)]
    verifier = None if args.no_verify else _verifier(config)
    out = report(sets, args.target or config['thresholds']['fpr_targets'], verifier)
    print(out.render_text())
    if args.out:
        out.save(args.out)
    return 0


def cmd_fixture_server(args, config: PipelineConfig) -> int:
    server = FixtureServer(load_fixture_spec(args.spec), host=args.host, port=args.port)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


def cmd_export_features(args, config: PipelineConfig) -> int:
    dataset = LabeledDataset.load(args.dataset)
    if args.model:
        model = load_model(args.model)
        codec, feature_set, mode = model.codec, model.feature_set, model.mode
    else:
        codec = CategoricalCodec().fit(item.record for item in dataset.records).freeze()
        feature_set, mode = args.features, MODE_ALIASES[args.mode]
    extractor = FeatureExtractor(codec, feature_set, popular_ranks=_popular_ranks(config))
    vectors, labels = [], []
    for item in dataset.records:
        for vector in extractor.vectors(item.record, mode):
            vectors.append(vector)
            labels.append(item.label)
    export_features(vectors, args.out, labels)
    _echo({"path": args.out, "rows": len(vectors), "columns": len(feature_names(feature_set))})
    return 0


def cmd_select_features(args, config: PipelineConfig) -> int:
    model = load_model(args.model)
    frame = importance_frame(model)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(args.out, index=False)
    names = feature_names(model.feature_set)
    selected = [names[j] for j in mdi_selection(model, args.k, args.threshold,
                                                exclude_keywords=not args.include_keywords)]
    if args.preset:
        Path(args.preset).write_text("\n".join(selected) + "\n", encoding="utf-8")
    _echo({"selected": selected})
    return 0


# --- parser -----------------------------------------------------------------

def _add_log_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--log', action='append', help='configured log name (repeatable)')
    parser.add_argument('--log-url', action='append', metavar='NAME=URL', help='ad hoc log (repeatable)')


def _add_span_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--from', dest='start', type=_timestamp, help='span start (inclusive, ISO 8601)')
    parser.add_argument('--to', dest='end', type=_timestamp, help='span end (exclusive, ISO 8601)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='ctphish', description='Detect phishing certificates in CT logs')
    parser.add_argument('--config', help='YAML configuration file')
    parser.add_argument('--log-level', help='override logging.level')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('build-dataset', help='build a labeled dataset from CT chunks and phishing URLs')
    _add_log_flags(p)
    _add_span_flags(p)
    p.add_argument('--chunk-size', type=int)
    p.add_argument('--gap', type=int)
    p.add_argument('--phish-urls', help='file of phishing URLs to fetch certificates from')
    p.add_argument('--phish-records', help='JSONL certificate records to use as phishing input')
    p.add_argument('--no-balance', action='store_true')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out')
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser('ingest-feeds', help='fetch or import phishing feeds into the intel store')
    p.add_argument('--source', choices=[s.value for s in Source] + ['prefixes', 'full_hashes'])
    p.add_argument('--file', help='import a downloaded feed instead of fetching')
    p.add_argument('--once', action='store_true', help='fetch every feed once and exit')
    p.set_defaults(func=cmd_ingest_feeds)

    p = sub.add_parser('train', help='train a random-forest model')
    p.add_argument('--dataset', required=True)
    p.add_argument('--features', choices=['all', 'selected'])
    p.add_argument('--mode', choices=sorted(MODE_ALIASES))
    p.add_argument('--meta', choices=['min', 'max', 'avg', 'med'])
    p.add_argument('--trees', type=int)
    p.add_argument('--seed', type=int)
    p.add_argument('--jobs', type=int, default=1)
    p.add_argument('--validation-split', type=_fraction)
    p.add_argument('--roc-dir', help='write validation ROC CSVs here')
    p.add_argument('--out')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('classify', help='classify certificates live or over a time span')
    _add_log_flags(p)
    _add_span_flags(p)
    p.add_argument('--model', required=True, help="model file, 'rules' or 'rules:<file>'")
    p.add_argument('--live', action='store_true')
    p.add_argument('--threshold', type=float)
    p.add_argument('--hooks', help='YAML hook file')
    p.add_argument('--verify', action='store_true', help='verify positives against the intel store')
    p.add_argument('--start-index', type=int, help='live start index when no cursor is stored')
    p.add_argument('--max-idle-polls', type=int, help='stop live mode after this many empty polls')
    p.add_argument('--no-cursor', action='store_true')
    p.add_argument('--out')
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser('evaluate', help='ROC and thresholds at target false-positive rates')
    p.add_argument('--model')
    p.add_argument('--dataset')
    p.add_argument('--results', action='append', metavar='[NAME=]PATH')
    p.add_argument('--labels', help='labeled dataset giving ground truth for results')
    p.add_argument('--target', type=_fraction, action='append')
    p.add_argument('--roc-dir')
    p.set_defaults(func=cmd_evaluate)

    for name in ('verify', 'reverify'):
        p = sub.add_parser(name, help='re-verify positive results against the current intel store')
        p.add_argument('--results', required=True)
        p.add_argument('--out')
        p.set_defaults(func=cmd_verify)

    p = sub.add_parser('report', help='true positives at fixed false-positive rates')
    p.add_argument('--results', action='append', required=True, metavar='[NAME=]PATH')
    p.add_argument('--labels')
    p.add_argument('--target', type=_fraction, action='append')
    p.add_argument('--no-verify', action='store_true')
    p.add_argument('--out')
    p.set_defaults(func=cmd_report)

    p = sub.add_parser('fixture-server', help='serve a local CT log from a fixture spec')
    p.add_argument('--spec', required=True)
    p.add_argument('--host', default='127.0.0.1')
    p.add_argument('--port', type=int, default=8062)
    p.set_defaults(func=cmd_fixture_server)

    p = sub.add_parser('export-features', help='write the feature matrix of a dataset as CSV')
    p.add_argument('--dataset', required=True)
    p.add_argument('--model', help='reuse the codec and feature set of a trained model')
    p.add_argument('--features', choices=['all', 'selected'], default='all')
    p.add_argument('--mode', choices=sorted(MODE_ALIASES), default='domain')
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser('select-features', help='rank features by mean decrease in impurity')
    p.add_argument('--model', required=True)
    p.add_argument('--k', type=int, default=50)
    p.add_argument('--threshold', type=float)
    p.add_argument('--include-keywords', action='store_true')
    p.add_argument('--out', help='CSV of all importances')
    p.add_argument('--preset', help='write the selected names, one per line')
    p.set_defaults(func=cmd_select_features)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        overrides = {'logging': {'level': args.log_level}} if args.log_level else None
        config = PipelineConfig.load(args.config, overrides=overrides)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    setup_logging(config)
    configure_public_suffix(config['filters']['public_suffix'])

    try:
        return args.func(args, config)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"ctphish: error: {e}", file=sys.stderr)
        return 2
    except (PipelineError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


def main():
    """Main function for command line usage."""
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
