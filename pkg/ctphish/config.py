"""
Configuration for the CT phishing pipeline.

Layering: defaults below < YAML config file < CTPHISH_SECTION__KEY environment
variables (a .env file is honored) < command-line flags.
"""
import copy
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml
from dotenv import load_dotenv

from .ctlog import LogSource
from .errors import ConfigError
from .intel import FeedSchedule

# Package directory
PACKAGE_DIR = Path(__file__).resolve().parent

# Versioned data files shipped with the package
PACKAGE_DATA_DIR = PACKAGE_DIR / "data"

ENV_PREFIX = "CTPHISH_"

# CT logs to read; each entry is {name, base_url, scope_year}
LOGS_CONFIG = {
    'sources': [],
}

# OSINT feeds and their fetch intervals
FEEDS_CONFIG = {
    'urls': {
        'phishtank': 'https://data.phishtank.com/data/online-valid.csv',
        'phishstats': 'https://phishstats.info/phish_score.csv',
        'openphish': 'https://openphish.com/feed.txt',
    },
    'interval_minutes': {
        'phishtank': 60,
        'phishstats': 60,
        'prefixes': 60,
        'openphish': 720,
    },
    'require_full_hash': False,
    'timeout': 30.0,
}

# Filter lists for dataset building
FILTERS_CONFIG = {
    'benign_services': str(PACKAGE_DATA_DIR / 'benign_services.txt'),
    'popular_domains': str(PACKAGE_DATA_DIR / 'popular_domains.txt'),
    'malicious_domains': None,
    'public_suffix': None,
}

WORKERS_CONFIG = {
    'fetch': 4,
    'classify': 4,
    'tls': 8,
    'hooks': 2,
}

CHUNKS_CONFIG = {
    'chunk_size': 1000,
    'gap': 0,
    'poll_interval': 10.0,
    'batch_size': 256,
}

MODEL_CONFIG = {
    'path': None,
    'n_trees': 200,
    'seed': 0,
    'feature_set': 'all',
    'mode': 'per_domain',
    'meta': 'max',
    'rules': str(PACKAGE_DATA_DIR / 'default_rules.yaml'),
}

THRESHOLDS_CONFIG = {
    'classify': 0.5,
    'fpr_targets': [1e-3, 1e-4],
}

# Store layout, relative paths resolve against 'root'
STORE_CONFIG = {
    'root': 'ctphish-data',
    'intel': 'intel.sqlite',
    'results': 'results.jsonl',
    'cursors': 'cursors.json',
    'datasets': 'datasets',
}

HTTP_CONFIG = {
    'timeout': 10.0,
    'backoff_base': 1.0,
    'backoff_factor': 2.0,
    'backoff_cap': 60.0,
    'max_attempts': 8,
}

TLS_CONFIG = {
    'timeout': 10.0,
    'attempts': 2,
    'port': 443,
}

PIPELINE_CONFIG = {
    'queue_size': 1024,
    'dedup_window': 1_000_000,
    'hooks': None,
}

LOGGING_CONFIG = {
    'level': 'INFO',
    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    'file': None,
}

DEFAULTS = {
    'logs': LOGS_CONFIG,
    'feeds': FEEDS_CONFIG,
    'filters': FILTERS_CONFIG,
    'workers': WORKERS_CONFIG,
    'chunks': CHUNKS_CONFIG,
    'model': MODEL_CONFIG,
    'thresholds': THRESHOLDS_CONFIG,
    'store': STORE_CONFIG,
    'http': HTTP_CONFIG,
    'tls': TLS_CONFIG,
    'pipeline': PIPELINE_CONFIG,
    'logging': LOGGING_CONFIG,
}

# keys whose values are open mappings
_OPEN_KEYS = {('feeds', 'urls'), ('feeds', 'interval_minutes')}


def _merge(base: Dict, layer: Mapping, origin: str) -> None:
    for section, values in layer.items():
        if section not in base:
            raise ConfigError(f"{origin}: unknown section {section!r}")
        if not isinstance(values, Mapping):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in base[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            if (section, key) in _OPEN_KEYS and isinstance(value, Mapping):
                base[section][key] = {**base[section][key], **value}
            else:
                base[section][key] = value


def _env_layer(environ: Mapping[str, str]) -> Dict[str, Dict[str, Any]]:
    layer: Dict[str, Dict[str, Any]] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        section, key = name[len(ENV_PREFIX):].lower().split("__", 1)
        layer.setdefault(section, {})[key] = yaml.safe_load(raw) if raw != "" else None
    return layer


@dataclass
class PipelineConfig:
    sections: Dict[str, Dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.sections[section]

    @classmethod
    def from_mapping(cls, data: Mapping, origin: str = "mapping") -> "PipelineConfig":
        sections = copy.deepcopy(DEFAULTS)
        _merge(sections, data, origin)
        config = cls(sections)
        config.validate()
        return config

    @classmethod
    def load(cls, path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
             overrides: Optional[Mapping] = None) -> "PipelineConfig":
        """Build a validated configuration from every layer."""
        sections = copy.deepcopy(DEFAULTS)
        if path:
            try:
                with open(path, "r", encoding="utf-8") as f:
                    data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"{path}: {e}") from e
            if not isinstance(data, Mapping):
                raise ConfigError(f"{path}: top level must be a mapping")
            _merge(sections, data, str(path))
        if environ is None:
            load_dotenv(override=False)
            environ = os.environ
        _merge(sections, _env_layer(environ), "environment")
        if overrides:
            _merge(sections, overrides, "command line")
        config = cls(sections)
        config.validate()
        return config

    def dump(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.sections)

    def validate(self) -> None:
        try:
            sources = self.log_sources()
            names = [s.name for s in sources]
            if len(names) != len(set(names)):
                raise ConfigError("log source names must be unique")
            self.feed_schedule()
        except (TypeError, KeyError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

        chunks = self['chunks']
        if int(chunks['chunk_size']) < 1 or int(chunks['gap']) < 0:
            raise ConfigError("chunks.chunk_size must be >= 1 and chunks.gap >= 0")
        for key, value in self['workers'].items():
            if int(value) < 1:
                raise ConfigError(f"workers.{key} must be >= 1")
        if not 0.0 <= float(self['thresholds']['classify']) <= 1.0:
            raise ConfigError("thresholds.classify must be in [0, 1]")
        for target in self['thresholds']['fpr_targets']:
            if not 0.0 < float(target) < 1.0:
                raise ConfigError("thresholds.fpr_targets must be in (0, 1)")
        model = self['model']
        if model['feature_set'] not in ('all', 'selected'):
            raise ConfigError("model.feature_set must be 'all' or 'selected'")
        if model['mode'] not in ('per_domain', 'cert'):
            raise ConfigError("model.mode must be 'per_domain' or 'cert'")
        if model['meta'] not in ('min', 'max', 'avg', 'med'):
            raise ConfigError("model.meta must be one of min, max, avg, med")
        if int(model['n_trees']) < 1:
            raise ConfigError("model.n_trees must be >= 1")
        pipeline = self['pipeline']
        if int(pipeline['queue_size']) < 1 or int(pipeline['dedup_window']) < 1:
            raise ConfigError("pipeline.queue_size and pipeline.dedup_window must be >= 1")

    def log_sources(self) -> List[LogSource]:
        return [LogSource(name=s['name'], base_url=s['base_url'], scope_year=s.get('scope_year'))
                for s in self['logs']['sources']]

    def log_source(self, name: str) -> LogSource:
        for source in self.log_sources():
            if source.name == name:
                return source
        raise ConfigError(f"no log named {name!r} configured")

    def feed_schedule(self) -> FeedSchedule:
        return FeedSchedule.from_minutes(self['feeds']['interval_minutes'])

    def store_path(self, key: str) -> Path:
        """Resolve a store path, creating its parent directory."""
        root = Path(self['store']['root'])
        path = Path(self['store'][key])
        path = path if path.is_absolute() else root / path
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


def setup_logging(config: PipelineConfig) -> None:
    settings = config['logging']
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if settings.get('file'):
        log_file = Path(settings['file'])
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, str(settings['level']).upper(), logging.INFO),
        format=settings['format'],
        handlers=handlers,
        force=True,
    )
