"""Declarative run configuration: one TOML document, one table per component.

Unknown tables or keys are rejected, and every value is type-checked and
validated against its owning component before any work starts. See
``config.example.toml`` at the repository root for the full schema.
"""
import hashlib
import json
import sys
from dataclasses import MISSING, asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import ConfigError, CorpusConfig, CorruptionSpec, PRESETS, record_ctm_config
from .estimation import EstimateConfig, LossWeights
from .gan import GanConfig

import numpy as np


@dataclass
class AblationConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    max_records: int = 200
    plot_records: int = 2

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("ablation.seeds must not be empty")
        if any(not isinstance(s, int) or isinstance(s, bool) for s in self.seeds):
            raise ValueError("ablation.seeds must be integers")
        if self.max_records < 1:
            raise ValueError("ablation.max_records must be >= 1")


@dataclass
class OutputConfig:
    encoding: str = "decimal"
    figures: bool = False

    def __post_init__(self):
        if self.encoding not in ("decimal", "float64le"):
            raise ValueError("output.encoding must be 'decimal' or 'float64le'")


@dataclass
class EstimateSection:
    iterations: int = 500
    step_size: float = 0.05
    restarts: int = 3
    seed: int = 0
    clip_latent: bool = False


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    estimate: EstimateSection = field(default_factory=EstimateSection)
    weights: LossWeights = field(default_factory=LossWeights)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def estimate_config(self):
        e = self.estimate
        return EstimateConfig(iterations=e.iterations, step_size=e.step_size, restarts=e.restarts,
                              seed=e.seed, weights=self.weights, clip_latent=e.clip_latent)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self):
        self.corpus.validate()
        m = PRESETS[self.corpus.preset]["m"]
        # the per-record simulator settings carry the CFL check
        record_ctm_config(self.corpus, np.random.default_rng(0), 0).validate()
        if self.gan.n_steps != self.corpus.n:
            raise ConfigError(f"gan.n_steps ({self.gan.n_steps}) must equal corpus.n ({self.corpus.n})")
        if self.gan.feature_dim != 2 * m + 1:
            raise ConfigError(f"gan.feature_dim ({self.gan.feature_dim}) must be {2 * m + 1} "
                              f"for preset {self.corpus.preset!r}")
        self.corruption.validate((self.corpus.n, 2 * m + 1))
        return self


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _check_type(section, key, value, annotation):
    where = f"{section}.{key}"
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    elif annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif annotation is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
    return value


def build_section(name, values):
    factory = SECTIONS[name]
    cls = type(factory())
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        kwargs[key] = _check_type(name, key, value, known[key].type)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from exc


def config_from_dict(doc):
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name in SECTIONS:
        table = doc.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = build_section(name, table)
    cfg = RunConfig(**parts)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=None):
    """Read a TOML run config (or defaults) and apply ``{"section.key": value}`` overrides."""
    doc = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        doc.setdefault(section, {})[key] = value
    return config_from_dict(doc)


def default_toml():
    """The default configuration rendered as TOML text."""
    lines = []
    cfg = RunConfig()
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


__all__ = ["RunConfig", "AblationConfig", "OutputConfig", "load_config", "config_from_dict",
           "default_toml", "ConfigError", "MISSING"]
