"""Sectioned ``key = value`` experiment configs and the dataset they point at.

Every field has a default, so a config file only lists what it changes; the
fully resolved config (defaults included) is what goes into run manifests.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import ingest
from .adversaries import EvalConfig
from .experiment import GeneratorConfig, RunConfig
from .tradeoff import DEFAULT_LAMBDA_GRID
from .trainer import TradeoffConfig


class ConfigError(ValueError):
    pass


DATASET_KINDS = ("csv", "adult", "us_census", "mnist", "fashion")
IDX_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass
class DatasetConfig:
    kind: str = "csv"
    path: str = ""  # CSV file, or the directory holding the four IDX files for images
    test_path: str = ""  # separate test CSV; empty means split ``path``
    schema: str = ""  # JSON schema file; empty uses the built-in one for adult / us_census
    train_fraction: float = 0.8
    split_seed: int = 0
    limit_train: int = 0  # 0 keeps every image
    limit_test: int = 0


@dataclass
class SweepConfig:
    lambdas: tuple = DEFAULT_LAMBDA_GRID
    seeds: int = 25
    workers: int = 0  # 0: one per available core


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    seed: int = 0  # the single seed used by train / evaluate / exports


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    training: TradeoffConfig = field(default_factory=TradeoffConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    adversary: dict = field(default_factory=lambda: {"hidden": (64,), "conditions": ("ignorant", "aware")})
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @property
    def run(self) -> RunConfig:
        return RunConfig(self.generator, self.training, self.evaluation,
                         tuple(self.adversary["hidden"]), tuple(self.adversary["conditions"]))

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, exclude=("output",)) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()


# -- parsing --------------------------------------------------------------------

def _scalar(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _convert(section: str, key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple) or default is None:
            if default is None and text.lower() in ("none", "mirror"):
                return None
            items = tuple(_scalar(t.strip()) for t in text.split(",") if t.strip())
            if default and all(isinstance(v, float) for v in default):
                items = tuple(float(v) for v in items)
            return items
        return text
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from None


def _apply(cfg: ExperimentConfig, section: str, key: str, text: str):
    if not hasattr(cfg, section):
        raise ConfigError(f"unknown section [{section}]")
    target = getattr(cfg, section)
    if isinstance(target, dict):
        if key not in target:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        target[key] = _convert(section, key, text, target[key])
        return
    names = {f.name for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    setattr(target, key, _convert(section, key, text, getattr(target, key)))


def _validate(cfg: ExperimentConfig):
    if cfg.dataset.kind not in DATASET_KINDS:
        raise ConfigError(f"[dataset] kind must be one of {DATASET_KINDS}, got {cfg.dataset.kind!r}")
    for cond in cfg.adversary["conditions"]:
        if cond not in ("ignorant", "aware"):
            raise ConfigError(f"[adversary] unknown condition {cond!r}")
    try:  # re-run the dataclass checks on the final values
        TradeoffConfig(**asdict(cfg.training))
    except ValueError as err:
        raise ConfigError(f"[training] {err}") from None
    if cfg.generator.variant not in ("uae", "ae", "vae", "betavae"):
        raise ConfigError(f"[generator] unknown variant {cfg.generator.variant!r}")


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read ``path`` (optional) then apply ``section.key=value`` overrides.

    Relative dataset paths are resolved against the config file's directory.
    """
    cfg = ExperimentConfig()
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            with open(path) as f:
                parser.read_file(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                _apply(cfg, section, key, text)
        base = path.resolve().parent
    for item in overrides:
        lhs, sep, text = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        _apply(cfg, section, key, text)
    d = cfg.dataset
    for name in ("path", "test_path", "schema"):
        value = getattr(d, name)
        if value and not Path(value).is_absolute():
            setattr(d, name, str((base / value).resolve()))
    _validate(cfg)
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every field (defaults included) in the same format :func:`load_config` reads."""
    lines = []
    for section, value in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, v in value.items():
            if v is None:
                text = "none"
            elif isinstance(v, (list, tuple)):
                text = ", ".join(str(e) for e in v)
            else:
                text = str(v).lower() if isinstance(v, bool) else str(v)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


# -- dataset --------------------------------------------------------------------

def _need(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ingest.IngestError("missing_path", f"{what} not found", p)
    return p


def load_dataset(d: DatasetConfig) -> ingest.Dataset:
    if not d.path:
        raise ConfigError("[dataset] path is required")
    if d.kind in ("mnist", "fashion"):
        root = _need(d.path, "image directory")
        files = []
        for name in IDX_FILES:
            hits = [root / name, root / (name + ".gz")]
            files.append(next((h for h in hits if h.exists()), None) or _need(hits[0], "IDX file"))
        return ingest.load_idx_images(*files, task=d.kind, limit_train=d.limit_train or None,
                                      limit_test=d.limit_test or None)
    path = _need(d.path, "dataset")
    schema = _need(d.schema, "schema file") if d.schema else None
    if d.kind == "adult":
        return ingest.load_adult(path, _need(d.test_path, "test set"), schema)
    if d.kind == "us_census":
        return ingest.load_us_census(path, schema, d.split_seed)
    if schema is None:
        raise ingest.IngestError("missing_path", "csv datasets need a schema file", path)
    test = str(_need(d.test_path, "test set")) if d.test_path else None
    split = ingest.SplitSpec(train_fraction=None if test else d.train_fraction, test_path=test, seed=d.split_seed)
    return ingest.load_tabular_csv(path, schema, split)
