"""Dataset schemas with categorical block structure, and one-hot enforcement."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

STD_FLOOR = 1e-8

CLEAN = "clean"
IGNORANT = "privatized-ignorant"
AWARE = "privatized-aware"


class SchemaError(ValueError):
    pass


class UnknownCategoryError(ValueError):
    def __init__(self, feature: str, value, vocabulary):
        self.feature, self.value = feature, value
        super().__init__(f"unknown category {value!r} for feature {feature!r}; "
                         f"expected one of {list(vocabulary)}")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "numeric" | "categorical"
    start: int
    stop: int
    vocabulary: tuple = ()

    @property
    def width(self) -> int:
        return self.stop - self.start

    @property
    def categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True)
class LabelSpec:
    name: str
    classes: tuple
    aliases: dict = field(default_factory=dict, hash=False, compare=False)
    threshold: float | None = None  # numeric source column binarised as <= t / > t

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index(self, raw) -> int:
        if self.threshold is not None:
            return 0 if float(raw) <= self.threshold else 1
        value = self.aliases.get(raw, raw)
        try:
            return self.classes.index(value)
        except ValueError:
            raise UnknownCategoryError(self.name, raw, self.classes) from None


@dataclass(frozen=True)
class DatasetSchema:
    released: tuple
    private: LabelSpec
    utility: LabelSpec
    name: str = "dataset"

    def __post_init__(self):
        pos = 0
        names = set()
        for f in self.released:
            if f.start != pos:
                raise SchemaError(f"feature {f.name!r} starts at {f.start}, expected {pos}")
            if f.kind == "numeric" and f.width != 1:
                raise SchemaError(f"numeric feature {f.name!r} must have width 1")
            if f.kind == "categorical" and (f.width < 2 or len(f.vocabulary) != f.width):
                raise SchemaError(f"categorical feature {f.name!r} needs a vocabulary of width >= 2")
            if f.kind not in ("numeric", "categorical"):
                raise SchemaError(f"unknown feature kind {f.kind!r}")
            names.add(f.name)
            pos = f.stop
        for label in (self.private, self.utility):
            if label.name in names:
                raise SchemaError(f"label {label.name!r} must not be a released feature")

    @classmethod
    def build(cls, features: list[dict], private: dict, utility: dict, name: str = "dataset"):
        """Lay out features left to right from ``{"name", "kind", "vocabulary"}`` dicts."""
        specs, pos = [], 0
        for f in features:
            vocab = tuple(f.get("vocabulary", ()))
            width = len(vocab) if f["kind"] == "categorical" else 1
            specs.append(FeatureSpec(f["name"], f["kind"], pos, pos + width, vocab))
            pos += width
        return cls(tuple(specs), _label(private), _label(utility), name)

    @property
    def width(self) -> int:
        return self.released[-1].stop if self.released else 0

    @property
    def categorical_blocks(self) -> list[tuple[int, int]]:
        return [(f.start, f.stop) for f in self.released if f.categorical]

    @property
    def numeric_columns(self) -> list[int]:
        return [f.start for f in self.released if not f.categorical]

    def to_dict(self) -> dict:
        def label(l: LabelSpec):
            d = {"name": l.name, "classes": list(l.classes)}
            if l.aliases:
                d["aliases"] = dict(l.aliases)
            if l.threshold is not None:
                d["threshold"] = l.threshold
            return d

        return {
            "name": self.name,
            "features": [{"name": f.name, "kind": f.kind, **({"vocabulary": list(f.vocabulary)} if f.categorical else {})}
                         for f in self.released],
            "private": label(self.private),
            "utility": label(self.utility),
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- flat vector <-> record ------------------------------------------
    def encode_record(self, record: dict) -> np.ndarray:
        out = np.zeros(self.width)
        for f in self.released:
            if f.categorical:
                try:
                    idx = f.vocabulary.index(record[f.name])
                except ValueError:
                    raise UnknownCategoryError(f.name, record[f.name], f.vocabulary) from None
                out[f.start:f.stop] = one_hot_encode(idx, f.width)
            else:
                out[f.start] = float(record[f.name])
        return out

    def decode_vector(self, vec: np.ndarray) -> dict:
        """Inverse of :meth:`encode_record`; categorical blocks decode by argmax."""
        vec = np.asarray(vec)
        if vec.shape != (self.width,):
            raise SchemaError(f"vector width {vec.shape} does not match schema width {self.width}")
        return {f.name: (f.vocabulary[one_hot_decode(vec[f.start:f.stop])] if f.categorical else float(vec[f.start]))
                for f in self.released}


def _label(d: dict) -> LabelSpec:
    return LabelSpec(d["name"], tuple(d["classes"]), dict(d.get("aliases", {})), d.get("threshold"))


def load_schema(path) -> tuple[DatasetSchema, dict]:
    """Read a JSON schema file; returns the schema and the raw dict (CSV layout keys)."""
    raw = json.loads(Path(path).read_text())
    return DatasetSchema.build(raw["features"], raw["private"], raw["utility"], raw.get("name", "dataset")), raw


def save_schema(schema: DatasetSchema, path, **extra):
    Path(path).write_text(json.dumps({**schema.to_dict(), **extra}, indent=2) + "\n")


@dataclass
class RecordBatch:
    x: np.ndarray
    xp: np.ndarray
    xu: np.ndarray
    state: str = CLEAN

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.xp = np.asarray(self.xp, dtype=np.int64)
        self.xu = np.asarray(self.xu, dtype=np.int64)
        if not (len(self.x) == len(self.xp) == len(self.xu)):
            raise SchemaError("x, xp and xu must have the same number of rows")

    def __len__(self):
        return len(self.x)

    def take(self, idx) -> "RecordBatch":
        return RecordBatch(self.x[idx], self.xp[idx], self.xu[idx], self.state)

    def with_x(self, x: np.ndarray, state: str) -> "RecordBatch":
        return replace(self, x=x, state=state)

    def digest(self) -> str:
        h = hashlib.sha256()
        for a, dt in ((self.x, "<f8"), (self.xp, "<i8"), (self.xu, "<i8")):
            h.update(np.ascontiguousarray(a, dtype=dt).tobytes())
        return h.hexdigest()


def check_batch(batch: RecordBatch, schema: DatasetSchema):
    """Raise unless ``batch`` fits the schema (width, label ranges, clean one-hot blocks)."""
    if batch.x.ndim != 2 or batch.x.shape[1] != schema.width:
        raise SchemaError(f"batch width {batch.x.shape} does not match schema width {schema.width}")
    for name, labels, spec in (("xp", batch.xp, schema.private), ("xu", batch.xu, schema.utility)):
        if len(labels) and (labels.min() < 0 or labels.max() >= spec.n_classes):
            raise SchemaError(f"{name} labels outside [0, {spec.n_classes})")
    if batch.state in (CLEAN, AWARE):
        for i, j in schema.categorical_blocks:
            block = batch.x[:, i:j]
            if not (np.isin(block, (0.0, 1.0)).all() and (block.sum(axis=1) == 1).all()):
                raise SchemaError(f"block [{i}, {j}) is not one-hot")


def one_hot_encode(index: int, k: int) -> np.ndarray:
    if not 0 <= index < k:
        raise UnknownCategoryError("<index>", index, range(k))
    out = np.zeros(k)
    out[index] = 1.0
    return out


def one_hot_decode(block: np.ndarray) -> int:
    return int(np.argmax(block))


def enforce_blocks(x: np.ndarray, blocks) -> np.ndarray:
    """Argmax -> 1, everything else in the block -> 0.  Ties go to the lowest index."""
    out = np.array(x, dtype=np.float64, copy=True)
    rows = np.arange(len(out))
    for i, j in blocks:
        winner = np.argmax(out[:, i:j], axis=1)
        out[:, i:j] = 0.0
        out[rows, i + winner] = 1.0
    return out


def enforce_constraints(batch: RecordBatch, schema: DatasetSchema) -> RecordBatch:
    if batch.x.ndim != 2 or batch.x.shape[1] != schema.width:
        raise SchemaError(f"batch width {batch.x.shape} does not match schema width {schema.width}")
    if batch.state == CLEAN:
        raise SchemaError("enforce_constraints expects a privatized batch")
    return batch.with_x(enforce_blocks(batch.x, schema.categorical_blocks), AWARE)


@dataclass(frozen=True)
class NormStats:
    columns: tuple
    mean: np.ndarray
    std: np.ndarray

    def digest(self) -> str:
        h = hashlib.sha256(repr(self.columns).encode())
        h.update(np.ascontiguousarray(self.mean, "<f8").tobytes())
        h.update(np.ascontiguousarray(self.std, "<f8").tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "std_kind": "population"}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(tuple(d["columns"]), np.array(d["mean"], float), np.array(d["std"], float))


def normalize_fit(x: np.ndarray, columns) -> NormStats:
    """Population mean/std per column, std floored at 1e-8.  Fit on the training split only."""
    columns = tuple(int(c) for c in columns)
    sub = np.asarray(x, dtype=np.float64)[:, list(columns)]
    mean = sub.mean(axis=0) if len(sub) else np.zeros(len(columns))
    std = sub.std(axis=0) if len(sub) else np.ones(len(columns))
    flat = std < STD_FLOOR
    if flat.any():
        warnings.warn(f"constant column(s) {[columns[i] for i in np.flatnonzero(flat)]}: std floored at {STD_FLOOR}",
                      RuntimeWarning, stacklevel=2)
        std = np.maximum(std, STD_FLOOR)
    return NormStats(columns, mean, std)


def normalize_apply(x: np.ndarray, stats: NormStats) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    cols = list(stats.columns)
    out[:, cols] = (out[:, cols] - stats.mean) / stats.std
    return out


def normalize_invert(x: np.ndarray, stats: NormStats) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    cols = list(stats.columns)
    out[:, cols] = out[:, cols] * stats.std + stats.mean
    return out
