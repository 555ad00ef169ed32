"""Loaders for the tabular (CSV) and image (IDX) experiment datasets."""
from __future__ import annotations

import csv
import gzip
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import datatype as dt
from .datatype import DatasetSchema, NormStats, RecordBatch


class IngestError(ValueError):
    """Structured data error: ``kind`` is a short machine-readable tag."""

    def __init__(self, kind: str, message: str, path=None, **detail):
        self.kind, self.path, self.detail = kind, None if path is None else str(path), detail
        super().__init__(f"{message}" + (f" ({path})" if path else ""))


class IdxFormatError(IngestError):
    def __init__(self, message: str, path, offset: int):
        super().__init__("idx", f"{message} at byte offset {offset}", path, offset=offset)
        self.offset = offset


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float | None = None
    test_path: str | None = None
    seed: int = 0
    drop_missing: bool = True

    def __post_init__(self):
        if self.test_path is None and not (self.train_fraction and 0 < self.train_fraction < 1):
            raise ValueError("SplitSpec needs either test_path or a train_fraction in (0, 1)")


@dataclass
class Dataset:
    schema: DatasetSchema
    train: RecordBatch
    test: RecordBatch
    stats: NormStats | None = None
    meta: dict = field(default_factory=dict)

    @property
    def data_digest(self) -> str:
        h = hashlib.sha256(self.schema.digest.encode())
        h.update(self.train.digest().encode())
        h.update(self.test.digest().encode())
        return h.hexdigest()


def builtin_schema(name: str) -> Path:
    return Path(str(resources.files("pupet") / "schemas" / f"{name}.json"))


def _shuffle_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(n * fraction))
    return np.sort(order[:cut]), np.sort(order[cut:])


# -- CSV ------------------------------------------------------------------------

_LAYOUT_KEYS = ("columns", "header", "missing", "comment_prefix")


def csv_rows(path, layout: dict, on_error=None):
    """Yield ``(line number, {column: text})``; with ``on_error(line, message)`` bad rows are reported and skipped."""
    path = Path(path)
    if not path.exists():
        raise IngestError("missing_file", f"data file not found: {path}", path)
    prefix = layout.get("comment_prefix")
    with open(path, newline="") as f:
        reader = csv.reader(f, skipinitialspace=True)
        columns = layout.get("columns")
        if layout.get("header", False):
            header = [h.strip() for h in next(reader, [])]
            columns = columns or header
        for lineno, row in enumerate(reader, start=2 if layout.get("header") else 1):
            if not row or all(not c.strip() for c in row):
                continue
            if prefix and row[0].startswith(prefix):
                continue
            if len(row) != len(columns):
                if on_error is not None:
                    on_error(lineno, f"{len(row)} fields, expected {len(columns)}")
                    continue
                raise IngestError("malformed_row", f"line {lineno} has {len(row)} fields, expected {len(columns)}",
                                  path, line=lineno)
            yield lineno, dict(zip(columns, (c.strip() for c in row)))


def _encode_rows(rows, schema: DatasetSchema, missing: set, path, drop_missing: bool):
    needed = [f.name for f in schema.released] + [schema.private.name, schema.utility.name]
    xs, xps, xus, dropped = [], [], [], 0
    for lineno, rec in rows:
        if any(rec[c] in missing or rec[c] == "" for c in needed):
            if drop_missing:
                dropped += 1
                continue
            raise IngestError("missing_value", f"line {lineno} has a missing value", path, line=lineno)
        try:
            xs.append(schema.encode_record({k: (rec[k] if _is_cat(schema, k) else float(rec[k]))
                                            for k in needed[:-2]}))
            xps.append(schema.private.index(rec[schema.private.name]))
            xus.append(schema.utility.index(rec[schema.utility.name]))
        except dt.UnknownCategoryError as err:
            raise IngestError("unknown_category", f"line {lineno}: {err}", path,
                              line=lineno, feature=err.feature, value=err.value) from None
        except ValueError as err:
            raise IngestError("malformed_row", f"line {lineno}: {err}", path, line=lineno) from None
    width = schema.width
    return (np.array(xs).reshape(-1, width), np.array(xps, dtype=np.int64),
            np.array(xus, dtype=np.int64), dropped)


def _is_cat(schema: DatasetSchema, name: str) -> bool:
    return any(f.name == name and f.categorical for f in schema.released)


def load_tabular_csv(path, schema_file, split: SplitSpec, normalize: bool = True) -> Dataset:
    """Load a CSV described by a JSON schema file into normalised train/test batches.

    Rows with a missing marker in any used column are dropped, categoricals are
    one-hot encoded per the schema vocabulary order, and numeric columns are
    standardised with statistics fitted on the training rows only.
    """
    schema, layout = dt.load_schema(schema_file)
    missing = set(layout.get("missing", ["?"]))
    x, xp, xu, dropped = _encode_rows(csv_rows(path, layout), schema, missing, path, split.drop_missing)
    meta = {"source": str(path), "dropped_train": dropped,
            "layout": {k: layout[k] for k in _LAYOUT_KEYS if k in layout}}
    if split.test_path is not None:
        tx, txp, txu, tdropped = _encode_rows(csv_rows(split.test_path, layout), schema, missing,
                                              split.test_path, split.drop_missing)
        train, test = RecordBatch(x, xp, xu), RecordBatch(tx, txp, txu)
        meta.update(test_source=str(split.test_path), dropped_test=tdropped)
    else:
        tr, te = _shuffle_split(len(x), split.train_fraction, split.seed)
        train, test = RecordBatch(x[tr], xp[tr], xu[tr]), RecordBatch(x[te], xp[te], xu[te])
    return _finish(schema, train, test, normalize, meta, path)


def _finish(schema, train, test, normalize, meta, path) -> Dataset:
    if len(train) == 0 or len(test) == 0:
        raise IngestError("empty_split", f"empty split: {len(train)} train / {len(test)} test rows", path)
    stats = None
    if normalize and schema.numeric_columns:
        stats = dt.normalize_fit(train.x, schema.numeric_columns)
        train = train.with_x(dt.normalize_apply(train.x, stats), dt.CLEAN)
        test = test.with_x(dt.normalize_apply(test.x, stats), dt.CLEAN)
        meta["norm_stats_digest"] = stats.digest()
    meta.update(n_train=len(train), n_test=len(test))
    return Dataset(schema, train, test, stats, meta)


def load_adult(train_path, test_path, schema_file=None) -> Dataset:
    """UCI Adult with private = sex, utility = income, using the published train/test files."""
    return load_tabular_csv(train_path, schema_file or builtin_schema("adult"), SplitSpec(test_path=str(test_path)))


# -- US Census (ACS 2017) ---------------------------------------------------------

def _pearson_abs(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a - a.mean(), b - b.mean()
    denom = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return abs(float((a * b).sum()) / denom) if denom > 0 else 0.0


def load_us_census(path, config_file=None, seed: int = 0) -> Dataset:
    """ACS 2017 demographic CSV: 14 released numeric features, Income/Employed binarised labels.

    The released set is the configured core features plus the remaining numeric
    columns ranked by max(|corr(col, Income)|, |corr(col, Employed)|) on the
    training rows.
    """
    cfg = json.loads(Path(config_file or builtin_schema("us_census")).read_text())
    path = Path(path)
    if not path.exists():
        raise IngestError("missing_file", f"data file not found: {path}", path)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = [h.strip() for h in (reader.fieldnames or [])]
        rows = [{k.strip(): (v or "").strip() for k, v in r.items()} for r in reader]
    priv, util = cfg["private"], cfg["utility"]
    required = list(cfg["core_features"]) + [priv["name"], util["name"]]
    absent = [c for c in required if c not in header]
    if absent:
        raise IngestError("missing_columns", f"census file lacks expected columns {absent}", path, columns=absent)
    numeric = [c for c in header if c not in cfg["id_columns"]]

    kept, dropped = [], 0
    for r in rows:
        try:
            kept.append([float(r[c]) for c in numeric])
        except ValueError:
            dropped += 1
    table = np.array(kept).reshape(-1, len(numeric))
    tr, te = _shuffle_split(len(table), cfg.get("train_fraction", 0.6), seed)

    col = {c: i for i, c in enumerate(numeric)}
    core = list(cfg["core_features"])
    labels = [priv["name"], util["name"]]
    skip = set(core) | set(labels) | set(cfg.get("exclude_from_ranking", []))
    candidates = [c for c in numeric if c not in skip]
    train_tab = table[tr]
    score = {c: max(_pearson_abs(train_tab[:, col[c]], train_tab[:, col[l]]) for l in labels) for c in candidates}
    ranked = sorted(candidates, key=lambda c: (-score[c], c))
    released = core + ranked[: cfg["n_selected"] - len(core) - len(labels)]

    schema = DatasetSchema.build([{"name": c, "kind": "numeric"} for c in released], priv, util, cfg["name"])
    x = table[:, [col[c] for c in released]]
    xp = np.array([schema.private.index(v) for v in table[:, col[priv["name"]]]], dtype=np.int64)
    xu = np.array([schema.utility.index(v) for v in table[:, col[util["name"]]]], dtype=np.int64)
    meta = {"source": str(path), "dropped_missing": dropped, "released_features": released,
            "layout": {"header": True, "missing": [""]},
            "correlation_scores": {c: score[c] for c in ranked}}
    return _finish(schema, RecordBatch(x[tr], xp[tr], xu[tr]), RecordBatch(x[te], xp[te], xu[te]), True, meta, path)


# -- IDX images ------------------------------------------------------------------

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}

FASHION_CLASSES = ("T-shirt/top", "Trouser", "Pullover", "Dress", "Coat",
                   "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot")
FASHION_UPPER = {0, 2, 3, 4, 6}


def _open_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise IngestError("missing_file", f"data file not found: {path}", path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Parse a big-endian IDX file (optionally gzipped)."""
    blob = _open_bytes(path)
    if len(blob) < 4:
        raise IdxFormatError("truncated header", path, len(blob))
    (magic,) = struct.unpack_from(">I", blob, 0)
    if expect_magic is not None and magic != expect_magic:
        raise IdxFormatError(f"magic 0x{magic:08x} != expected 0x{expect_magic:08x}", path, 0)
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_TYPES:
        raise IdxFormatError(f"bad magic 0x{magic:08x}", path, 0)
    dtype = np.dtype(_IDX_TYPES[(magic >> 8) & 0xFF])
    ndim = magic & 0xFF
    if len(blob) < 4 + 4 * ndim:
        raise IdxFormatError("truncated dimension header", path, len(blob))
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    off = 4 + 4 * ndim
    need = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - off < need:
        raise IdxFormatError(f"truncated payload: need {need} bytes, have {len(blob) - off}", path, len(blob))
    return np.frombuffer(blob, dtype, int(np.prod(dims)), off).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    code = {np.dtype("u1"): 0x08, np.dtype("i1"): 0x09, np.dtype("i2"): 0x0B,
            np.dtype("i4"): 0x0C, np.dtype("f4"): 0x0D, np.dtype("f8"): 0x0E}[array.dtype.newbyteorder("=")]
    with open(path, "wb") as f:
        f.write(struct.pack(">I", (code << 8) | array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.astype(array.dtype.newbyteorder(">")).tobytes())


def task_labels(digits: np.ndarray, task: str) -> tuple[np.ndarray, np.ndarray]:
    digits = np.asarray(digits, dtype=np.int64)
    if task == "mnist":
        return digits % 2, (digits >= 5).astype(np.int64)
    if task == "fashion":
        return digits, np.where(np.isin(digits, list(FASHION_UPPER)), 0, 1)
    raise ValueError(f"unknown image task {task!r}")


def image_schema(task: str, n_pixels: int = 784) -> DatasetSchema:
    if task == "mnist":
        private = {"name": "parity", "classes": ["even", "odd"]}
        utility = {"name": "ge5", "classes": ["<5", ">=5"]}
    elif task == "fashion":
        private = {"name": "article", "classes": list(FASHION_CLASSES)}
        utility = {"name": "upper", "classes": ["Upper", "Miscellaneous"]}
    else:
        raise ValueError(f"unknown image task {task!r}")
    return DatasetSchema.build([{"name": f"px{i}", "kind": "numeric"} for i in range(n_pixels)],
                               private, utility, f"{task}-images")


def _image_batch(images_path, labels_path, task, limit):
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if len(images) != len(labels):
        raise IngestError("malformed_row", f"{len(images)} images vs {len(labels)} labels", images_path)
    if limit:
        images, labels = images[:limit], labels[:limit]
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    xp, xu = task_labels(labels, task)
    return RecordBatch(x, xp, xu), labels


def load_idx_images(train_images, train_labels, test_images, test_labels, task: str,
                    limit_train: int | None = None, limit_test: int | None = None) -> Dataset:
    """Flattened [0, 1] pixel vectors; private/utility labels derived from the class per task."""
    train, raw_tr = _image_batch(train_images, train_labels, task, limit_train)
    test, raw_te = _image_batch(test_images, test_labels, task, limit_test)
    schema = image_schema(task, train.x.shape[1])
    meta = {"task": task, "n_train": len(train), "n_test": len(test),
            "train_class_counts": np.bincount(raw_tr, minlength=10).tolist()}
    return Dataset(schema, train, test, None, meta)


# -- cached batch file --------------------------------------------------------------
#
#   b"PUPBATCH" u32 version, 32-byte schema sha256, u64 rows, u32 width,
#   u32 state code, f64[rows*width] x, i64[rows] xp, i64[rows] xu; little-endian.

_BATCH_MAGIC = b"PUPBATCH"
_STATES = (dt.CLEAN, dt.IGNORANT, dt.AWARE)


def save_batch(path, batch: RecordBatch, schema: DatasetSchema):
    rows, width = batch.x.shape
    with open(path, "wb") as f:
        f.write(_BATCH_MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(bytes.fromhex(schema.digest))
        f.write(struct.pack("<QII", rows, width, _STATES.index(batch.state)))
        f.write(np.ascontiguousarray(batch.x, "<f8").tobytes())
        f.write(np.ascontiguousarray(batch.xp, "<i8").tobytes())
        f.write(np.ascontiguousarray(batch.xu, "<i8").tobytes())


def load_batch(path, schema: DatasetSchema | None = None) -> RecordBatch:
    blob = Path(path).read_bytes()
    if blob[:8] != _BATCH_MAGIC:
        raise IngestError("bad_cache", "not a cached batch file", path)
    digest = blob[12:44].hex()
    if schema is not None and digest != schema.digest:
        raise IngestError("schema_mismatch", "cached batch was written for a different schema", path)
    rows, width, state = struct.unpack_from("<QII", blob, 44)
    off = 60
    x = np.frombuffer(blob, "<f8", rows * width, off).reshape(rows, width)
    off += 8 * rows * width
    xp = np.frombuffer(blob, "<i8", rows, off)
    xu = np.frombuffer(blob, "<i8", rows, off + 8 * rows)
    return RecordBatch(x.astype(np.float64), xp.astype(np.int64), xu.astype(np.int64), _STATES[state])
