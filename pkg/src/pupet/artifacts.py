"""Data exports for inspection: 2-D latent scatters, distortion histograms, sample pairs.

Every export is a pure read of a frozen generator; files are plain CSV written
with ``repr`` floats so they round-trip exactly regardless of locale.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .datatype import DatasetSchema, RecordBatch
from .models import Classifier, Generator
from .trainer import fit_classifier


def export_latents(gen: Generator, batch: RecordBatch, path=None) -> np.ndarray:
    """Rows ``(z1, z2, private label)`` using the latent mean; needs a 2-D latent."""
    if gen.latent_dim != 2:
        raise ValueError(f"latent export needs latent_dim == 2, got {gen.latent_dim}")
    with nd.no_grad():
        mu, _ = gen.encode(batch.x, batch.xp, batch.xu)
    rows = np.column_stack([mu.data, batch.xp.astype(np.float64)])
    if path is not None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["z1", "z2", "private"])
            for z1, z2, p in rows:
                w.writerow([repr(float(z1)), repr(float(z2)), int(p)])
    return rows


def read_latents(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[float(a), float(b), float(c)] for a, b, c in rows]).reshape(-1, 3)


def latent_probe_accuracy(train_latents: np.ndarray, test_latents: np.ndarray, hidden=(), epochs: int = 100,
                          lr: float = 1e-2, batch_size: int = 128, seed: int = 0) -> float:
    """Fit a probe classifier on ``(z, label)`` rows and report held-out accuracy.

    ``hidden=()`` gives a logistic-regression probe (one dense softmax layer).
    """
    rng = np.random.default_rng(seed)
    ytr = train_latents[:, 2].astype(np.int64)
    k = int(max(ytr.max(), test_latents[:, 2].max())) + 1
    # standardise with train statistics so the probe's learning rate is scale-free
    mean, std = train_latents[:, :2].mean(0), train_latents[:, :2].std(0) + 1e-8
    clf = Classifier.build(2, k, rng, hidden, role="probe")
    fit_classifier(clf, (train_latents[:, :2] - mean) / std, ytr, epochs, batch_size, lr, rng)
    pred = clf.predict((test_latents[:, :2] - mean) / std)
    return float((pred == test_latents[:, 2].astype(np.int64)).mean())


@dataclass
class DistortionSample:
    columns: list  # feature names
    diffs: np.ndarray  # (rows, len(columns)) of X_hat - X
    edges: list  # per column, bin edges (len bins + 1)
    counts: list  # per column, histogram counts
    moments: list  # per column, (mean, variance, skew)


def moments(v: np.ndarray) -> tuple[float, float, float]:
    """Population mean, variance and skewness; skew is 0 for a constant column."""
    mean = float(v.mean())
    var = float(((v - mean) ** 2).mean())
    skew = float(((v - mean) ** 3).mean() / var ** 1.5) if var > 1e-24 else 0.0
    return mean, var, skew


def export_distortion(gen, batch: RecordBatch, schema: DatasetSchema, bins: int = 30,
                      rng: np.random.Generator | None = None, columns=None) -> DistortionSample:
    """Histograms and moments of ``X_hat - X`` for every numeric feature (or ``columns``)."""
    xhat = gen.release(batch.x, batch.xp, batch.xu, rng if rng is not None else np.random.default_rng(0))
    cols = schema.numeric_columns if columns is None else list(columns)
    names = [f.name for f in schema.released if not f.categorical]
    if columns is not None:
        by_start = {f.start: f.name for f in schema.released}
        names = [by_start.get(c, f"col{c}") for c in cols]
    diffs = xhat[:, cols] - batch.x[:, cols]
    edges, counts, moms = [], [], []
    for j in range(diffs.shape[1]):
        lo, hi = float(diffs[:, j].min()), float(diffs[:, j].max())
        if hi - lo <= 1e-9 * max(1.0, abs(lo), abs(hi)):  # (near-)constant: one spike, unit-wide range
            mid = 0.5 * (lo + hi)
            lo, hi = mid - 0.5, mid + 0.5
        c, e = np.histogram(diffs[:, j], bins=bins, range=(lo, hi))
        edges.append(e.tolist())
        counts.append(c.tolist())
        moms.append(moments(diffs[:, j]))
    return DistortionSample(names, diffs, edges, counts, moms)


def write_distortion(sample: DistortionSample, out_dir):
    """``distortion_hist.csv`` (feature, bin, left, right, count) and ``distortion_moments.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "distortion_hist.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["feature", "bin", "left", "right", "count"])
        for name, e, c in zip(sample.columns, sample.edges, sample.counts):
            for i, n in enumerate(c):
                w.writerow([name, i, repr(e[i]), repr(e[i + 1]), n])
    with open(out / "distortion_moments.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["feature", "mean", "variance", "skew"])
        for name, (m, v, s) in zip(sample.columns, sample.moments):
            w.writerow([name, repr(m), repr(v), repr(s)])


def export_samples(gen, batch: RecordBatch, schema: DatasetSchema, path=None,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Paired (original, privatised) pixel rows, clamped to [0, 1]."""
    if not schema.name.endswith("-images"):
        raise ValueError("export_samples needs an image schema")
    xhat = gen.release(batch.x, batch.xp, batch.xu, rng if rng is not None else np.random.default_rng(0))
    orig, priv = np.clip(batch.x, 0.0, 1.0), np.clip(xhat, 0.0, 1.0)
    if path is not None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["index", "kind", *(f"px{i}" for i in range(orig.shape[1]))])
            for i in range(len(orig)):
                w.writerow([i, "original", *map(repr, orig[i].tolist())])
                w.writerow([i, "privatized", *map(repr, priv[i].tolist())])
    return orig, priv


def read_samples(path) -> tuple[np.ndarray, np.ndarray]:
    orig, priv = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            (orig if row[1] == "original" else priv).append([float(v) for v in row[2:]])
    return np.array(orig), np.array(priv)

