"""Operational points, the upper convex hull (UPT curve), mixing, and the lambda_P sweep."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

DEFAULT_LAMBDA_GRID = tuple(float(v) for v in range(0, 101, 10))


@dataclass(frozen=True)
class OperationalPoint:
    private_acc: float
    utility_acc: float
    lambda_p: float | None = None
    seeds: tuple = ()
    condition: str = "ignorant"
    variant: str = "uae"
    private_auroc: float | None = None
    utility_auroc: float | None = None
    mixed_from: tuple | None = None  # (p1, p2, alpha) for mixed points

    def __post_init__(self):
        for v in (self.private_acc, self.utility_acc):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {v} outside [0, 1]")

    @property
    def xy(self) -> tuple[float, float]:
        return self.private_acc, self.utility_acc


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _left_or_on(o, a, b) -> bool:
    """``a`` lies on or below segment o-b; collinear up to rounding of the inputs counts as on."""
    scale = (abs(a[0] - o[0]) + abs(a[1] - o[1])) * (abs(b[0] - o[0]) + abs(b[1] - o[1]))
    return _cross(o, a, b) >= -1e-12 * scale


def upper_hull_xy(points) -> list[tuple[float, float]]:
    """Monotone-chain upper hull, left to right; collinear interior points dropped."""
    pts = sorted(set((float(x), float(y)) for x, y in points))
    hull: list = []
    for p in pts:
        while hull and hull[-1][0] == p[0]:
            hull.pop()  # same x: the later (higher y) point wins
        while len(hull) >= 2 and _left_or_on(hull[-2], hull[-1], p):
            hull.pop()
        hull.append(p)
    return hull


@dataclass
class UPTCurve:
    points: list
    vertices: list  # OperationalPoints on the hull, ordered by private_acc
    best_guess_private: float | None = None
    best_guess_utility: float | None = None

    @property
    def xy(self) -> list[tuple[float, float]]:
        return [v.xy for v in self.vertices]

    def value_at(self, x: float) -> float | None:
        """Polyline height at private accuracy ``x``; None outside the hull's x-range."""
        xy = self.xy
        if not xy or x < xy[0][0] or x > xy[-1][0]:
            return None
        for (x0, y0), (x1, y1) in zip(xy, xy[1:]):
            if x0 <= x <= x1:
                return y0 if x1 == x0 else y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        return xy[0][1]

    def best_utility_at(self, budget: float) -> float | None:
        """Highest hull utility among points leaking at most ``budget`` private accuracy."""
        xy = self.xy
        if not xy or budget < xy[0][0]:
            return None
        if budget >= xy[-1][0]:
            return max(y for _, y in xy)
        return max(self.value_at(budget), max(y for x, y in xy if x <= budget))


def upper_hull(points: list[OperationalPoint], best_guess_private=None, best_guess_utility=None) -> UPTCurve:
    if not points:
        raise ValueError("upper_hull needs at least one point")
    lookup = {}
    for p in points:
        lookup.setdefault(p.xy, p)
    vertices = [lookup[xy] for xy in upper_hull_xy(p.xy for p in points)]
    return UPTCurve(list(points), vertices, best_guess_private, best_guess_utility)


def mix(p1: OperationalPoint, p2: OperationalPoint, alpha: float) -> OperationalPoint:
    """Point reached by sending a fraction ``alpha`` of the test set to p1's mechanism, the rest to p2's."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")

    def comb(a, b):
        if a is None or b is None:
            return None
        return a if a == b else alpha * a + (1 - alpha) * b

    return OperationalPoint(comb(p1.private_acc, p2.private_acc), comb(p1.utility_acc, p2.utility_acc),
                            condition=p1.condition, variant=p1.variant,
                            private_auroc=comb(p1.private_auroc, p2.private_auroc),
                            utility_auroc=comb(p1.utility_auroc, p2.utility_auroc),
                            mixed_from=(p1, p2, alpha))


def dominated_fraction(upper: UPTCurve, lower: UPTCurve, n: int = 101) -> float:
    """Share of evenly spaced leakage budgets where ``upper`` offers at least ``lower``'s utility.

    Budgets span from where both curves are defined (the larger of the two
    leftmost hull x) to the largest hull x of either curve.
    """
    lo = max(upper.xy[0][0], lower.xy[0][0])
    hi = max(upper.xy[-1][0], lower.xy[-1][0])
    xs = [lo + (hi - lo) * i / (n - 1) for i in range(n)] if hi > lo else [lo]
    wins = sum(upper.best_utility_at(x) >= lower.best_utility_at(x) - 1e-12 for x in xs)
    return wins / len(xs)


# -- sweep ----------------------------------------------------------------------

RAW_FIELDS = ["lambda_p", "seed", "private_acc", "utility_acc", "private_auroc", "utility_auroc",
              "condition", "variant", "status", "seconds"]


def _cell_name(lam: float, seed: int) -> str:
    return f"lam{lam:g}_seed{seed}.json"


def sweep(run_cell: Callable[[float, int], list[dict]], lambda_grid, seeds, out_dir=None,
          workers: int = 1) -> tuple[list[OperationalPoint], list[dict]]:
    """Train/evaluate every (lambda_P, seed) cell and average per (lambda, condition).

    ``run_cell(lam, seed)`` returns one dict per evaluated condition with keys
    ``private_acc``, ``utility_acc``, ``private_auroc``, ``utility_auroc``,
    ``condition``, ``variant``; or raises (the cell is logged as failed).
    With ``out_dir`` set, every finished cell is written to ``out_dir/cells``
    and cells already there are not re-run.
    """
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    cells_dir = Path(out_dir) / "cells" if out_dir is not None else None
    if cells_dir is not None:
        cells_dir.mkdir(parents=True, exist_ok=True)
    results: dict[tuple, list] = {}
    todo = []
    for lam in lambda_grid:
        for seed in seeds:
            path = cells_dir / _cell_name(lam, seed) if cells_dir is not None else None
            if path is not None and path.exists():
                results[(lam, seed)] = json.loads(path.read_text())
            else:
                todo.append((lam, seed))
    if todo:
        log.info("sweep: %d cells to run, %d resumed", len(todo), len(results))

    def record(lam, seed, rows):
        results[(lam, seed)] = rows
        if cells_dir is not None:
            tmp = cells_dir / (_cell_name(lam, seed) + ".tmp")
            tmp.write_text(json.dumps(rows))
            tmp.replace(cells_dir / _cell_name(lam, seed))

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(_safe_cell, run_cell, lam, seed): (lam, seed) for lam, seed in todo}
            for fut in as_completed(futs):
                record(*futs[fut], fut.result())
    else:
        for lam, seed in todo:
            record(lam, seed, _safe_cell(run_cell, lam, seed))

    raw = []
    for (lam, seed), rows in sorted(results.items()):
        for r in rows:
            raw.append({"lambda_p": lam, "seed": seed, **r})
    return aggregate(raw), raw


def _safe_cell(run_cell, lam, seed) -> list[dict]:
    """Run one cell; every row records the cell's wall time so resumed sweeps keep their cost."""
    t0 = time.perf_counter()
    try:
        rows = run_cell(lam, seed)
    except Exception as err:  # divergent or failed run: excluded from the mean, kept in the log
        log.warning("cell lambda=%g seed=%d failed: %s", lam, seed, err)
        return [{"status": "failed", "error": f"{type(err).__name__}: {err}",
                 "seconds": time.perf_counter() - t0}]
    seconds = time.perf_counter() - t0
    return [{**r, "status": "ok", "seconds": seconds} for r in rows]


def aggregate(raw: list[dict]) -> list[OperationalPoint]:
    groups = defaultdict(list)
    failed = defaultdict(int)
    for r in raw:
        if r.get("status", "ok") != "ok":
            failed[r["lambda_p"]] += 1
            continue
        groups[(r["lambda_p"], r["condition"], r["variant"])].append(r)
    lambdas = {r["lambda_p"] for r in raw}
    for lam in lambdas:
        if not any(k[0] == lam for k in groups):
            raise RuntimeError(f"all seeds failed for lambda_p={lam:g}")
    points = []
    for (lam, cond, variant), rows in sorted(groups.items()):
        mean = lambda key: math.fsum(r[key] for r in rows) / len(rows)
        points.append(OperationalPoint(mean("private_acc"), mean("utility_acc"), lam,
                                       tuple(r["seed"] for r in rows), cond, variant,
                                       mean("private_auroc"), mean("utility_auroc")))
    return points


def raw_points(raw: list[dict]) -> list[OperationalPoint]:
    return [OperationalPoint(r["private_acc"], r["utility_acc"], r["lambda_p"], (r["seed"],),
                             r["condition"], r["variant"], r["private_auroc"], r["utility_auroc"])
            for r in raw if r.get("status", "ok") == "ok"]


def write_raw_csv(path, raw: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, RAW_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in raw:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_points_csv(path, points: list[OperationalPoint], kind: str = "point"):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["kind", "lambda_p", "private_acc", "utility_acc", "private_auroc", "utility_auroc",
                    "condition", "variant", "n_seeds"])
        for p in points:
            w.writerow([kind, p.lambda_p, repr(p.private_acc), repr(p.utility_acc), repr(p.private_auroc),
                        repr(p.utility_auroc), p.condition, p.variant, len(p.seeds)])


def write_plot_data(path, curves: dict[str, UPTCurve]):
    """JSON with, per curve, the achieved points, hull vertices, and best-guess reference lines."""
    payload = {}
    for name, c in curves.items():
        payload[name] = {
            "x_label": "private accuracy", "y_label": "utility accuracy",
            "points": [[p.private_acc, p.utility_acc, p.lambda_p] for p in c.points],
            "hull": [[p.private_acc, p.utility_acc, p.lambda_p] for p in c.vertices],
            "best_guess_private": c.best_guess_private, "best_guess_utility": c.best_guess_utility,
        }
    Path(path).write_text(json.dumps(payload, indent=2))


def default_workers() -> int:
    return max(1, os.cpu_count() or 1)
