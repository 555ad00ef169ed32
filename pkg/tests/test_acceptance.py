"""Acceptance suite: one test per criterion at its stated tolerance.

Every test records a PASS/FAIL line (printed in the pytest terminal summary)
before asserting.  Desk-scale sweeps are cached per (lambda, seed) cell under
``runs/acceptance/<name>-<config digest>``; delete that directory (or set
``PUPET_ACCEPTANCE_FRESH=1``) to recompute from scratch.
"""
import copy
import hashlib
import json
import os
import shutil
import time
from dataclasses import replace

import numpy as np
import pytest

from pupet import adversaries as advs
from pupet import artifacts, experiment, metrics, tradeoff
from pupet import datatype as dt
from pupet import ndgrad as nd
from pupet.config import load_config, load_dataset
from pupet.models import Classifier, Generator, privatize
from pupet.ndgrad import MLP, Tensor
from pupet.trainer import Trainer, TradeoffConfig, minibatches, train, train_step

from conftest import ACCEPTANCE, ADULT, MNIST, ROOT

CONFIGS = ROOT / "configs"
CACHE = ROOT / "runs" / "acceptance"
SEEDS5 = range(5)


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = ("PASS" if ok else "FAIL", detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="session", autouse=True)
def _fresh_cache():
    if os.environ.get("PUPET_ACCEPTANCE_FRESH") == "1" and CACHE.exists():
        shutil.rmtree(CACHE)


def _key(cfg, dataset) -> str:
    return hashlib.sha256((cfg.digest() + dataset.data_digest).encode()).hexdigest()[:12]


def cached_sweep(name: str, cfg, dataset, lambdas, seeds):
    """Sweep with per-cell caching; returns (mean points, raw rows, summed cell seconds)."""
    out = CACHE / f"{name}-{_key(cfg, dataset)}"
    points, raw = tradeoff.sweep(experiment.CellRunner(dataset, cfg.run), lambdas, seeds, out_dir=out, workers=1)
    tradeoff.write_raw_csv(out / "raw.csv", raw)
    tradeoff.write_points_csv(out / "points.csv", points, "mean")
    seconds = sum({(r["lambda_p"], r["seed"]): r.get("seconds", 0.0) for r in raw}.values())
    return points, raw, seconds


def _at(points, lam, cond="ignorant"):
    return next(p for p in points if p.lambda_p == lam and p.condition == cond)


# -- property-based, CI scale --------------------------------------------------------

def _central_diff(f, param, h=1e-5):
    out = np.zeros_like(param.data)
    flat, grad = param.data.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return out


def test_criterion_01_autodiff_matches_finite_differences():
    rng = np.random.default_rng(2024)
    worst, params_seen = 0.0, []
    for _ in range(12):
        sizes = [int(rng.integers(2, 12))] + [int(rng.integers(2, 24)) for _ in range(int(rng.integers(1, 3)))]
        sizes.append(int(rng.integers(2, 6)))
        hidden = str(rng.choice(["tanh", "sigmoid"]))
        net = MLP.build(sizes, rng, hidden=hidden)
        n_params = sum(p.data.size for p in net.parameters())
        if n_params > 1000:
            continue
        params_seen.append(n_params)
        x = Tensor(rng.normal(size=(8, sizes[0])))
        labels = rng.integers(0, sizes[-1], size=8)
        loss = lambda: nd.softmax_cross_entropy(net(x), labels)
        grads = nd.grad(loss(), net.parameters())
        with nd.no_grad():
            for p, g in zip(net.parameters(), grads):
                num = _central_diff(lambda: loss().item(), p)
                err = np.linalg.norm(g - num) / max(np.linalg.norm(g) + np.linalg.norm(num), 1e-12)
                worst = max(worst, float(err))
    record(1, worst < 1e-4 and len(params_seen) >= 8,
           f"{len(params_seen)} nets ({min(params_seen)}-{max(params_seen)} params), worst relative error {worst:.2e}")


def _clone(gen: Generator, variant: str) -> Generator:
    g = copy.deepcopy(gen)
    g.variant = variant
    return g


def test_criterion_02_uae_sigma_zero_is_ae():
    mismatches, checks = 0, 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 9))
        uae = Generator.build(n, 2, 3, rng, variant="uae", sigma=0.0, latent_dim=3, hidden=(7,))
        ae = _clone(uae, "ae")
        adv, util = Classifier.build(n, 2, rng, (5,)), Classifier.build(n, 3, rng, (5,))
        x, xp, xu = rng.normal(size=(32, n)), rng.integers(0, 2, 32), rng.integers(0, 3, 32)
        out_u = uae.release(x, xp, xu, np.random.default_rng(1))
        out_a = ae.release(x, xp, xu, np.random.default_rng(1))
        mismatches += not np.array_equal(out_u, out_a)
        cfg = TradeoffConfig(lambda_p=5.0, batch_size=32, seed=seed)
        t_u = Trainer(uae, copy.deepcopy(adv), copy.deepcopy(util), cfg)
        t_a = Trainer(ae, copy.deepcopy(adv), copy.deepcopy(util), cfg)
        batch = dt.RecordBatch(x, xp, xu)
        for _ in range(3):
            r_u, r_a = train_step(t_u, batch), train_step(t_a, batch)
            mismatches += r_u.gen_loss != r_a.gen_loss
            checks += 1
        mismatches += nd.param_digest(uae.parameters()) != nd.param_digest(ae.parameters())
    record(2, mismatches == 0, f"10 weight sets, {checks} gen_loss steps compared bitwise, {mismatches} mismatches")


def test_criterion_03_algorithm_steps():
    rng = np.random.default_rng(7)
    n = 6
    gen = Generator.build(n, 2, 2, rng, variant="uae", sigma=0.1, latent_dim=3, hidden=(8,))
    adv, util = Classifier.build(n, 2, rng, (6,)), Classifier.build(n, 2, rng, (6,))
    xp, xu = rng.integers(0, 2, 96), rng.integers(0, 2, 96)
    data = dt.RecordBatch(rng.normal(size=(96, n)) + xp[:, None], xp, xu)
    cfg = TradeoffConfig(lambda_p=4.0, lambda_u=0.7, batch_size=24, seed=3)
    t = Trainer(gen, adv, util, cfg)

    updates = []

    def watch(name, opt):
        inner = opt.step

        def step(grads):
            before = [nd.param_digest(m.parameters()) for m in (gen, adv, util)]
            inner(grads)
            after = [nd.param_digest(m.parameters()) for m in (gen, adv, util)]
            updates.append((name, tuple(b != a for b, a in zip(before, after))))
        opt.step = step

    for name, opt in (("gen", t.opt_gen), ("adv", t.opt_adv), ("util", t.opt_util)):
        watch(name, opt)

    loss_errors, steps = 0, 0
    for _ in range(3):
        for idx in minibatches(len(data), cfg.batch_size, t.shuffle_rng):
            b = data.take(idx)
            # independent recompute from a copy of the noise stream and the pre-step weights
            replay = copy.deepcopy(t.noise_rng)
            with nd.no_grad():
                xhat, _ = privatize(gen, b.x, b.xp, b.xu, rng=replay)
                recon = nd.mse(xhat, b.x).item()
                l_p, l_u = adv.loss(xhat, b.xp).item(), util.loss(xhat, b.xu).item()
            rec = train_step(t, b)
            loss_errors += (rec.recon, rec.l_p, rec.l_u) != (recon, l_p, l_u)
            loss_errors += rec.gen_loss != recon + l_u * cfg.lambda_u - l_p * cfg.lambda_p
            steps += 1
    expected = [("gen", (True, False, False)), ("adv", (False, True, False)), ("util", (False, False, True))] * steps
    isolated = updates == expected
    record(3, loss_errors == 0 and isolated,
           f"{steps} steps: gen_loss recompute mismatches {loss_errors}; Steps 3/4/5 touch only their own model: {isolated}")


def test_criterion_04_enforce_constraints():
    schema = dt.DatasetSchema.build(
        [{"name": "num", "kind": "numeric"},
         {"name": "c5", "kind": "categorical", "vocabulary": list("abcde")},
         {"name": "age", "kind": "numeric"},
         {"name": "c3", "kind": "categorical", "vocabulary": list("xyz")}],
        {"name": "p", "classes": ["0", "1"]}, {"name": "u", "classes": ["0", "1"]})
    example = dt.enforce_blocks(np.array([[0.1, 0.05, 0.03, 0.8, 0.02]]), [(0, 5)])
    ok_example = example.tolist() == [[0.0, 0.0, 0.0, 1.0, 0.0]]
    rng = np.random.default_rng(0)
    bad = 0
    for _ in range(200):
        rows = int(rng.integers(1, 20))
        batch = dt.RecordBatch(rng.normal(size=(rows, schema.width)) * 3, np.zeros(rows, int), np.zeros(rows, int),
                               dt.IGNORANT)
        once = dt.enforce_constraints(batch, schema)
        twice = dt.enforce_constraints(once, schema)
        dt.check_batch(once, schema)
        bad += not np.array_equal(once.x, twice.x)
        bad += not np.array_equal(once.x[:, schema.numeric_columns], batch.x[:, schema.numeric_columns])
        for a, b in schema.categorical_blocks:
            block = once.x[:, a:b]
            bad += not (np.all(block.sum(axis=1) == 1.0) and np.all((block == 0) | (block == 1)))
    record(4, ok_example and bad == 0,
           f"worked example -> {example[0].tolist()}; 200 random batches: {bad} idempotence/one-hot/numeric failures")


def _auroc_pairwise(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_05_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(5)
    worst, count = 0.0, 0
    for _ in range(500):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.integers(0, int(rng.integers(2, 12)), n) / 7.0 if rng.random() < 0.5 else rng.random(n)
        worst = max(worst, abs(metrics.auroc(scores, labels) - _auroc_pairwise(scores.tolist(), labels.tolist())))
        count += 1
    record(5, worst <= 1e-12, f"{count} instances (n <= 100, half with heavy ties), max |diff| {worst:.1e}")


def _hull_oracle(points) -> list:
    best = {}
    for x, y in points:
        best[x] = max(y, best.get(x, -np.inf))
    pts = sorted(best.items())
    cross = lambda o, a, b: (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    keep = []
    for p in pts:
        covered = any(q[0] < p[0] < r[0] and cross(q, r, p) <= 0 for q in pts for r in pts)
        if not covered:
            keep.append(p)
    return keep


def test_criterion_06_upper_hull_matches_oracle():
    rng = np.random.default_rng(6)
    mismatches, dominance_breaks = 0, 0
    for i in range(300):
        n = int(rng.integers(1, 51))
        if i % 2:  # integer grid: exact collinearity and shared x values
            pts = [(float(a), float(b)) for a, b in rng.integers(0, 8, size=(n, 2))]
        else:
            pts = [tuple(p) for p in rng.random((n, 2))]
        hull = tradeoff.upper_hull_xy(pts)
        mismatches += hull != _hull_oracle(pts)
        # a point on or under the hull never changes it
        if len(hull) >= 2:
            (x0, y0), (x1, y1) = hull[0], hull[1]
            a = rng.random()
            under = (x0 + a * (x1 - x0), y0 + a * (y1 - y0) - rng.random() * 0.5)
            dominance_breaks += tradeoff.upper_hull_xy(pts + [under]) != hull
    record(6, mismatches == 0 and dominance_breaks == 0,
           f"300 clouds (<= 50 points): {mismatches} hull mismatches, {dominance_breaks} dominance violations")


# -- desk scale: UCI Adult -------------------------------------------------------------

@pytest.fixture(scope="session")
def adult_cfg():
    if not (ADULT / "adult.data").exists():
        pytest.skip("UCI Adult not materialised; run scripts/fetch_data.py")
    return load_config(CONFIGS / "adult.ini")


@pytest.fixture(scope="session")
def adult_data(adult_cfg):
    return load_dataset(adult_cfg.dataset)


@pytest.fixture(scope="session")
def adult_uae(adult_cfg, adult_data):
    return cached_sweep("adult-uae", adult_cfg, adult_data, adult_cfg.sweep.lambdas, SEEDS5)


@pytest.fixture(scope="session")
def adult_best(adult_uae):
    """Best grid lambda: lowest mean private accuracy among points that keep utility >= 0.78."""
    points = [p for p in adult_uae[0] if p.condition == "ignorant"]
    ok = [p for p in points if p.utility_acc >= 0.78]
    return min(ok or points, key=lambda p: (p.private_acc, -p.utility_acc))


def test_criterion_07_adult_raw_baselines(adult_cfg, adult_data):
    t0 = time.perf_counter()
    priv, util = [], []
    for seed in SEEDS5:
        ecfg = replace(adult_cfg.evaluation, seed=seed, hidden=adult_cfg.run.adversary_hidden)
        test = adult_data.test
        p = advs.train_weak_adversary(adult_data.train, adult_data.schema, ecfg, "private")
        u = advs.train_weak_adversary(adult_data.train, adult_data.schema, ecfg, "utility")
        priv.append(metrics.accuracy(p.predict(test.x), test.xp))
        util.append(metrics.accuracy(u.predict(test.x), test.xu))
    seconds = time.perf_counter() - t0
    mp, mu = float(np.mean(priv)), float(np.mean(util))
    record(7, abs(mp - 0.83) <= 0.03 and abs(mu - 0.84) <= 0.03 and seconds <= 600,
           f"raw private {mp:.4f} (target 0.83 +- 0.03), utility {mu:.4f} (0.84 +- 0.03), 5 seeds, {seconds:.0f}s")


def test_criterion_08_adult_uae_point(adult_uae, adult_best):
    _, _, seconds = adult_uae
    p = adult_best
    record(8, p.private_acc <= 0.73 and p.utility_acc >= 0.78 and seconds <= 7200,
           f"best lambda_P={p.lambda_p:g}: private {p.private_acc:.4f} (<= 0.73), utility {p.utility_acc:.4f} "
           f"(>= 0.78), {len(p.seeds)} seeds, sweep {seconds / 60:.1f} min")


def test_criterion_09_adult_aware_gap(adult_uae, adult_best):
    points = adult_uae[0]
    ign, awa = _at(points, adult_best.lambda_p, "ignorant"), _at(points, adult_best.lambda_p, "aware")
    dp, du = abs(awa.private_acc - ign.private_acc), abs(awa.utility_acc - ign.utility_acc)
    grid_max = max(max(abs(_at(points, lam, "aware").private_acc - _at(points, lam, "ignorant").private_acc),
                       abs(_at(points, lam, "aware").utility_acc - _at(points, lam, "ignorant").utility_acc))
                   for lam in sorted({q.lambda_p for q in points}))
    record(9, dp <= 0.03 and du <= 0.03,
           f"lambda_P={adult_best.lambda_p:g}: |aware-ignorant| private {dp:.4f}, utility {du:.4f} (<= 0.03); "
           f"largest gap anywhere on the grid {grid_max:.4f}")


def test_criterion_11_adult_variant_ordering(adult_cfg, adult_data, adult_uae):
    hulls = {"uae": [p for p in adult_uae[0] if p.condition == "ignorant"]}
    for variant in ("ae", "vae", "betavae"):
        cfg = load_config(CONFIGS / "adult.ini", [f"generator.variant={variant}", "adversary.conditions=ignorant"])
        hulls[variant] = cached_sweep(f"adult-{variant}", cfg, adult_data, cfg.sweep.lambdas, SEEDS5)[0]
    bgp, bgu = metrics.best_guess(adult_data.test.xp), metrics.best_guess(adult_data.test.xu)
    curves = {k: tradeoff.upper_hull(v, bgp, bgu) for k, v in hulls.items()}
    fracs = {f"{hi}>{lo}": tradeoff.dominated_fraction(curves[hi], curves[lo])
             for hi in ("uae", "ae") for lo in ("vae", "betavae")}
    record(11, all(f >= 0.8 for f in fracs.values()),
           "dominated fraction of sampled leakage budgets: " + ", ".join(f"{k} {v:.2f}" for k, v in fracs.items()))


def test_criterion_13_best_guess_floor(adult_uae, adult_data):
    points, raw, _ = adult_uae
    bg = metrics.best_guess(adult_data.test.xp)
    p = _at(points, 100.0)
    per_seed = [r["private_acc"] for r in raw if r["lambda_p"] == 100.0 and r["condition"] == "ignorant"]
    lowest = min(per_seed)
    record(13, abs(p.private_acc - bg) <= 0.05 and lowest >= bg - 0.01,
           f"lambda_P=100: private {p.private_acc:.4f} vs best guess {bg:.4f} (within 0.05); "
           f"lowest seed {lowest:.4f} (floor {bg - 0.01:.4f})")


# -- desk scale: MNIST -----------------------------------------------------------------

@pytest.fixture(scope="session")
def mnist_ready():
    if not (MNIST / "train-images-idx3-ubyte").exists():
        pytest.skip("MNIST subset not materialised; run scripts/fetch_data.py")


def test_criterion_10_mnist_direction(mnist_ready):
    cfg = load_config(CONFIGS / "mnist.ini")
    data = load_dataset(cfg.dataset)
    t0 = time.perf_counter()
    raw = []
    for seed in range(3):
        ecfg = replace(cfg.evaluation, seed=seed, hidden=cfg.run.adversary_hidden)
        clf = advs.train_weak_adversary(data.train, data.schema, ecfg, "private")
        raw.append(metrics.accuracy(clf.predict(data.test.x), data.test.xp))
    raw_seconds = time.perf_counter() - t0
    points, _, seconds = cached_sweep("mnist", cfg, data, (100.0,), range(3))
    p = _at(points, 100.0)
    r = float(np.mean(raw))
    total = seconds + raw_seconds
    record(10, r >= 0.93 and p.private_acc <= 0.75 and p.utility_acc >= 0.85 and total <= 3600,
           f"{len(data.train)}+{len(data.test)} images: raw parity {r:.4f} (>= 0.93) -> privatized "
           f"{p.private_acc:.4f} (<= 0.75), utility {p.utility_acc:.4f} (>= 0.85), {total / 60:.1f} min")


def _latent_probe(cfg, data, lam: float, seed: int) -> float:
    path = CACHE / f"latent2-{_key(cfg, data)}" / f"lam{lam:g}_seed{seed}.json"
    if path.exists():
        return json.loads(path.read_text())["probe_accuracy"]
    gen, adv, util = experiment.build_models(data, cfg.run, seed)
    train(gen, adv, util, data.train, replace(cfg.training, lambda_p=lam, seed=seed))
    tr, te = artifacts.export_latents(gen, data.train), artifacts.export_latents(gen, data.test)
    acc = artifacts.latent_probe_accuracy(tr, te, hidden=(64,), seed=seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"lambda_p": lam, "seed": seed, "probe_accuracy": acc}))
    return acc


def test_criterion_12_latent_separability(mnist_ready):
    cfg = load_config(CONFIGS / "mnist_latent2.ini")
    data = load_dataset(cfg.dataset)
    seeds = range(4)
    before = [_latent_probe(cfg, data, 0.0, s) for s in seeds]
    after = [_latent_probe(cfg, data, 100.0, s) for s in seeds]
    drops = [b - a for b, a in zip(before, after)]
    mean_drop = float(np.mean(drops))
    record(12, mean_drop >= 0.10,
           f"d=2 parity probe: lambda_P=0 {np.mean(before):.3f} -> lambda_P=100 {np.mean(after):.3f}, "
           f"mean drop {mean_drop:.3f} (>= 0.10); per seed " + ", ".join(f"{d:.3f}" for d in drops))
