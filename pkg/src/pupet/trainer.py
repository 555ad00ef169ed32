"""Adversarial min-max training of generator, adversary and utility provider."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .datatype import RecordBatch
from .models import Classifier, Generator, generator_regularizer, privatize

log = logging.getLogger(__name__)


@dataclass
class TradeoffConfig:
    lambda_p: float = 0.0
    lambda_u: float = 1.0
    epochs: int = 50
    batch_size: int = 256
    lr_generator: float = 1e-3
    lr_adversary: float = 1e-3
    lr_utility: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_u < 0:
            raise ValueError("lambda_p and lambda_u must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class StepRecord:
    step: int
    recon: float
    l_p: float
    l_u: float
    reg: float
    gen_loss: float
    noise: tuple = ()  # digests of the eps draws used by steps 3, 4, 5


@dataclass
class TrainTrace:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "recon", "l_P", "l_U", "reg", "gen_loss"])
            for s in self.steps:
                w.writerow([s.step, repr(s.recon), repr(s.l_p), repr(s.l_u), repr(s.reg), repr(s.gen_loss)])


class DivergenceError(RuntimeError):
    def __init__(self, message: str, trace: TrainTrace, record: dict):
        super().__init__(message)
        self.trace, self.record = trace, record

    def dump(self, path):
        Path(path).write_text(json.dumps({"error": str(self), "at": self.record,
                                          "last_steps": [asdict(s) for s in self.trace.steps[-20:]]}, indent=2))


class Trainer:
    """Holds the three models, their optimizers, and the noise RNG for one run."""

    def __init__(self, gen: Generator, adv: Classifier, util: Classifier, cfg: TradeoffConfig):
        self.gen, self.adv, self.util, self.cfg = gen, adv, util, cfg
        self.opt_gen = nd.Adam(gen.parameters(), cfg.lr_generator, cfg.beta1, cfg.beta2)
        self.opt_adv = nd.Adam(adv.parameters(), cfg.lr_adversary, cfg.beta1, cfg.beta2)
        self.opt_util = nd.Adam(util.parameters(), cfg.lr_utility, cfg.beta1, cfg.beta2)
        shuffle_seed, noise_seed = np.random.SeedSequence(cfg.seed).spawn(2)
        self.shuffle_rng = np.random.default_rng(shuffle_seed)
        self.noise_rng = np.random.default_rng(noise_seed)
        self.trace = TrainTrace()
        self.n_steps = 0

    def step(self, batch: RecordBatch) -> StepRecord:
        return train_step(self, batch)


def _digest(eps) -> str:
    return "" if eps is None else hashlib.sha1(eps.tobytes()).hexdigest()[:16]


def train_step(t: Trainer, batch: RecordBatch) -> StepRecord:
    cfg, gen, adv, util = t.cfg, t.gen, t.adv, t.util
    x, xp, xu = batch.x, batch.xp, batch.xu

    # Steps 1-3: privatize, score both discriminators, update the generator only.
    xhat, latent = privatize(gen, x, xp, xu, rng=t.noise_rng)
    l_p = adv.loss(xhat, xp)
    l_u = util.loss(xhat, xu)
    recon = nd.mse(xhat, x)
    reg = generator_regularizer(gen, latent)
    gen_loss = recon + l_u * cfg.lambda_u - l_p * cfg.lambda_p + reg
    values = {"recon": recon.item(), "l_p": l_p.item(), "l_u": l_u.item(), "reg": reg.item(),
              "gen_loss": gen_loss.item()}
    if not all(math.isfinite(v) for v in values.values()):
        raise DivergenceError(f"non-finite loss at step {t.n_steps}", t.trace, {"step": t.n_steps, **values})
    t.opt_gen.step(nd.grad(gen_loss, gen.parameters()))
    noise = [_digest(latent.eps)]

    # Step 4: fresh privatized batch, update the adversary only.
    with nd.no_grad():
        xhat_p, lat_p = privatize(gen, x, xp, xu, rng=t.noise_rng)
    t.opt_adv.step(nd.grad(adv.loss(xhat_p.data, xp), adv.parameters()))
    noise.append(_digest(lat_p.eps))

    # Step 5: fresh privatized batch, update the utility provider only.
    with nd.no_grad():
        xhat_u, lat_u = privatize(gen, x, xp, xu, rng=t.noise_rng)
    t.opt_util.step(nd.grad(util.loss(xhat_u.data, xu), util.parameters()))
    noise.append(_digest(lat_u.eps))

    rec = StepRecord(t.n_steps, noise=tuple(noise), **values)
    t.trace.steps.append(rec)
    t.n_steps += 1
    return rec


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(gen: Generator, adv: Classifier, util: Classifier, data: RecordBatch,
          cfg: TradeoffConfig, on_epoch=None) -> tuple[Trainer, TrainTrace]:
    """Run ``cfg.epochs`` passes of :func:`train_step` over seed-shuffled minibatches.

    ``on_epoch(trainer, epoch)`` may return a dict that is appended to
    ``trace.epochs`` (held-out snapshots).
    """
    t = Trainer(gen, adv, util, cfg)
    for epoch in range(cfg.epochs):
        for idx in minibatches(len(data), cfg.batch_size, t.shuffle_rng):
            train_step(t, data.take(idx))
        last = t.trace.steps[-1] if t.trace.steps else None
        snap = {"epoch": epoch, "recon": last.recon if last else None,
                "l_p": last.l_p if last else None, "l_u": last.l_u if last else None}
        if on_epoch is not None:
            snap.update(on_epoch(t, epoch) or {})
        t.trace.epochs.append(snap)
        log.debug("epoch %d %s", epoch, snap)
    return t, t.trace


def fit_classifier(clf: Classifier, x_source, labels: np.ndarray, epochs: int, batch_size: int,
                   lr: float, rng: np.random.Generator) -> Classifier:
    """Plain supervised training.  ``x_source`` is an array, or a callable ``epoch -> array``
    so each epoch can see a fresh privatised copy of the inputs."""
    opt = nd.Adam(clf.parameters(), lr)
    labels = np.asarray(labels)
    for epoch in range(epochs):
        x = x_source(epoch) if callable(x_source) else x_source
        for idx in minibatches(len(labels), batch_size, rng):
            opt.step(nd.grad(clf.loss(x[idx], labels[idx]), clf.parameters()))
    return clf
