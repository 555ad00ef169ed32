"""Post-hoc attack suite: weak, strong and in-training adversaries, plus utility providers.

Every classifier in one comparison scores the *same* released test tensor, so
the reported leakage (the best adversary's accuracy) is well defined.
"""
from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import datatype as dt
from . import metrics
from .datatype import DatasetSchema, RecordBatch
from .models import Classifier, Mechanism
from .trainer import fit_classifier

IGNORANT, AWARE = "ignorant", "aware"
CONDITIONS = (IGNORANT, AWARE)


@dataclass
class EvalConfig:
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    hidden: tuple | None = None  # None: mirror the in-training adversary
    kinds: tuple = ("weak", "strong", "in_training")
    seed: int = 0


@dataclass
class AdversaryKind:
    tag: str
    model: Classifier
    accuracy: float | None = None
    auroc: float | None = None


def _hidden(cfg: EvalConfig) -> tuple:
    return tuple(cfg.hidden) if cfg.hidden is not None else (64,)


def _labels(batch: RecordBatch, target: str) -> np.ndarray:
    return batch.xp if target == "private" else batch.xu


def _n_classes(schema: DatasetSchema, target: str) -> int:
    return (schema.private if target == "private" else schema.utility).n_classes


def train_weak_adversary(train: RecordBatch, schema: DatasetSchema, cfg: EvalConfig,
                         target: str = "private") -> Classifier:
    """Classifier fit on clean X; it will later be pointed at released data."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    clf = Classifier.build(schema.width, _n_classes(schema, target), rng, _hidden(cfg), role=f"weak-{target}")
    return fit_classifier(clf, train.x, _labels(train, target), cfg.epochs, cfg.batch_size, cfg.lr, rng)


def release(mech: Mechanism, batch: RecordBatch, schema: DatasetSchema, condition: str,
            rng: np.random.Generator) -> np.ndarray:
    xhat = mech.release(batch.x, batch.xp, batch.xu, rng)
    if condition == AWARE:
        xhat = dt.enforce_blocks(xhat, schema.categorical_blocks)
    return xhat


def train_strong_adversary(mech: Mechanism, train: RecordBatch, schema: DatasetSchema, cfg: EvalConfig,
                           target: str = "private", condition: str = IGNORANT) -> Classifier:
    """Classifier fit on released X_hat with true labels, re-drawing the mechanism's noise every epoch."""
    seq = np.random.SeedSequence([cfg.seed, 2, 0 if target == "private" else 1])
    init_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    clf = Classifier.build(schema.width, _n_classes(schema, target), init_rng, _hidden(cfg),
                           role=f"strong-{target}")
    source = lambda epoch: release(mech, train, schema, condition, noise_rng)
    return fit_classifier(clf, source, _labels(train, target), cfg.epochs, cfg.batch_size, cfg.lr, init_rng)


def score(kinds: list[AdversaryKind], xhat: np.ndarray, labels) -> list[AdversaryKind]:
    for k in kinds:
        res = metrics.evaluate_probs(k.model.probs(xhat), labels)
        k.accuracy, k.auroc = res.accuracy, res.auroc
    return kinds


def best_adversary(kinds: list[AdversaryKind], xhat: np.ndarray | None = None, labels=None):
    """Highest-accuracy member (first one wins ties) -> (kind, accuracy, auroc).

    If ``xhat``/``labels`` are given every member is (re)scored on them first.
    """
    if not kinds:
        raise ValueError("best_adversary needs at least one adversary")
    if xhat is not None:
        score(kinds, xhat, labels)
    best = max(kinds, key=lambda k: k.accuracy)
    return best, best.accuracy, best.auroc


@dataclass
class ConditionReport:
    condition: str
    private: list
    utility: list
    xhat_digest: str
    private_best_guess: float
    utility_best_guess: float
    best_private: AdversaryKind = field(init=False)
    best_utility: AdversaryKind = field(init=False)

    def __post_init__(self):
        self.best_private = best_adversary(self.private)[0]
        self.best_utility = best_adversary(self.utility)[0]

    @property
    def private_acc(self) -> float:
        return self.best_private.accuracy

    @property
    def utility_acc(self) -> float:
        return self.best_utility.accuracy

    def rows(self) -> list[dict]:
        out = []
        for role, kinds, best in (("private", self.private, self.best_private),
                                  ("utility", self.utility, self.best_utility)):
            for k in kinds:
                out.append({"condition": self.condition, "role": role, "kind": k.tag,
                            "accuracy": k.accuracy, "auroc": k.auroc})
            out.append({"condition": self.condition, "role": role, "kind": f"best:{best.tag}",
                        "accuracy": best.accuracy, "auroc": best.auroc})
        return out


def evaluate_condition(mech: Mechanism, adversaries: dict, utilities: dict, test: RecordBatch,
                       schema: DatasetSchema, condition: str, rng: np.random.Generator | None = None,
                       xhat: np.ndarray | None = None) -> ConditionReport:
    """Release the test set once (or reuse ``xhat``), enforce one-hot blocks in the aware
    condition, and score every adversary / utility provider on that single tensor."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    if xhat is None:
        xhat = mech.release(test.x, test.xp, test.xu, rng if rng is not None else np.random.default_rng())
    if condition == AWARE:
        if not schema.categorical_blocks:
            warnings.warn("aware condition on a schema without categorical features: same as ignorant",
                          RuntimeWarning, stacklevel=2)
        xhat = dt.enforce_blocks(xhat, schema.categorical_blocks)
        dt.check_batch(RecordBatch(xhat, test.xp, test.xu, dt.AWARE), schema)
    digest = hashlib.sha256(np.ascontiguousarray(xhat, "<f8").tobytes()).hexdigest()
    priv = score([AdversaryKind(t, m) for t, m in adversaries.items()], xhat, test.xp)
    util = score([AdversaryKind(t, m) for t, m in utilities.items()], xhat, test.xu)
    return ConditionReport(condition, priv, util, digest,
                           metrics.best_guess(test.xp), metrics.best_guess(test.xu))


def write_report(path, reports: list[ConditionReport]):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, ["condition", "role", "kind", "accuracy", "auroc"])
        w.writeheader()
        for r in reports:
            for row in r.rows():
                w.writerow({**row, "accuracy": repr(row["accuracy"]), "auroc": repr(row["auroc"])})
