"""One training-plus-evaluation run, the unit the sweep fans out over."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import adversaries as advs
from .adversaries import EvalConfig
from .ingest import Dataset
from .models import Classifier, Generator
from .trainer import TradeoffConfig, TrainTrace, train

log = logging.getLogger(__name__)


@dataclass
class GeneratorConfig:
    variant: str = "uae"
    latent_dim: int = 8
    hidden: tuple = (64,)
    sigma: float = 0.05
    beta: float = 4.0


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    training: TradeoffConfig = field(default_factory=TradeoffConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    adversary_hidden: tuple = (64,)
    conditions: tuple = ("ignorant", "aware")

    def to_dict(self) -> dict:
        return asdict(self)


def output_kind(dataset: Dataset) -> str:
    return "sigmoid" if dataset.schema.name.endswith("-images") else "identity"


def build_models(dataset: Dataset, cfg: RunConfig, seed: int) -> tuple[Generator, Classifier, Classifier]:
    """Seeded generator, in-training adversary and utility provider for ``dataset``."""
    schema, g = dataset.schema, cfg.generator
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    kind = output_kind(dataset)
    gen = Generator.build(schema.width, schema.private.n_classes, schema.utility.n_classes, rng,
                          variant=g.variant, latent_dim=g.latent_dim, hidden=g.hidden, sigma=g.sigma,
                          beta=g.beta, output=kind,
                          blocks=schema.categorical_blocks if kind == "identity" else ())
    adv = Classifier.build(schema.width, schema.private.n_classes, rng, cfg.adversary_hidden, "in_training-private")
    util = Classifier.build(schema.width, schema.utility.n_classes, rng, cfg.adversary_hidden, "in_training-utility")
    return gen, adv, util


@dataclass
class RunResult:
    gen: Generator
    adversary: Classifier
    utility: Classifier
    trace: TrainTrace
    reports: dict  # condition -> ConditionReport
    strong: dict = field(default_factory=dict)  # (condition, target) -> Classifier

    def rows(self, variant: str) -> list[dict]:
        return [{"private_acc": r.private_acc, "utility_acc": r.utility_acc,
                 "private_auroc": r.best_private.auroc, "utility_auroc": r.best_utility.auroc,
                 "private_kind": r.best_private.tag, "utility_kind": r.best_utility.tag,
                 "condition": cond, "variant": variant} for cond, r in self.reports.items()]


_WEAK_CACHE: dict = {}


def weak_adversary(dataset: Dataset, ecfg: EvalConfig) -> Classifier:
    """Clean-data adversary; it does not depend on the mechanism, so it is shared across lambdas."""
    key = (dataset.data_digest, ecfg.seed, ecfg.epochs, ecfg.batch_size, ecfg.lr, ecfg.hidden)
    if key not in _WEAK_CACHE:
        _WEAK_CACHE[key] = advs.train_weak_adversary(dataset.train, dataset.schema, ecfg)
    return _WEAK_CACHE[key]


def evaluate(gen, adv, util, dataset: Dataset, cfg: RunConfig, seed: int) -> tuple[dict, dict]:
    """Score ``gen`` under every configured condition; ``adv``/``util`` may be None (no in-training models)."""
    hidden = cfg.evaluation.hidden if cfg.evaluation.hidden is not None else cfg.adversary_hidden
    ecfg = replace(cfg.evaluation, seed=seed, hidden=tuple(hidden))
    schema, test = dataset.schema, dataset.test
    xhat = gen.release(test.x, test.xp, test.xu, np.random.default_rng(np.random.SeedSequence([seed, 3])))
    reports, strong = {}, {}
    for cond in cfg.conditions:
        pool = {}
        if "weak" in ecfg.kinds:
            pool["weak"] = weak_adversary(dataset, ecfg)
        if "strong" in ecfg.kinds:
            strong[(cond, "private")] = pool["strong"] = advs.train_strong_adversary(
                gen, dataset.train, schema, ecfg, "private", cond)
        if "in_training" in ecfg.kinds and adv is not None:
            pool["in_training"] = adv
        strong[(cond, "utility")] = s_util = advs.train_strong_adversary(gen, dataset.train, schema, ecfg,
                                                                         "utility", cond)
        utilities = {"in_training": util, "strong": s_util} if util is not None else {"strong": s_util}
        reports[cond] = advs.evaluate_condition(gen, pool, utilities, test, schema, cond, xhat=xhat)
    return reports, strong


def run(dataset: Dataset, cfg: RunConfig, lambda_p: float, seed: int, on_epoch=None) -> RunResult:
    tcfg = replace(cfg.training, lambda_p=float(lambda_p), seed=seed)
    gen, adv, util = build_models(dataset, cfg, seed)
    _, trace = train(gen, adv, util, dataset.train, tcfg, on_epoch=on_epoch)
    reports, strong = evaluate(gen, adv, util, dataset, cfg, seed)
    for cond, r in reports.items():
        log.info("lambda=%g seed=%d %s: private %.4f (%s) utility %.4f (%s)", lambda_p, seed, cond,
                 r.private_acc, r.best_private.tag, r.utility_acc, r.best_utility.tag)
    return RunResult(gen, adv, util, trace, reports, strong)


class CellRunner:
    """Picklable ``(lambda, seed) -> rows`` callable for :func:`tradeoff.sweep`."""

    def __init__(self, dataset: Dataset, cfg: RunConfig):
        self.dataset, self.cfg = dataset, cfg

    def __call__(self, lambda_p: float, seed: int) -> list[dict]:
        return run(self.dataset, self.cfg, lambda_p, seed).rows(self.cfg.generator.variant)
