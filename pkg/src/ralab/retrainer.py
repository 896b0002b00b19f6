"""Test selection for retraining.

Pretrain on the full training set, pick a small budget of candidate items
with an acquisition function, craft one PGD example per selected item with
the training preset, then continue training on the clean training data plus
those adversarial examples and re-evaluate. To avoid selecting from the set
used for evaluation, candidates come from the validation half and metrics
from the test half.
"""

from dataclasses import dataclass, field

import numpy as np

from . import acquisition as acq
from . import models
from .attacks import evaluate_robustness, pgd_attack, resolve_attack
from .errors import BudgetTooLarge, ConfigInvalid, EmptyDataset
from .learner import TrainSettings, train_standard
from .util import fmt, seeded

RETRAIN_HEADER = [
    "acquisition", "fraction", "seed",
    "base_accuracy", "base_rob_pgd", "base_rob_square",
    "retrained_accuracy", "retrained_rob_pgd", "retrained_rob_square",
]


@dataclass
class RetrainConfig:
    fraction: float
    acquisition: str
    seed: int
    pretrain_epochs: int = 10
    retrain_epochs: int = 10
    train: TrainSettings = field(default_factory=TrainSettings)
    train_attack: object = "mnist-train"
    eval_pgd: object = "mnist-eval"
    eval_square: object = "mnist-square"
    mc_passes: int = 10
    dfal_prepool_factor: int = 10

    def validate(self):
        if not 0.0 <= self.fraction <= 0.10:
            raise ConfigInvalid("budget fraction must lie in [0, 0.10]")
        if self.acquisition not in acq.ACQUISITION_NAMES:
            raise ConfigInvalid(f"unknown acquisition {self.acquisition!r}")
        return self


@dataclass
class RetrainReport:
    acquisition: str
    fraction: float
    seed: int
    baseline_accuracy: float
    baseline_robustness: dict
    retrained_accuracy: float
    retrained_robustness: dict
    selected: np.ndarray

    def csv_row(self):
        return [
            self.acquisition,
            fmt(self.fraction, 4),
            str(self.seed),
            fmt(self.baseline_accuracy),
            fmt(self.baseline_robustness["pgd"]),
            fmt(self.baseline_robustness["square"]),
            fmt(self.retrained_accuracy),
            fmt(self.retrained_robustness["pgd"]),
            fmt(self.retrained_robustness["square"]),
        ]


def pretrain_full(spec, train, epochs, ts=None, val=None):
    """Standard training on the entire training set from a fresh init."""
    if len(train.labels) == 0:
        raise EmptyDataset("cannot pretrain on an empty dataset")
    ts = ts or TrainSettings()
    model = models.build(spec)
    train_standard(
        model, train.images, train.labels, epochs, ts, seeded(spec.seed, "pretrain"), val=val
    )
    return model


def _evaluate(model, eval_set, cfg):
    report = evaluate_robustness(
        model,
        eval_set,
        {"pgd": resolve_attack(cfg.eval_pgd), "square": resolve_attack(cfg.eval_square)},
    )
    return report.clean_accuracy, report.robustness


def select_retrain_evaluate(model, train, candidates, eval_set, cfg):
    """Select floor(fraction*|candidates|) items, retrain with their PGD
    examples mixed into the training data, and report before/after metrics.

    The input model is left untouched; retraining continues from a copy of
    its parameters.
    """
    cfg.validate()
    budget = int(cfg.fraction * len(candidates))
    if budget > len(candidates):
        raise BudgetTooLarge("budget exceeds the candidate pool")
    base_acc, base_rob = _evaluate(model, eval_set, cfg)

    selected = np.empty(0, dtype=np.int64)
    if budget > 0:
        # core-set treats the training data as already covered
        images = np.concatenate([candidates.images, train.images])
        ctx = acq.SelectionContext(
            model=model,
            images=images,
            unlabeled=np.arange(len(candidates), dtype=np.int64),
            labeled=np.arange(len(candidates), len(candidates) + len(train), dtype=np.int64),
            n=budget,
            rng=seeded(cfg.seed, "retrain-select"),
            mc_passes=cfg.mc_passes,
            dfal_prepool_factor=cfg.dfal_prepool_factor,
        )
        selected = np.asarray(acq.select(cfg.acquisition, ctx))
        if selected.min() < 0 or selected.max() >= len(candidates):
            raise BudgetTooLarge("selection left the candidate pool")

    retrained = models.build(model.spec)
    retrained.load_state(model.state())
    images = train.images
    labels = train.labels
    if budget > 0:
        attack = resolve_attack(cfg.train_attack)
        adv = pgd_attack(
            retrained,
            candidates.images[selected],
            candidates.labels[selected],
            attack,
            rng=seeded(cfg.seed, "retrain-attack"),
        ).astype(np.float32)
        images = np.concatenate([images, adv])
        labels = np.concatenate([labels, candidates.labels[selected]])
    train_standard(
        retrained, images, labels, cfg.retrain_epochs, cfg.train, seeded(cfg.seed, "retrain")
    )
    retr_acc, retr_rob = _evaluate(retrained, eval_set, cfg)
    return RetrainReport(
        acquisition=cfg.acquisition,
        fraction=cfg.fraction,
        seed=cfg.seed,
        baseline_accuracy=base_acc,
        baseline_robustness=base_rob,
        retrained_accuracy=retr_acc,
        retrained_robustness=retr_rob,
        selected=selected,
    )
