"""Pool-based active learning drivers, standard and robust.

Stage 0 trains an initial model on a uniformly sampled labeled pool via
standard training (shared by both modes, so every acquisition function and
mode starts from the same model). Each later stage scores the unlabeled pool
with the configured acquisition function, reveals n labels, then continues
training: on clean data (standard mode) or on freshly regenerated PGD
examples of the whole labeled pool (robust mode, perturbed set only).
"""

import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import acquisition as acq
from . import autodiff as ad
from . import data as dat
from . import models
from .attacks import evaluate_robustness, pgd_attack, resolve_attack
from .errors import ConfigInvalid, EmptyPool
from .util import fmt, seeded, write_csv

STAGES_HEADER = ["stage", "labeled", "accuracy", "rob_pgd", "rob_square", "seconds", "acquisition", "seed"]
DUMP_HEADER = ["index", "entropy", "gini", "lc", "margin", "true_label", "selected"]


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs_per_stage: int = 10
    initial_epochs: int = 10
    patience: int = 5
    retrain_from_scratch: bool = False

    @staticmethod
    def from_json(d):
        return TrainSettings(
            lr=float(d.get("lr", 0.01)),
            momentum=float(d.get("momentum", 0.9)),
            batch_size=int(d.get("batch_size", 64)),
            epochs_per_stage=int(d.get("epochs_per_stage", 10)),
            initial_epochs=int(d.get("initial_epochs", d.get("epochs_per_stage", 10))),
            patience=int(d.get("patience", 5)),
            retrain_from_scratch=bool(d.get("retrain_from_scratch", False)),
        )

    def to_json(self):
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "epochs_per_stage": self.epochs_per_stage,
            "initial_epochs": self.initial_epochs,
            "patience": self.patience,
            "retrain_from_scratch": self.retrain_from_scratch,
        }


@dataclass
class StageRecord:
    stage: int
    labeled: int
    accuracy: float
    rob_pgd: float
    rob_square: float
    seconds: float
    acquisition: str
    seed: int

    def csv_row(self):
        return [
            str(self.stage),
            str(self.labeled),
            fmt(self.accuracy),
            fmt(self.rob_pgd),
            fmt(self.rob_square),
            fmt(self.seconds, 3),
            self.acquisition,
            str(self.seed),
        ]


@dataclass
class ExperimentConfig:
    seed: int
    acquisition: str = "random"
    mode: str = "standard"              # standard | robust
    budget: int = 1000
    initial: int = 100
    per_stage: int = 100
    dataset: dict = field(default_factory=lambda: {"kind": "synth-digits", "train_size": 6000, "test_size": 2000})
    model: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [256, 128], "dropout": 0.1})
    train: TrainSettings = field(default_factory=TrainSettings)
    train_attack: object = "mnist-train"
    eval_pgd: object = "mnist-eval"
    eval_square: object = "mnist-square"
    mc_passes: int = 10
    dfal_prepool_factor: int = 10
    dump_scores: bool = True
    checkpoint_stages: bool = False
    timing: bool = False

    def validate(self):
        if self.mode not in ("standard", "robust"):
            raise ConfigInvalid(f"mode must be standard or robust, got {self.mode!r}")
        if self.acquisition not in acq.ACQUISITION_NAMES:
            raise ConfigInvalid(
                f"unknown acquisition {self.acquisition!r}; valid: {', '.join(acq.ACQUISITION_NAMES)}"
            )
        if min(self.budget, self.initial, self.per_stage) <= 0:
            raise ConfigInvalid("budget, initial, and per_stage must be positive")
        if self.initial > self.budget:
            raise ConfigInvalid("initial labeled count exceeds the budget")
        return self

    def stage_count(self):
        return math.ceil((self.budget - self.initial) / self.per_stage)

    def to_json(self):
        return {
            "seed": self.seed,
            "acquisition": self.acquisition,
            "mode": self.mode,
            "budget": self.budget,
            "initial": self.initial,
            "per_stage": self.per_stage,
            "dataset": dict(self.dataset),
            "model": dict(self.model),
            "train": self.train.to_json(),
            "train_attack": _attack_json(self.train_attack),
            "eval_pgd": _attack_json(self.eval_pgd),
            "eval_square": _attack_json(self.eval_square),
            "mc_passes": self.mc_passes,
            "dfal_prepool_factor": self.dfal_prepool_factor,
            "dump_scores": self.dump_scores,
            "checkpoint_stages": self.checkpoint_stages,
            "timing": self.timing,
        }


def _attack_json(spec):
    return spec if isinstance(spec, str) else resolve_attack(spec).to_json()


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def load_experiment_data(cfg):
    """Materialize (train, validation, test) from the dataset config block."""
    d = dict(cfg.dataset)
    kind = d.get("kind", "synth-digits")
    data_seed = int(d.get("seed", 7))
    if kind == "idx":
        train = dat.load_idx(d["train_images"], d["train_labels"], name="train")
        test = dat.load_idx(d["test_images"], d["test_labels"], name="test")
    elif kind == "synth-digits":
        n_train = int(d.get("train_size", 6000))
        n_test = int(d.get("test_size", 2000))
        corpus = dat.synth_digits(n_train + n_test, seed=data_seed)
        train = corpus.subset(np.arange(n_train), name="digits-train")
        test = corpus.subset(np.arange(n_train, n_train + n_test), name="digits-test")
    elif kind == "blobs":
        n_per = int(d.get("per_class", 200))
        ds = dat.synth_blobs(
            int(d.get("classes", 4)), n_per, int(d.get("dim", 16)),
            float(d.get("spread", 0.05)), data_seed,
        )
        n_test = int(len(ds) * float(d.get("test_fraction", 0.25)))
        train = ds.subset(np.arange(len(ds) - n_test), name="blobs-train")
        test = ds.subset(np.arange(len(ds) - n_test, len(ds)), name="blobs-test")
    else:
        raise ConfigInvalid(f"unknown dataset kind {kind!r}")
    subset = d.get("subset")
    if subset:
        pick = seeded(data_seed, "subset").choice(len(train), size=int(subset), replace=False)
        train = train.subset(np.sort(pick), name=f"{train.name}-{subset}")
    val, test = dat.split_val_test(test, cfg.seed)
    return train, val, test


def model_spec_for(cfg, dataset, seed=None):
    return models.ModelSpec(
        kind=cfg.model.get("kind", "mlp"),
        input_shape=tuple(dataset.item_shape),
        classes=dataset.classes,
        hidden=tuple(cfg.model.get("hidden", (256, 128))),
        conv_channels=tuple(cfg.model.get("conv_channels", (6, 16))),
        fc_sizes=tuple(cfg.model.get("fc_sizes", (120, 84))),
        dropout=float(cfg.model.get("dropout", 0.1)),
        seed=cfg.seed if seed is None else seed,
    )


def build_model(cfg, dataset):
    return models.build(model_spec_for(cfg, dataset))


# ---------------------------------------------------------------------------
# per-stage training
# ---------------------------------------------------------------------------

def _train_loop(model, labels, epochs, ts, rng, epoch_images, eval_fn):
    n = len(labels)
    best_acc, best_state, since_best = -np.inf, None, 0
    for _ in range(epochs):
        images = epoch_images()
        model.mode = "train"
        perm = rng.permutation(n)
        for lo in range(0, n, ts.batch_size):
            sel = perm[lo : lo + ts.batch_size]
            ad.zero_grads(model.params)
            logits = model.forward(images[sel], rng=rng)
            loss = ad.cross_entropy(logits, labels[sel])
            ad.backward(loss)
            ad.sgd_step(model.params, ts.lr, ts.momentum)
        model.mode = "eval"
        if eval_fn is None or ts.patience <= 0:
            continue
        acc = eval_fn()
        if acc > best_acc:
            best_acc, best_state, since_best = acc, model.state(), 0
        else:
            since_best += 1
            if since_best >= ts.patience:
                break
    if best_state is not None:
        model.load_state(best_state)
    model.mode = "eval"
    return model


def train_standard(model, images, labels, epochs, ts, rng, val=None):
    """Minibatch SGD on clean labeled data; early stop on clean val accuracy."""
    if len(labels) == 0:
        raise EmptyPool("no labeled data to train on")
    eval_fn = None
    if val is not None:
        def eval_fn():
            pred = model.predict_proba(val.images).argmax(axis=1)
            return float((pred == val.labels).mean())
    return _train_loop(model, labels, epochs, ts, rng, lambda: images, eval_fn)


def train_adversarial(model, images, labels, epochs, ts, attack_cfg, rng, attack_rng, val=None):
    """Adversarial training: each epoch regenerates PGD examples of every
    labeled item from the current parameters and trains on the perturbed set
    only; early stop on adversarial validation accuracy."""
    if len(labels) == 0:
        raise EmptyPool("no labeled data to train on")
    cfg = resolve_attack(attack_cfg)

    def epoch_images():
        adv = pgd_attack(model, images, labels, cfg, rng=attack_rng)
        return adv.astype(np.float32)

    eval_fn = None
    if val is not None:
        def eval_fn():
            adv_val = pgd_attack(model, val.images, val.labels, cfg, rng=attack_rng)
            pred = model.predict_proba(adv_val).argmax(axis=1)
            return float((pred == val.labels).mean())
    return _train_loop(model, labels, epochs, ts, rng, epoch_images, eval_fn)


def evaluate_stage(model, test, eval_pgd, eval_square):
    """Clean accuracy plus robustness per eval attack on the held-out test half."""
    report = evaluate_robustness(
        model, test, {"pgd": resolve_attack(eval_pgd), "square": resolve_attack(eval_square)}
    )
    return report.clean_accuracy, report.robustness["pgd"], report.robustness["square"]


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def _dump_characteristics(out_dir, stage, model, train, pool, selected):
    probs = model.predict_proba(train.images[pool.unlabeled])
    ent = acq.entropy_rows(probs)
    gini = 1.0 - (probs.astype(np.float64) ** 2).sum(axis=1)
    lc = 1.0 - probs.max(axis=1)
    top2 = -np.partition(-probs, 1, axis=1)[:, :2]
    margin = top2[:, 0] - top2[:, 1]
    labels = train.labels[pool.unlabeled]
    chosen = np.isin(pool.unlabeled, selected).astype(int)
    rows = [
        [str(int(i)), fmt(e), fmt(g), fmt(l), fmt(m), str(int(t)), str(int(s))]
        for i, e, g, l, m, t, s in zip(pool.unlabeled, ent, gini, lc, margin, labels, chosen)
    ]
    write_csv(os.path.join(out_dir, "scores", f"stage_{stage:03d}.csv"), DUMP_HEADER, rows)


def run_active_learning(cfg, out_dir=None):
    """Run one active-learning experiment; returns the StageRecord list.

    When out_dir is given, writes stages.csv, per-stage characteristic dumps
    (dump_scores), and the final model checkpoint.
    """
    cfg.validate()
    train, val, test = load_experiment_data(cfg)
    pool = dat.init_pools(train, cfg.initial, cfg.seed)
    model = build_model(cfg, train)
    ts = cfg.train
    records = []

    def clock(start):
        return time.perf_counter() - start if cfg.timing else 0.0

    start = time.perf_counter()
    train_standard(
        model,
        train.images[pool.labeled],
        train.labels[pool.labeled],
        ts.initial_epochs,
        ts,
        seeded(cfg.seed, "train", 0),
        val=val,
    )
    acc, rob_p, rob_s = evaluate_stage(model, test, cfg.eval_pgd, cfg.eval_square)
    records.append(
        StageRecord(0, pool.labeled_count, acc, rob_p, rob_s, clock(start), cfg.acquisition, cfg.seed)
    )
    if out_dir and cfg.checkpoint_stages:
        ad.save_checkpoint(os.path.join(out_dir, "checkpoints", "stage_000"), model.named_params())

    for stage in range(1, cfg.stage_count() + 1):
        if len(pool.unlabeled) == 0 or pool.labeled_count >= cfg.budget:
            break
        start = time.perf_counter()
        n_take = min(cfg.per_stage, len(pool.unlabeled), cfg.budget - pool.labeled_count)
        ctx = acq.SelectionContext(
            model=model,
            images=train.images,
            unlabeled=pool.unlabeled,
            labeled=pool.labeled,
            n=n_take,
            rng=seeded(cfg.seed, "acquire", stage),
            mc_passes=cfg.mc_passes,
            dfal_prepool_factor=cfg.dfal_prepool_factor,
        )
        selected = acq.select(cfg.acquisition, ctx)
        if out_dir and cfg.dump_scores:
            _dump_characteristics(out_dir, stage, model, train, pool, selected)
        pool.acquire(selected, stage)

        if ts.retrain_from_scratch:
            model = build_model(cfg, train)
        imgs = train.images[pool.labeled]
        labs = train.labels[pool.labeled]
        train_rng = seeded(cfg.seed, "train", stage)
        if cfg.mode == "standard":
            train_standard(model, imgs, labs, ts.epochs_per_stage, ts, train_rng, val=val)
        else:
            train_adversarial(
                model,
                imgs,
                labs,
                ts.epochs_per_stage,
                ts,
                cfg.train_attack,
                train_rng,
                seeded(cfg.seed, "train-attack", stage),
                val=val,
            )
        acc, rob_p, rob_s = evaluate_stage(model, test, cfg.eval_pgd, cfg.eval_square)
        records.append(
            StageRecord(stage, pool.labeled_count, acc, rob_p, rob_s, clock(start), cfg.acquisition, cfg.seed)
        )
        if out_dir and cfg.checkpoint_stages:
            ad.save_checkpoint(
                os.path.join(out_dir, "checkpoints", f"stage_{stage:03d}"), model.named_params()
            )

    if out_dir:
        write_stage_records(records, os.path.join(out_dir, "stages.csv"))
        ad.save_checkpoint(os.path.join(out_dir, "model"), model.named_params())
    return records


def write_stage_records(records, path):
    write_csv(path, STAGES_HEADER, [r.csv_row() for r in records])


def clone_config(cfg, **overrides):
    return replace(cfg, **overrides)
