"""Adversarial example generation and robustness evaluation.

PGD and Square operate in an l-inf ball of radius epsilon around the clean
input and never leave [0, 1]; projection arithmetic runs in float64 so the
containment bound is exact to 1e-9. DeepFool is an l2 minimal-perturbation
search used for boundary-distance scoring. Attacks are pure given (model,
input, seed): fixed seeds give identical adversarial batches.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import EmptyDataset, InvalidParams, NonFinite, ShapeMismatch
from .util import seeded

_CHUNK = 256


@dataclass(frozen=True)
class AttackConfig:
    family: str                 # pgd | square | deepfool
    epsilon: float = 0.3
    alpha: float = 0.01
    iters: int = 40
    norm: str = "linf"
    seed: int = 0

    def validate(self):
        if self.family not in ("pgd", "square", "deepfool"):
            raise InvalidParams(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise InvalidParams("epsilon must be >= 0")
        if self.alpha <= 0:
            raise InvalidParams("alpha must be > 0")
        if self.iters < 0:
            raise InvalidParams("iters must be >= 0")
        if self.family == "pgd" and self.norm != "linf":
            raise InvalidParams("pgd is an l-inf attack")
        if self.family == "deepfool" and self.norm != "l2":
            raise InvalidParams("deepfool is an l2 attack")
        if self.family == "pgd" and self.alpha > self.epsilon > 0:
            warnings.warn("pgd step alpha exceeds epsilon", stacklevel=2)
        return self

    def to_json(self):
        return {
            "family": self.family,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "iters": self.iters,
            "norm": self.norm,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(d):
        return AttackConfig(
            family=d["family"],
            epsilon=float(d.get("epsilon", 0.3)),
            alpha=float(d.get("alpha", 0.01)),
            iters=int(d.get("iters", 40)),
            norm=d.get("norm", "l2" if d["family"] == "deepfool" else "linf"),
            seed=int(d.get("seed", 0)),
        ).validate()


# Table-style presets shipped with the toolkit.
ATTACK_PRESETS = {
    "mnist-train": AttackConfig("pgd", 0.3, 0.01, 40),
    "mnist-eval": AttackConfig("pgd", 0.3, 0.01, 50),
    "rgb-eval": AttackConfig("pgd", 8 / 255, 2 / 255, 50),
    "mnist-square": AttackConfig("square", 0.3, 0.05, 500),
    "rgb-square": AttackConfig("square", 8 / 255, 0.05, 500),
}


def resolve_attack(spec):
    """Accept a preset name, a config dict, or an AttackConfig."""
    if isinstance(spec, AttackConfig):
        return spec.validate()
    if isinstance(spec, str):
        if spec not in ATTACK_PRESETS:
            raise InvalidParams(
                f"unknown attack preset {spec!r}; have {sorted(ATTACK_PRESETS)}"
            )
        return ATTACK_PRESETS[spec]
    return AttackConfig.from_json(dict(spec))


@dataclass
class RobustnessReport:
    clean_accuracy: float
    robustness: dict                # attack name -> accuracy on attacked items
    configs: dict = field(default_factory=dict)
    n: int = 0


# ---------------------------------------------------------------------------
# PGD
# ---------------------------------------------------------------------------

def _input_grad(model, x_f64, labels):
    """Gradient of the mean cross-entropy w.r.t. the input batch."""
    xt = ad.Tensor(x_f64, requires_grad=True, dtype=model.spec.dtype)
    with ad.frozen(model.params):
        logits = model.forward(xt)
        loss = ad.cross_entropy(logits, labels)
        ad.backward(loss)
    return xt.grad


def pgd_attack(model, x, y, cfg, rng=None, random_start=True):
    """Iterated signed-gradient ascent projected into the epsilon ball.

    Random uniform start inside the ball (unless disabled), then iters steps
    of x <- clip(x + alpha*sign(grad)); the final iterate is returned whether
    or not the attack flipped the prediction.
    """
    cfg.validate()
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch("inputs and labels disagree on batch size")
    if cfg.epsilon == 0:
        return x.astype(np.float64).copy()
    if rng is None:
        rng = seeded(cfg.seed, "pgd")
    prev_mode = model.mode
    model.mode = "eval"
    try:
        out = np.empty(x.shape, dtype=np.float64)
        for lo in range(0, x.shape[0], _CHUNK):
            out[lo : lo + _CHUNK] = _pgd_chunk(
                model,
                x[lo : lo + _CHUNK].astype(np.float64),
                y[lo : lo + _CHUNK],
                cfg,
                rng,
                random_start,
            )
        return out
    finally:
        model.mode = prev_mode


def _pgd_chunk(model, x64, y, cfg, rng, random_start):
    eps, alpha = cfg.epsilon, cfg.alpha
    lo = np.maximum(x64 - eps, 0.0)
    hi = np.minimum(x64 + eps, 1.0)
    if random_start:
        adv = np.clip(x64 + rng.uniform(-eps, eps, size=x64.shape), lo, hi)
    else:
        adv = x64.copy()
    for _ in range(cfg.iters):
        g = _input_grad(model, adv, y)
        if not np.all(np.isfinite(g)):
            raise NonFinite("pgd gradient is not finite")
        adv = np.clip(adv + alpha * np.sign(g).astype(np.float64), lo, hi)
    return adv


# ---------------------------------------------------------------------------
# DeepFool
# ---------------------------------------------------------------------------

def _logit_and_grads(model, x_item):
    """Logits of a single item plus the input gradient of every logit."""
    classes = model.spec.classes
    grads = []
    logits_val = None
    with ad.frozen(model.params):
        for k in range(classes):
            xt = ad.Tensor(x_item[None], requires_grad=True, dtype=model.spec.dtype)
            logits = model.forward(xt)
            onehot = np.zeros((1, classes), dtype=logits.values.dtype)
            onehot[0, k] = 1.0
            picked = ad.tsum(ad.mul(logits, ad.Tensor(onehot)))
            ad.backward(picked)
            grads.append(xt.grad[0].astype(np.float64))
            logits_val = logits.values[0].astype(np.float64)
    return logits_val, np.stack(grads)


def deepfool(model, x, label=None, overshoot=0.02, max_iter=50):
    """Minimal l2 perturbation toward the nearest decision boundary.

    Returns (perturbation, l2 norm, success). The perturbation includes the
    (1+overshoot) factor. label defaults to the model's own prediction at x;
    when a label is supplied and the model already disagrees, the result is a
    zero perturbation after zero iterations.
    """
    x = np.asarray(x, dtype=np.float64)
    prev_mode = model.mode
    model.mode = "eval"
    try:
        probs = model.predict_proba(x[None])
        current = int(np.argmax(probs[0]))
        ref = current if label is None else int(label)
        r_total = np.zeros_like(x)
        if current != ref:
            return r_total, 0.0, True
        tiny = 1e-12
        for _ in range(max_iter):
            logits, grads = _logit_and_grads(model, x + (1.0 + overshoot) * r_total)
            current = int(np.argmax(logits))
            if current != ref:
                break
            w = grads - grads[ref]
            f = logits - logits[ref]
            norms = np.sqrt((w.reshape(w.shape[0], -1) ** 2).sum(axis=1))
            dist = np.abs(f) / (norms + tiny)
            dist[ref] = np.inf
            l = int(np.argmin(dist))
            r_total = r_total + (np.abs(f[l]) / (norms[l] ** 2 + tiny)) * w[l]
        pert = (1.0 + overshoot) * r_total
        final = model.predict_proba((x + pert)[None])
        success = int(np.argmax(final[0])) != ref
        return pert, float(np.linalg.norm(pert.reshape(-1))), success
    finally:
        model.mode = prev_mode


# ---------------------------------------------------------------------------
# Square attack (score-based black box)
# ---------------------------------------------------------------------------

_SQUARE_HALVINGS = (0.05, 0.1, 0.2, 0.5, 0.8)


def _plane_shape(item_shape):
    if len(item_shape) == 3:
        return item_shape
    if len(item_shape) == 2:
        return (1, *item_shape)
    return (1, 1, int(np.prod(item_shape)))


def _margin_loss(probs, y):
    n = probs.shape[0]
    py = probs[np.arange(n), y].copy()
    rest = probs.copy()
    rest[np.arange(n), y] = -np.inf
    return py - rest.max(axis=1)


def square_attack(model, x, y, cfg, rng=None, loss_trace=None):
    """Random-search l-inf attack driven only by probability queries.

    Stripe init at +-epsilon, then per iteration one random square patch per
    item is proposed at +-epsilon and kept iff the margin loss decreases.
    The model handle is used exclusively through predict_proba. loss_trace,
    when a list, receives the accepted margin-loss vector per iteration.
    """
    cfg.validate()
    query = model.predict_proba  # the only capability the attack may touch
    x = np.asarray(x)
    y = np.asarray(y)
    if cfg.epsilon == 0:
        return x.astype(np.float64).copy()
    if rng is None:
        rng = seeded(cfg.seed, "square")
    eps = cfg.epsilon
    n = x.shape[0]
    item_shape = x.shape[1:]
    c, h, w = _plane_shape(item_shape)
    x64 = x.astype(np.float64).reshape(n, c, h, w)
    lo = np.maximum(x64 - eps, 0.0)
    hi = np.minimum(x64 + eps, 1.0)

    stripes = rng.choice([-eps, eps], size=(n, c, 1, w))
    adv = np.clip(x64 + stripes, lo, hi)
    loss = _margin_loss(query(adv.reshape(x.shape)), y)

    s0 = max(1, int(np.ceil(np.sqrt(0.8 * h * w))))
    for t in range(cfg.iters):
        frac = t / cfg.iters
        halvings = sum(frac >= b for b in _SQUARE_HALVINGS)
        s = max(1, min(min(h, w), s0 // (2 ** halvings)))
        r0 = rng.integers(0, h - s + 1, size=n)
        c0 = rng.integers(0, w - s + 1, size=n)
        signs = rng.choice([-eps, eps], size=(n, c))
        # fancy-indexed patch window, one square per item
        idx_n = np.arange(n)[:, None, None, None]
        idx_c = np.arange(c)[None, :, None, None]
        idx_r = (r0[:, None] + np.arange(s))[:, None, :, None]
        idx_w = (c0[:, None] + np.arange(s))[:, None, None, :]
        prop = adv.copy()
        patch = x64[idx_n, idx_c, idx_r, idx_w] + signs[:, :, None, None]
        prop[idx_n, idx_c, idx_r, idx_w] = np.clip(
            patch, lo[idx_n, idx_c, idx_r, idx_w], hi[idx_n, idx_c, idx_r, idx_w]
        )
        new_loss = _margin_loss(query(prop.reshape(x.shape)), y)
        better = new_loss < loss
        adv[better] = prop[better]
        loss[better] = new_loss[better]
        if loss_trace is not None:
            loss_trace.append(loss.copy())
    return adv.reshape(x.shape)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def craft(model, x, y, cfg, rng=None):
    """Dispatch batch adversarial generation for ball-constrained families."""
    cfg.validate()
    if cfg.family == "pgd":
        return pgd_attack(model, x, y, cfg, rng=rng)
    if cfg.family == "square":
        return square_attack(model, x, y, cfg, rng=rng)
    raise InvalidParams(f"{cfg.family} is not a batch robustness attack")


def evaluate_accuracy(model, dataset):
    """Fraction of argmax-correct predictions; argmax ties go to the lowest class."""
    if len(dataset.labels) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    probs = model.predict_proba(dataset.images)
    pred = probs.argmax(axis=1)
    return float((pred == dataset.labels).mean())


def evaluate_robustness(model, dataset, cfgs):
    """Accuracy on attacked versions of every item, per named attack config."""
    if len(dataset.labels) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    clean = evaluate_accuracy(model, dataset)
    rob = {}
    used = {}
    for name, spec in cfgs.items():
        cfg = resolve_attack(spec)
        used[name] = cfg
        adv = craft(model, dataset.images, dataset.labels, cfg, rng=seeded(cfg.seed, "eval", name))
        pred = model.predict_proba(adv).argmax(axis=1)
        rob[name] = float((pred == dataset.labels).mean())
    return RobustnessReport(
        clean_accuracy=clean, robustness=rob, configs=used, n=len(dataset.labels)
    )
