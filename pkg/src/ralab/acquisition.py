"""The twelve acquisition functions and their shared machinery.

Scoring functions rank items by a per-item quantity (entropy, Gini, least
confidence, margin, mutual information, boundary distance, gradient length);
selection procedures (MCP, core-set, random, stratified entropy sampling)
pick a batch directly. Every selector returns exactly n distinct pool
indices, with ties broken by lowest index everywhere.
"""

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .attacks import deepfool
from .errors import (
    BudgetTooLarge,
    DimMismatch,
    DropoutDisabled,
    EmptyInput,
    NonFinite,
    NotDistribution,
)
from .util import parallel_map

ACQUISITION_NAMES = (
    "maxentropy",
    "deepgini",
    "bald",
    "dropout-entropy",
    "lc",
    "margin",
    "mcp",
    "dfal",
    "egl",
    "coreset",
    "random",
    "dre",
)


@dataclass
class ScoreVector:
    indices: np.ndarray
    scores: np.ndarray
    direction: str  # higher_first | lower_first

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.indices.shape != self.scores.shape:
            raise DimMismatch("indices and scores must be parallel")
        if not np.all(np.isfinite(self.scores)):
            raise NonFinite("scores must be finite")
        if self.direction not in ("higher_first", "lower_first"):
            raise ValueError(f"bad direction {self.direction!r}")

    def top(self, n):
        """Best n indices; ties resolved toward the lower index."""
        if n > len(self.indices):
            raise BudgetTooLarge(f"requested {n} of {len(self.indices)}")
        key = -self.scores if self.direction == "higher_first" else self.scores
        order = np.lexsort((self.indices, key))
        return self.indices[order[:n]].copy()


def _check_prob_rows(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise NotDistribution("expected a batch of probability rows")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-4):
        raise NotDistribution("rows must be probability vectors (sum within 1e-4)")
    return p


def entropy_rows(p):
    """Shannon entropy per row, natural log, 0*log0 = 0."""
    p = _check_prob_rows(p)
    return -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)


# ---------------------------------------------------------------------------
# scoring functions
# ---------------------------------------------------------------------------

def score_max_entropy(p, indices=None):
    h = entropy_rows(p)
    idx = np.arange(len(h)) if indices is None else indices
    return ScoreVector(idx, h, "higher_first")


def score_deepgini(p, indices=None):
    p = _check_prob_rows(p)
    g = 1.0 - (p ** 2).sum(axis=1)
    idx = np.arange(len(g)) if indices is None else indices
    return ScoreVector(idx, g, "higher_first")


def score_least_confidence(p, indices=None):
    p = _check_prob_rows(p)
    s = 1.0 - p.max(axis=1)
    idx = np.arange(len(s)) if indices is None else indices
    return ScoreVector(idx, s, "higher_first")


def score_margin(p, indices=None):
    p = _check_prob_rows(p)
    if p.shape[1] < 2:
        raise NotDistribution("margin needs at least two classes")
    part = np.partition(p, p.shape[1] - 2, axis=1)
    s = part[:, -1] - part[:, -2]
    idx = np.arange(len(s)) if indices is None else indices
    return ScoreVector(idx, s, "lower_first")


def bald_from_passes(passes):
    """Mutual information: H(mean posterior) - mean per-pass entropy."""
    passes = np.asarray(passes, dtype=np.float64)
    mean_p = passes.mean(axis=0)
    per_pass = np.stack([entropy_rows(passes[t]) for t in range(passes.shape[0])])
    return entropy_rows(mean_p) - per_pass.mean(axis=0)


def dropout_entropy_from_passes(passes):
    """Entropy of the Monte-Carlo mean predictive distribution."""
    passes = np.asarray(passes, dtype=np.float64)
    return entropy_rows(passes.mean(axis=0))


def score_bald(model, x, passes, rng, indices=None):
    if model.spec.dropout <= 0.0:
        raise DropoutDisabled("BALD needs a dropout-capable model")
    mc = model.predict_proba_mc(x, passes, rng)
    s = bald_from_passes(mc)
    idx = np.arange(len(s)) if indices is None else indices
    return ScoreVector(idx, s, "higher_first")


def score_dropout_entropy(model, x, passes, rng, indices=None):
    if model.spec.dropout <= 0.0:
        raise DropoutDisabled("DropOut-Entropy needs a dropout-capable model")
    mc = model.predict_proba_mc(x, passes, rng)
    s = dropout_entropy_from_passes(mc)
    idx = np.arange(len(s)) if indices is None else indices
    return ScoreVector(idx, s, "higher_first")


def score_dfal(model, x, indices=None, overshoot=0.02, max_iter=50):
    """DeepFool perturbation norm per item; closest-to-boundary first.

    The crafted adversarial examples are discarded; only norms are kept.
    """
    x = np.asarray(x)

    def norm_of(i):
        _, norm, _ = deepfool(model, x[i], overshoot=overshoot, max_iter=max_iter)
        return norm

    norms = np.array(parallel_map(norm_of, range(x.shape[0])), dtype=np.float64)
    idx = np.arange(x.shape[0]) if indices is None else indices
    return ScoreVector(idx, norms, "lower_first")


def score_egl(model, x, indices=None):
    """Expected gradient length: sum_i p_i * ||grad_theta J(x, y=i)||_2."""
    x = np.asarray(x)
    probs = model.predict_proba(x)

    def one(i):
        total = 0.0
        for k in range(model.spec.classes):
            ad.zero_grads(model.params)
            logits = model.forward(x[i : i + 1])
            loss = ad.cross_entropy(logits, np.array([k]))
            ad.backward(loss)
            sq = 0.0
            for p in model.params:
                if p.grad is not None:
                    sq += float((p.grad.astype(np.float64) ** 2).sum())
            total += probs[i, k] * np.sqrt(sq)
        ad.zero_grads(model.params)
        return total

    prev = model.mode
    model.mode = "eval"
    try:
        scores = np.array([one(i) for i in range(x.shape[0])], dtype=np.float64)
    finally:
        model.mode = prev
    idx = np.arange(x.shape[0]) if indices is None else indices
    return ScoreVector(idx, scores, "higher_first")


# ---------------------------------------------------------------------------
# histogram machinery
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    bin_edges: np.ndarray   # bins+1 ascending edges
    masses: np.ndarray      # bins non-negative, sum 1 for non-empty input
    members: list           # per-bin positions into the scored array

    @property
    def bins(self):
        return len(self.masses)


def estimate_pdf(scores, bins=50, value_range=None):
    """Equal-width histogram PDF; right-open bins, last bin right-closed.

    A constant score set occupies a single bin with mass 1. value_range pins
    the edges (used to put a selected subset on its pool's partition).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInput("cannot estimate a PDF from no scores")
    if not np.all(np.isfinite(scores)):
        raise NonFinite("scores must be finite")
    lo, hi = value_range if value_range is not None else (scores.min(), scores.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    pos = np.clip(np.searchsorted(edges, scores, side="right") - 1, 0, bins - 1)
    masses = np.bincount(pos, minlength=bins).astype(np.float64) / scores.size
    members = [np.where(pos == k)[0] for k in range(bins)]
    return Histogram(edges, masses, members)


def largest_remainder(masses, n):
    """Apportion n seats proportionally to masses, exactly.

    Floor the exact quotas, then hand remaining seats to the largest
    fractional remainders; remainder ties go to the lower bin index.
    """
    masses = np.asarray(masses, dtype=np.float64)
    if masses.sum() <= 0:
        raise EmptyInput("masses must have positive total")
    total = Fraction()
    for m in masses:
        total += Fraction(float(m))
    quotas = [Fraction(float(m)) * n / total for m in masses]
    base = np.array([int(q) for q in quotas], dtype=np.int64)  # floor: quotas >= 0
    remainders = [q - b for q, b in zip(quotas, base)]
    missing = n - int(base.sum())
    order = sorted(range(len(masses)), key=lambda i: (-remainders[i], i))
    for i in order[:missing]:
        base[i] += 1
    return base


# ---------------------------------------------------------------------------
# selection procedures
# ---------------------------------------------------------------------------

def select_mcp(p, n, indices=None):
    """Boundary-cluster round robin.

    Items cluster by their ordered (top1, top2) class pair; priority inside a
    cluster is p(top2)/p(top1) descending. Clusters are visited round-robin
    in descending best-priority order, skipping depleted ones, until n items
    are picked.
    """
    p = _check_prob_rows(p)
    if n > p.shape[0]:
        raise BudgetTooLarge(f"requested {n} of {p.shape[0]}")
    idx = np.arange(p.shape[0]) if indices is None else np.asarray(indices)
    order2 = np.argsort(-p, axis=1, kind="stable")[:, :2]
    priority = p[np.arange(p.shape[0]), order2[:, 1]] / p[np.arange(p.shape[0]), order2[:, 0]]
    clusters = {}
    for pos in range(p.shape[0]):
        clusters.setdefault((order2[pos, 0], order2[pos, 1]), []).append(pos)
    ordered = []
    for key, members in clusters.items():
        members.sort(key=lambda q: (-priority[q], idx[q]))
        ordered.append((key, members))
    ordered.sort(key=lambda kv: (-priority[kv[1][0]], kv[0]))
    queues = [list(members) for _, members in ordered]
    picked = []
    while len(picked) < n:
        progressed = False
        for q in queues:
            if q and len(picked) < n:
                picked.append(q.pop(0))
                progressed = True
        if not progressed:
            break
    return idx[np.array(picked[:n], dtype=np.int64)]


def _sq_dists(points, ref):
    """Squared Euclidean distances from each point to each ref row."""
    pp = (points ** 2).sum(axis=1)[:, None]
    rr = (ref ** 2).sum(axis=1)[None, :]
    return np.maximum(pp + rr - 2.0 * points @ ref.T, 0.0)


def select_coreset(emb_labeled, emb_unlabeled, n, indices=None):
    """Greedy k-center: repeatedly take the point farthest from coverage."""
    emb_labeled = np.asarray(emb_labeled, dtype=np.float64)
    emb_unlabeled = np.asarray(emb_unlabeled, dtype=np.float64)
    if emb_labeled.size and emb_labeled.shape[1] != emb_unlabeled.shape[1]:
        raise DimMismatch("embedding dimensions disagree")
    m = emb_unlabeled.shape[0]
    if n > m:
        raise BudgetTooLarge(f"requested {n} of {m}")
    idx = np.arange(m) if indices is None else np.asarray(indices)
    if emb_labeled.size:
        min_d = _sq_dists(emb_unlabeled, emb_labeled).min(axis=1)
    else:
        min_d = np.full(m, np.inf)
    picked = []
    for _ in range(n):
        far = int(np.argmax(min_d))  # ties: lowest index
        picked.append(far)
        d_new = ((emb_unlabeled - emb_unlabeled[far]) ** 2).sum(axis=1)
        min_d = np.minimum(min_d, d_new)
        min_d[far] = -1.0
    return idx[np.array(picked, dtype=np.int64)]


def select_random(pool_indices, n, rng):
    pool_indices = np.asarray(pool_indices, dtype=np.int64)
    if n > len(pool_indices):
        raise BudgetTooLarge(f"requested {n} of {len(pool_indices)}")
    return rng.choice(pool_indices, size=n, replace=False)


def dre_quotas(hist, n):
    """Per-bin counts for stratified sampling: largest-remainder apportionment
    of n*mass, re-apportioning any overflow onto bins with spare members."""
    capacity = np.array([len(mm) for mm in hist.members], dtype=np.int64)
    alloc = np.zeros(hist.bins, dtype=np.int64)
    need = n
    masses = hist.masses.copy()
    while need > 0:
        active = np.where((capacity - alloc > 0) & (masses > 0))[0]
        if active.size == 0:
            raise BudgetTooLarge("quota exceeds pool size")
        quota = largest_remainder(masses[active], need)
        take = np.minimum(quota, (capacity - alloc)[active])
        alloc[active] += take
        need -= int(take.sum())
        if need > 0:
            # bins that filled up drop out of the next apportionment round
            masses = np.where(capacity - alloc > 0, hist.masses, 0.0)
    return alloc


def select_dre(scores, n, rng, indices=None, bins=50):
    """Stratified sampling matching the pool's score distribution.

    Builds the 50-bin histogram of the scores, apportions n across bins by
    mass (largest remainder), and samples uniformly inside each bin.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if n > scores.size:
        raise BudgetTooLarge(f"requested {n} of {scores.size}")
    idx = np.arange(scores.size) if indices is None else np.asarray(indices)
    hist = estimate_pdf(scores, bins=bins)
    alloc = dre_quotas(hist, n)
    picked = []
    for k in range(hist.bins):
        if alloc[k] == 0:
            continue
        members = hist.members[k]
        if alloc[k] >= len(members):
            picked.append(members)
        else:
            picked.append(rng.choice(members, size=int(alloc[k]), replace=False))
    return idx[np.concatenate(picked).astype(np.int64)]


# ---------------------------------------------------------------------------
# uniform front door used by the learning loop
# ---------------------------------------------------------------------------

@dataclass
class SelectionContext:
    model: object
    images: np.ndarray          # full dataset images
    unlabeled: np.ndarray       # candidate indices
    labeled: np.ndarray         # already-labeled indices (for core-set)
    n: int
    rng: np.random.Generator
    mc_passes: int = 10
    dfal_prepool_factor: int = 10
    deepfool_overshoot: float = 0.02
    deepfool_max_iter: int = 50


def _probs_u(ctx):
    return ctx.model.predict_proba(ctx.images[ctx.unlabeled])


def select(name, ctx):
    """Run one acquisition function; returns exactly ctx.n dataset indices."""
    if name not in ACQUISITION_NAMES:
        raise KeyError(f"unknown acquisition {name!r}; valid: {', '.join(ACQUISITION_NAMES)}")
    if ctx.n > len(ctx.unlabeled):
        raise BudgetTooLarge(f"requested {ctx.n} of {len(ctx.unlabeled)}")
    u = np.asarray(ctx.unlabeled, dtype=np.int64)
    if name == "maxentropy":
        return score_max_entropy(_probs_u(ctx), u).top(ctx.n)
    if name == "deepgini":
        return score_deepgini(_probs_u(ctx), u).top(ctx.n)
    if name == "lc":
        return score_least_confidence(_probs_u(ctx), u).top(ctx.n)
    if name == "margin":
        return score_margin(_probs_u(ctx), u).top(ctx.n)
    if name == "bald":
        return score_bald(ctx.model, ctx.images[u], ctx.mc_passes, ctx.rng, u).top(ctx.n)
    if name == "dropout-entropy":
        return score_dropout_entropy(ctx.model, ctx.images[u], ctx.mc_passes, ctx.rng, u).top(ctx.n)
    if name == "mcp":
        return select_mcp(_probs_u(ctx), ctx.n, u)
    if name == "dfal":
        pre = min(len(u), ctx.dfal_prepool_factor * ctx.n)
        prepool = np.sort(ctx.rng.choice(u, size=pre, replace=False))
        sv = score_dfal(
            ctx.model,
            ctx.images[prepool],
            prepool,
            overshoot=ctx.deepfool_overshoot,
            max_iter=ctx.deepfool_max_iter,
        )
        return sv.top(ctx.n)
    if name == "egl":
        return score_egl(ctx.model, ctx.images[u], u).top(ctx.n)
    if name == "coreset":
        emb_l = ctx.model.penultimate_embedding(ctx.images[ctx.labeled])
        emb_u = ctx.model.penultimate_embedding(ctx.images[u])
        return select_coreset(emb_l, emb_u, ctx.n, u)
    if name == "random":
        return select_random(u, ctx.n, ctx.rng)
    # dre
    scores = entropy_rows(_probs_u(ctx))
    return select_dre(scores, ctx.n, ctx.rng, u)
