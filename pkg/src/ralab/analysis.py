"""Selection-bias analysis and significance testing.

The bias pipeline turns per-stage characteristic dumps into divergence
records (selected set vs unlabeled pool, 50-bin histogram PDFs, JSD) and
per-stage Pearson correlations between divergence and robustness across
acquisition functions. Wilcoxon signed-rank compares paired robustness
series; the null distribution is exact up to 20 effective pairs.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .acquisition import estimate_pdf
from .errors import (
    AllZeroDifferences,
    LengthMismatch,
    MissingDump,
    NotDistribution,
    ZeroVariance,
)
from .util import read_csv

CHARACTERISTICS = ("entropy", "gini", "lc", "margin", "true_label")


def _kl(p, q):
    # terms with p=0 contribute 0; q=0 with p>0 cannot occur against a mixture
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def jsd(p, q):
    """Jensen-Shannon divergence, natural log: 0 on identity, ln 2 on disjoint support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise LengthMismatch(f"mass vectors {p.shape} vs {q.shape}")
    for v in (p, q):
        if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-6:
            raise NotDistribution("masses must sum to 1 within 1e-6")
    m = (p + q) / 2.0
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def pearson(a, b):
    """Sample Pearson correlation; constant input is an error, not a zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise LengthMismatch("need two equal-length samples of size >= 2")
    da = a - a.mean()
    db = b - b.mean()
    va = float((da ** 2).sum())
    vb = float((db ** 2).sum())
    if va == 0.0 or vb == 0.0:
        raise ZeroVariance("correlation undefined for a constant sample")
    return float((da * db).sum() / math.sqrt(va * vb))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank
# ---------------------------------------------------------------------------

def _average_ranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_p_two_sided(rank2, w2):
    """P-value from the exact null of W+ (ranks doubled to an integer grid)."""
    total = int(rank2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in rank2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    denom = float(2 ** len(rank2))
    cdf_low = counts[: w2 + 1].sum() / denom
    cdf_high = counts[w2:].sum() / denom
    return min(1.0, 2.0 * min(cdf_low, cdf_high))


def wilcoxon_signed_rank(a, b):
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; tied absolute differences receive average
    ranks. The null distribution is enumerated exactly for up to 20 effective
    pairs, with a continuity-corrected normal approximation beyond that.
    Returns (W, p_value, n_effective) with W = min(W+, W-).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch("need equal-length paired samples")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    ranks = _average_ranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    if n <= 20:
        rank2 = np.rint(ranks * 2).astype(np.int64)
        w2 = int(round(w_pos * 2))
        p = _exact_p_two_sided(rank2, w2)
    else:
        mu = n * (n + 1) / 4.0
        ties = np.unique(ranks, return_counts=True)[1]
        sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - float(((ties ** 3) - ties).sum()) / 48.0
        diff = w_pos - mu
        z = (diff - 0.5 * np.sign(diff)) / math.sqrt(sigma2)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return w, p, n


# ---------------------------------------------------------------------------
# bias study over run dumps
# ---------------------------------------------------------------------------

@dataclass
class BiasRecord:
    stage: int
    acquisition: str
    characteristic: str
    divergence: float
    robustness: float


@dataclass
class CorrelationRow:
    stage: int
    characteristic: str
    r: float
    n: int


def _load_stage_dump(run_dir, stage):
    path = os.path.join(run_dir, "scores", f"stage_{stage:03d}.csv")
    if not os.path.exists(path):
        raise MissingDump(f"no characteristic dump at {path}")
    header, rows = read_csv(path)
    cols = {name: i for i, name in enumerate(header)}
    data = np.array(rows, dtype=np.float64)
    return cols, data


def _load_robustness(run_dir, column):
    path = os.path.join(run_dir, "stages.csv")
    if not os.path.exists(path):
        raise MissingDump(f"no stage records at {path}")
    header, rows = read_csv(path)
    cols = {name: i for i, name in enumerate(header)}
    if column not in cols:
        raise MissingDump(f"{path} has no column {column!r}")
    out = {}
    for row in rows:
        out[int(row[cols["stage"]])] = float(row[cols[column]])
    return out


def characteristic_divergence(values_pool, values_selected, characteristic, bins=50):
    """JSD between selected-set and pool PDFs on the pool's partition.

    Continuous characteristics use equal-width bins over the pool's range;
    the true-label characteristic is a categorical histogram over classes.
    """
    if characteristic == "true_label":
        classes = int(max(values_pool.max(), values_selected.max())) + 1
        pool_m = np.bincount(values_pool.astype(np.int64), minlength=classes) / values_pool.size
        sel_m = np.bincount(values_selected.astype(np.int64), minlength=classes) / values_selected.size
        return jsd(sel_m, pool_m)
    pool_h = estimate_pdf(values_pool, bins=bins)
    lohi = (pool_h.bin_edges[0], pool_h.bin_edges[-1])
    sel_h = estimate_pdf(values_selected, bins=bins, value_range=lohi)
    return jsd(sel_h.masses, pool_h.masses)


def bias_study(runs, characteristics=CHARACTERISTICS, rob_column="rob_pgd", bins=50):
    """Divergence and correlation tables from per-stage dumps of several runs.

    runs: mapping of acquisition name -> run directory (stages.csv plus
    scores/stage_XXX.csv). Returns (BiasRecords, CorrelationRows); correlation
    cells with undefined variance get r = nan.
    """
    if len(runs) < 2:
        raise MissingDump("bias study needs dumps from at least two acquisition functions")
    rob = {name: _load_robustness(d, rob_column) for name, d in runs.items()}
    stages = sorted(set.intersection(*(set(r) for r in rob.values())) - {0})
    records = []
    for stage in stages:
        for name, run_dir in runs.items():
            cols, dump = _load_stage_dump(run_dir, stage)
            sel = dump[:, cols["selected"]] > 0.5
            for ch in characteristics:
                d = characteristic_divergence(dump[:, cols[ch]], dump[sel, cols[ch]], ch, bins)
                records.append(BiasRecord(stage, name, ch, d, rob[name][stage]))
    correlations = []
    names = list(runs)
    for stage in stages:
        for ch in characteristics:
            cell = {
                (rec.acquisition): rec
                for rec in records
                if rec.stage == stage and rec.characteristic == ch
            }
            ds = np.array([cell[nm].divergence for nm in names])
            rs = np.array([cell[nm].robustness for nm in names])
            try:
                r = pearson(ds, rs)
            except ZeroVariance:
                r = float("nan")
            correlations.append(CorrelationRow(stage, ch, r, len(names)))
    return records, correlations
