"""Objective values, theorem checks, weight-quality AUC and accuracy summaries."""
from dataclasses import dataclass, asdict
import math

import numpy as np
from scipy.stats import rankdata

from . import nn
from .cluster import kmeans_assign


def _check_layout(F, G):
    if F.shape[1] != G.shape[1]:
        raise ValueError(f"feature width {F.shape[1]} != {G.shape[1]}")


def msso_value(F, meta_F):
    """``sum_j | sum_i <G_j, G_meta_i> |``."""
    F, meta_F = np.atleast_2d(F), np.atleast_2d(meta_F)
    _check_layout(F, meta_F)
    return float(np.abs((F @ meta_F.T).sum(axis=1)).sum())


def mco_value(F, C, form="abs"):
    """``sum_j sum_i |<G_j, C_i>|``; ``form="cosine"`` evaluates the equivalent
    ``sum_j ||G_j|| sum_i ||C_i|| |cos(G_j, C_i)|``."""
    F, C = np.atleast_2d(F), np.atleast_2d(C)
    _check_layout(F, C)
    if form == "abs":
        return float(np.abs(F @ C.T).sum())
    if form != "cosine":
        raise ValueError(f"unknown form {form!r}")
    fn = np.linalg.norm(F, axis=1)
    cn = np.linalg.norm(C, axis=1)
    denom = np.outer(fn, cn)
    cos = np.divide(F @ C.T, denom, out=np.zeros_like(denom), where=denom > 0)
    return float((fn[:, None] * cn[None, :] * np.abs(cos)).sum())


@dataclass
class DStatistics:
    d: np.ndarray                    # per sample, inf when one side is empty
    min: float
    quantile: float
    q: float
    n_inf: int

    def table_row(self):
        return {"min": self.min, f"{int(round(self.q * 100))}%-quantile": self.quantile,
                "inf_count": self.n_inf, "n": len(self.d)}


def nearest_rank_quantile(values, q):
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        return float("nan")
    k = max(1, int(math.ceil(q * len(v))))
    return float(v[k - 1])


def d_statistics(F, C, q=0.05):
    """Per-sample dominance ratio ``max(P, Q) / min(P, Q)`` of the positive and
    negative inner-product masses against the centroids."""
    ip = np.atleast_2d(F) @ np.atleast_2d(C).T
    P = np.where(ip > 0, ip, 0.0).sum(axis=1)
    Q = -np.where(ip < 0, ip, 0.0).sum(axis=1)
    lo, hi = np.minimum(P, Q), np.maximum(P, Q)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(lo == 0.0, np.inf, hi / np.where(lo == 0.0, 1.0, lo))
    finite = d[np.isfinite(d)]
    return DStatistics(d, float(finite.min()) if len(finite) else float("inf"),
                       nearest_rank_quantile(finite, q) if len(finite) else float("inf"),
                       q, int(np.isinf(d).sum()))


@dataclass
class Theorem1Check:
    msso: float
    mco: float
    ratio: float
    d: float
    bound: float
    holds: bool


def verify_theorem1(F, C):
    """Check ``(D-1)/(D+1) <= MSSO/MCO <= 1`` with ``D`` the smallest per-sample ratio."""
    mco = mco_value(F, C)
    if mco == 0.0:
        raise ValueError("MCO is zero")
    msso = msso_value(F, C)
    stats = d_statistics(F, C)
    d = stats.min
    bound = 1.0 if math.isinf(d) else (d - 1.0) / (d + 1.0)
    ratio = msso / mco
    slack = 1e-12
    holds = bound - slack <= ratio <= 1.0 + slack
    return Theorem1Check(msso, mco, ratio, d, bound, holds)


@dataclass
class ObjectiveReport:
    msso: float
    mco: float
    ratio: float
    d_min: float
    d_quantile: float
    n_inf: int

    def to_dict(self):
        return asdict(self)


def objective_report(F, C):
    t = verify_theorem1(F, C)
    s = d_statistics(F, C)
    return ObjectiveReport(t.msso, t.mco, t.ratio, s.min, s.quantile, s.n_inf)


@dataclass
class StableReport:
    count: int
    fraction: float
    stable: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def stable_sample_count(F_free, F_full, C_free, C_full=None):
    """Samples whose nearest centroid is the same under label-free and
    label-aware similarity.

    Both feature sets are scored against the label-free centroids unless
    ``C_full`` is given. ``lower``/``upper`` bound the label-aware over
    label-free ``|inner product|`` ratio per sample, so
    ``|<G_j, C_c>| >= lower * alpha`` and ``|<G_j, C_i>| <= upper * beta`` for
    ``i != c``.
    """
    F_free, F_full = np.atleast_2d(F_free), np.atleast_2d(F_full)
    if F_free.shape != F_full.shape:
        raise ValueError(f"feature shapes differ: {F_free.shape} vs {F_full.shape}")
    _check_layout(F_free, C_free)
    assign_free = kmeans_assign(F_free, C_free)
    if C_full is None:
        C_full = C_free
    _check_layout(F_full, C_full)
    assign_full = kmeans_assign(F_full, C_full)
    stable = assign_free == assign_full
    ip_free = np.abs(F_free @ C_free.T)
    ip_full = np.abs(F_full @ C_full.T)
    rows = np.arange(len(F_free))
    alpha = ip_free[rows, assign_free]
    masked = ip_free.copy()
    masked[rows, assign_free] = -np.inf
    beta = masked.max(axis=1) if C_free.shape[0] > 1 else np.zeros(len(rows))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = ip_full / ip_free
    lower = np.nanmin(np.where(np.isnan(r), np.inf, r), axis=1)
    upper = np.nanmax(np.where(np.isnan(r), -np.inf, r), axis=1)
    count = int(stable.sum())
    return StableReport(count, count / len(rows), stable, alpha, beta, lower, upper)


def auc_weights_vs_clean(weights, clean_flags):
    """Probability that a random clean sample outweighs a random noisy one (ties 1/2)."""
    w = np.asarray(weights, dtype=np.float64)
    f = np.asarray(clean_flags).astype(bool)
    if w.shape != f.shape:
        raise ValueError("weights and flags differ in length")
    n1, n0 = int(f.sum()), int((~f).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("need at least one clean and one noisy sample")
    ranks = rankdata(w)
    return float((ranks[f].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def decision_margins(params, X):
    """First-order input-space distance to the top-2 decision boundary."""
    X = np.atleast_2d(X)
    trace = nn.forward(params, X)
    z = trace.logits
    order = np.argsort(-z, axis=1, kind="stable")
    top1, top2 = order[:, 0], order[:, 1]
    rows = np.arange(len(X))
    gap = z[rows, top1] - z[rows, top2]
    seed = np.zeros_like(z)
    seed[rows, top1] = 1.0
    seed[rows, top2] = -1.0
    grad = nn.input_gradient(params, trace, seed)
    gn = np.linalg.norm(grad, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(gap == 0.0, 0.0, np.where(gn == 0.0, np.inf, gap / gn))


def boundary_subset(params, X, k):
    """Indices of the ``k`` rows closest to the decision boundary."""
    if k > len(X):
        raise ValueError(f"k={k} exceeds {len(X)} samples")
    m = decision_margins(params, X)
    return np.sort(np.argsort(m, kind="stable")[:k])


def evaluate_accuracy(params, dataset, split):
    idx = dataset.indices(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    pred = nn.predict(params, dataset.features[idx])
    return float(np.mean(pred == dataset.clean_labels[idx]))


def mean_std(values):
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
