"""Hot inner loops, each in a numba flavour and a numpy flavour.

The public names at the bottom resolve to one flavour at import time
(see :mod:`metasel._accel`). Both flavours are importable directly so the
benchmark and the equivalence tests can call them side by side.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# weighted K-means assignment -------------------------------------------------

def assign_weighted_np(F, C):
    """Argmax of ``|<F_j, C_i>| / ||F_j||`` over centroids; ties go to the lower index.

    Rows of ``F`` with zero norm get cluster 0 and score 0.
    Returns ``(assignment, score)``.
    """
    fnorm = np.sqrt(np.einsum("ij,ij->i", F, F))
    scores = np.abs(F @ C.T)
    assign = np.argmax(scores, axis=1)
    best = scores[np.arange(F.shape[0]), assign]
    zero = fnorm == 0.0
    safe = np.where(zero, 1.0, fnorm)
    best = np.where(zero, 0.0, best / safe)
    assign = np.where(zero, 0, assign)
    return assign.astype(np.int64), best


@njit
def assign_weighted_nb(F, C):
    # products through BLAS, then one fused pass for norms and argmax
    S = np.dot(F, np.ascontiguousarray(C.T))
    n, d = F.shape
    m = C.shape[0]
    assign = np.zeros(n, dtype=np.int64)
    best = np.zeros(n)
    for j in range(n):
        fn = 0.0
        for k in range(d):
            fn += F[j, k] * F[j, k]
        if fn == 0.0:
            continue
        top = -1.0
        arg = 0
        for i in range(m):
            s = abs(S[j, i])
            if s > top:
                top = s
                arg = i
        assign[j] = arg
        best[j] = top / np.sqrt(fn)
    return assign, best


# weighted K-means update -----------------------------------------------------

def centroid_sums_np(F, assignment, m):
    """Per-cluster ``sum G_j``, ``sum ||G_j||`` and member counts.

    Zero-norm rows count as members but add nothing to either sum.
    """
    fnorm = np.sqrt(np.einsum("ij,ij->i", F, F))
    sums = np.zeros((m, F.shape[1]))
    np.add.at(sums, assignment, F)
    weight = np.bincount(assignment, weights=fnorm, minlength=m).astype(np.float64)
    counts = np.bincount(assignment, minlength=m).astype(np.int64)
    return sums, weight, counts


@njit
def centroid_sums_nb(F, assignment, m):
    n, d = F.shape
    sums = np.zeros((m, d))
    weight = np.zeros(m)
    counts = np.zeros(m, dtype=np.int64)
    for j in range(n):
        c = assignment[j]
        counts[c] += 1
        fn = 0.0
        for k in range(d):
            fn += F[j, k] * F[j, k]
        if fn == 0.0:
            continue
        weight[c] += np.sqrt(fn)
        for k in range(d):
            sums[c, k] += F[j, k]
    return sums, weight, counts


# per-sample gradient inner products -------------------------------------------

def sample_inner_np(delta, act, gw, gb):
    """``<gw, delta_j act_j^T> + <gb, delta_j>`` for every row j, without forming the outer products."""
    return np.einsum("bo,bo->b", delta @ gw, act) + delta @ gb


@njit
def sample_inner_nb(delta, act, gw, gb):
    P = np.dot(delta, gw)
    b, i_dim = act.shape
    o = delta.shape[1]
    out = np.zeros(b)
    for j in range(b):
        s = 0.0
        for c in range(i_dim):
            s += P[j, c] * act[j, c]
        for r in range(o):
            s += delta[j, r] * gb[r]
        out[j] = s
    return out


def weighted_outer_np(delta, act, w):
    """``sum_j w_j delta_j act_j^T`` and ``sum_j w_j delta_j``."""
    wd = delta * w[:, None]
    return wd.T @ act, wd.sum(axis=0)


@njit
def weighted_outer_nb(delta, act, w):
    b, o = delta.shape
    wdT = np.empty((o, b))
    gb = np.zeros(o)
    for j in range(b):
        for r in range(o):
            v = w[j] * delta[j, r]
            wdT[r, j] = v
            gb[r] += v
    return np.dot(wdT, act), gb


if USE_NUMBA:
    assign_weighted = assign_weighted_nb
    centroid_sums = centroid_sums_nb
    sample_inner = sample_inner_nb
    weighted_outer = weighted_outer_nb
else:
    assign_weighted = assign_weighted_np
    centroid_sums = centroid_sums_np
    sample_inner = sample_inner_np
    weighted_outer = weighted_outer_np
