"""Weighted K-means over gradient features and the meta-sample selection driver."""
from dataclasses import dataclass, field
import logging
import math

import numpy as np

from . import kernels

log = logging.getLogger(__name__)


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignment: np.ndarray
    n_iter: int
    objective: float                 # sum_j |<G_j, C_a(j)>|
    mco: float                       # sum_j sum_i |<G_j, C_i>|
    empty: np.ndarray = None         # bool per cluster
    objective_trace: list = field(default_factory=list)
    assign_trace: list = field(default_factory=list)   # (before, after) per assignment step

    @property
    def n_clusters(self):
        return len(self.centroids)

    @property
    def n_empty(self):
        return 0 if self.empty is None else int(self.empty.sum())


def _norms(A):
    return np.sqrt(np.einsum("ij,ij->i", A, A))


def weighted_similarity(g, c):
    """``||c|| * |cos(g, c)|``, i.e. ``|<g, c>| / ||g||``; zero ``g`` scores 0."""
    g = np.asarray(g, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if g.shape != c.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {c.shape}")
    cn = np.linalg.norm(c)
    if cn == 0.0:
        raise ValueError("zero centroid")
    gn = np.linalg.norm(g)
    if gn == 0.0:
        return 0.0
    return float(abs(np.dot(g, c)) / gn)


def similarity_matrix(F, C):
    """``S[j, i] = weighted_similarity(F[j], C[i])`` (zero rows of F give 0)."""
    fn = _norms(F)
    S = np.abs(F @ C.T)
    return S / np.where(fn == 0.0, 1.0, fn)[:, None]


def kmeans_assign(F, C):
    """Cluster index per row: argmax of weighted similarity, lowest index on ties."""
    a, _ = kernels.assign_weighted(np.ascontiguousarray(F, dtype=np.float64),
                                   np.ascontiguousarray(C, dtype=np.float64))
    return a


def assigned_similarity(F, C, assignment):
    """``sum_j weighted_similarity(F_j, C_a(j))``."""
    return float(similarity_matrix(F, C)[np.arange(len(F)), assignment].sum())


def kmeans_update(F, assignment, m=None, previous=None):
    """``C_i = sum_{j in i} G_j / sum_{j in i} ||G_j||``.

    Returns ``(centroids, empty)``. Empty clusters keep their ``previous``
    centroid (zeros if none given).
    """
    F = np.ascontiguousarray(F, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    m = int(assignment.max()) + 1 if m is None else m
    sums, weight, counts = kernels.centroid_sums(F, assignment, m)
    empty = counts == 0
    bad = (~empty) & (weight == 0.0)
    if bad.any():
        raise ValueError(f"clusters {np.flatnonzero(bad).tolist()} only hold zero-norm features")
    C = np.zeros((m, F.shape[1])) if previous is None else np.array(previous, dtype=np.float64)
    live = ~empty
    C[live] = sums[live] / weight[live][:, None]
    return C, empty


def _objectives(F, C, assignment):
    ip = np.abs(F @ C.T)
    return float(ip[np.arange(len(F)), assignment].sum()), float(ip.sum())


def init_centroids(F, m, rng):
    """``m`` distinct nonzero rows drawn uniformly, normalised to unit length."""
    nz = np.flatnonzero(_norms(F) > 0.0)
    if len(nz) < m:
        raise ValueError(f"need {m} nonzero features, have {len(nz)}")
    pick = rng.choice(nz, size=m, replace=False)
    C = F[pick].copy()
    return C / _norms(C)[:, None]


def weighted_kmeans(F, m, seed=0, max_iters=200, tol=0.0):
    """Alternate assignment and update from a seeded random start."""
    F = np.ascontiguousarray(F, dtype=np.float64)
    if not np.isfinite(F).all():
        raise ValueError("non-finite features")
    if not 1 <= m <= len(F):
        raise ValueError(f"need 1 <= m <= N, got m={m}, N={len(F)}")
    rng = np.random.default_rng(seed)
    C = init_centroids(F, m, rng)
    assignment = kmeans_assign(F, C)
    empty = np.bincount(assignment, minlength=m) == 0
    obj_trace, assign_trace = [], []
    prev_obj = None
    it = 0
    for it in range(1, max_iters + 1):
        C, empty = kmeans_update(F, assignment, m, previous=C)
        before = assigned_similarity(F, C, assignment)
        new_assignment = kmeans_assign(F, C)
        after = assigned_similarity(F, C, new_assignment)
        assign_trace.append((before, after))
        obj, _ = _objectives(F, C, new_assignment)
        obj_trace.append(obj)
        changed = not np.array_equal(new_assignment, assignment)
        assignment = new_assignment
        if not changed:
            break
        if prev_obj is not None and tol > 0 and abs(obj - prev_obj) < tol:
            break
        prev_obj = obj
    # centroids consistent with the final partition
    C, empty = kmeans_update(F, assignment, m, previous=C)
    obj, mco = _objectives(F, C, assignment)
    return ClusterModel(C, assignment, it, obj, mco, empty, obj_trace, assign_trace)


def kmeans_with_restart(F, m, seed=0, max_iters=200, tol=0.0):
    """Rerun with ``m - n_empty`` clusters until none is empty."""
    while True:
        if m < 1:
            raise ValueError("cluster count reached 0")
        model = weighted_kmeans(F, m, seed, max_iters, tol)
        if model.n_empty == 0:
            return model
        log.debug("restarting k-means: %d of %d clusters empty", model.n_empty, m)
        m -= model.n_empty


def extract_meta_samples(model, F):
    """Per cluster, the member with the highest weighted similarity to its
    centroid (lowest row index on ties). Returns row positions into ``F``."""
    if model.n_empty:
        raise ValueError("model has empty clusters")
    S = similarity_matrix(F, model.centroids)
    picks = []
    for i in range(model.n_clusters):
        members = np.flatnonzero(model.assignment == i)
        s = S[members, i]
        picks.append(int(members[np.argmax(s)]))
    return np.array(picks, dtype=np.int64)


def prune_near_existing(F, meta_F, keep_fraction=0.5):
    """Drop the ``1 - keep_fraction`` share of rows most similar to any meta
    feature. Returns surviving row positions, sorted."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    n = len(F)
    n_keep = int(math.ceil(keep_fraction * n - 1e-9))
    if n_keep < 1:
        raise ValueError("no candidates survive pruning")
    if keep_fraction == 1.0 or len(meta_F) == 0:
        return np.arange(n)
    meta_F = np.asarray(meta_F, dtype=np.float64)
    live = _norms(meta_F) > 0.0
    score = similarity_matrix(F, meta_F[live]).max(axis=1) if live.any() else np.zeros(n)
    order = np.argsort(-score, kind="stable")
    return np.sort(order[n - n_keep:])


# plain K-means baseline ---------------------------------------------------------

def euclidean_kmeans(F, m, seed=0, max_iters=200):
    """Lloyd's algorithm with the same seeded initial rows (unnormalised)."""
    F = np.asarray(F, dtype=np.float64)
    rng = np.random.default_rng(seed)
    C = F[rng.choice(len(F), size=m, replace=False)].copy()
    assignment = None
    for _ in range(max_iters):
        d2 = (F * F).sum(1)[:, None] - 2 * F @ C.T + (C * C).sum(1)[None, :]
        new = np.argmin(d2, axis=1)
        if assignment is not None and np.array_equal(new, assignment):
            break
        assignment = new
        for i in range(m):
            members = assignment == i
            if members.any():
                C[i] = F[members].mean(axis=0)
    return C, assignment


def euclidean_nearest_members(F, C, assignment):
    picks = []
    for i in range(len(C)):
        members = np.flatnonzero(assignment == i)
        if len(members) == 0:
            continue
        d = ((F[members] - C[i]) ** 2).sum(axis=1)
        picks.append(int(members[np.argmin(d)]))
    return np.array(picks, dtype=np.int64)
