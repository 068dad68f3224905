"""Clustering inputs: checkpoint sampling, RBC last-layer features, GBC
importance-sampled layer gradients, and the per-checkpoint block assembly."""
from dataclasses import dataclass, field
import json
import struct

import numpy as np

from . import nn

METHODS = ("rbc", "gbc")
FEATURE_MAGIC = b"MSFEAT01"


@dataclass
class FeatureLayout:
    checkpoints: list
    block_dims: list
    method: str
    label_mode: str
    plans: list = field(default_factory=list)

    @property
    def dim(self):
        return int(sum(self.block_dims))

    def to_dict(self):
        return {"checkpoints": [int(c) for c in self.checkpoints],
                "block_dims": [int(d) for d in self.block_dims],
                "method": self.method, "label_mode": self.label_mode,
                "plans": [p.to_dict() for p in self.plans]}


@dataclass
class FeatureSet:
    """Row j is the concatenated feature ``G_j`` of sample ``indices[j]``."""
    matrix: np.ndarray
    layout: FeatureLayout
    indices: np.ndarray = None

    def __post_init__(self):
        if self.indices is None:
            self.indices = np.arange(len(self.matrix))
        if self.matrix.shape[1] != self.layout.dim:
            raise ValueError(f"feature width {self.matrix.shape[1]} != layout {self.layout.dim}")

    def __len__(self):
        return len(self.matrix)

    def rows(self, positions):
        return FeatureSet(self.matrix[positions], self.layout, self.indices[positions])


# checkpoint sampling ---------------------------------------------------------

def sample_checkpoints(store, k=None, mode="uniform", stride=20, seed=0):
    """Epochs after the best-validation epoch: ``k`` drawn uniformly without
    replacement, or every ``stride``-th epoch (first ``k`` of them if given)."""
    t_star = store.best_epoch
    after = [e for e in store.epochs if e > t_star]
    if not after:
        raise ValueError(f"no checkpoints after the best epoch {t_star}")
    if mode == "stride":
        picks = [e for e in after if (e - t_star) % stride == 0]
        if k is not None:
            if k > len(picks):
                raise ValueError(f"asked for {k} strided checkpoints, {len(picks)} available")
            picks = picks[:k]
        return picks
    if mode != "uniform":
        raise ValueError(f"unknown checkpoint mode {mode!r}")
    if k is None or k > len(after):
        raise ValueError(f"asked for {k} checkpoints, {len(after)} available after epoch {t_star}")
    rng = np.random.default_rng(seed)
    return sorted(int(e) for e in rng.choice(after, size=k, replace=False))


# RBC -------------------------------------------------------------------------

def rbc_features(params, X, y=None, label_mode="full", include_bias=False):
    """``flatten(A_j x~_j^T)`` per row, with ``A_j`` the logit-gradient (or its
    label-free part) and ``x~_j`` the input of the last linear layer. Forward only."""
    trace = nn.forward(params, np.atleast_2d(X))
    a = nn.last_layer_delta(trace.logits, y, label_mode)
    xt = trace.last_input
    block = (a[:, :, None] * xt[:, None, :]).reshape(len(a), -1)
    if include_bias:
        block = np.concatenate([block, a], axis=1)
    return block


def rbc_feature(params, x, y=None, label_mode="full", include_bias=False):
    yy = None if y is None else np.atleast_1d(y)
    return rbc_features(params, np.atleast_2d(x), yy, label_mode, include_bias)[0]


# GBC -------------------------------------------------------------------------

@dataclass
class LayerSamplingPlan:
    masses: np.ndarray
    total: float
    draws: np.ndarray
    scales: np.ndarray

    @property
    def probabilities(self):
        return self.masses / self.total

    def to_dict(self):
        return {"masses": self.masses.tolist(), "total": self.total,
                "draws": self.draws.tolist(), "scales": self.scales.tolist()}


def layer_importance(params, X, y=None, label_mode="full", include_bias=True):
    """``A_l = || mean_j grad_l f_j ||_F^2`` per layer and their total."""
    if len(X) == 0:
        raise ValueError("empty dataset")
    g = nn.mean_gradient(params, X, y, label_mode)
    masses = np.array([np.vdot(v, v) for v in
                       (g.layer_vector(l, include_bias) for l in range(params.n_layers))])
    total = float(masses.sum())
    if total <= 0.0:
        raise ValueError("all layer importance masses are zero")
    return masses, total


def make_plan(masses, total, r=5, seed=0, scaled=True):
    """Draw ``r`` layers with replacement, probability ``A_l / A``; each draw is
    scaled by ``sqrt(A / (r * A_l))`` so block inner products are unbiased."""
    rng = np.random.default_rng(seed)
    p = masses / total
    draws = rng.choice(len(masses), size=r, replace=True, p=p)
    if scaled:
        scales = np.sqrt(total / (r * masses[draws]))
    else:
        scales = np.ones(r)
    return LayerSamplingPlan(np.asarray(masses, dtype=np.float64), float(total), draws, scales)


def gbc_features(params, plan, X, y=None, label_mode="full", include_bias=True, compact=False):
    """Scaled gradients of the drawn layers, one block per draw.

    ``compact`` stores a layer drawn several times once, scaled by the root sum
    of its squared draw scales; every inner product is unchanged.
    """
    if len(plan.masses) != params.n_layers:
        raise ValueError(f"plan has {len(plan.masses)} layers, network has {params.n_layers}")
    layers = sorted(set(plan.draws.tolist()))
    grads = nn.per_sample_layer_gradients(params, X, y, label_mode, layers=layers,
                                          include_bias=include_bias)
    if compact:
        sq = {l: 0.0 for l in layers}
        for l, s in zip(plan.draws, plan.scales):
            sq[l] += s * s
        return np.concatenate([np.sqrt(sq[l]) * grads[l] for l in layers], axis=1)
    return np.concatenate([s * grads[l] for l, s in zip(plan.draws, plan.scales)], axis=1)


def gbc_feature(params, plan, x, y=None, label_mode="full", include_bias=True):
    yy = None if y is None else np.atleast_1d(y)
    return gbc_features(params, plan, np.atleast_2d(x), yy, label_mode, include_bias)[0]


# assembly --------------------------------------------------------------------

def assemble_features(store, checkpoints, X, y=None, method="rbc", label_mode="full", r=5,
                      seed=0, scaled=True, rbc_bias=False, gbc_bias=True,
                      importance_X=None, importance_y=None, compact=False, chunk=2048):
    """Stack per-checkpoint blocks, in checkpoint order, into one row per sample.

    GBC plans are built once per checkpoint from ``importance_X`` (defaults to
    ``X``) and shared by every row.
    """
    if method not in METHODS:
        raise ValueError(f"unknown feature method {method!r}")
    X = np.atleast_2d(X)
    imp_X = X if importance_X is None else importance_X
    imp_y = y if importance_X is None else importance_y
    rng = np.random.default_rng(seed)
    blocks, dims, plans = [], [], []
    for t in checkpoints:
        p = store[t]
        if method == "rbc":
            blk = _chunked(lambda a, b: rbc_features(p, a, b, label_mode, rbc_bias), X, y, chunk)
        else:
            masses, total = layer_importance(p, imp_X, imp_y, label_mode, gbc_bias)
            plan = make_plan(masses, total, r, int(rng.integers(2 ** 31)), scaled)
            plans.append(plan)
            blk = _chunked(lambda a, b: gbc_features(p, plan, a, b, label_mode, gbc_bias,
                                                     compact), X, y, chunk)
        blocks.append(blk)
        dims.append(blk.shape[1])
    layout = FeatureLayout(list(checkpoints), dims, method, label_mode, plans)
    return FeatureSet(np.concatenate(blocks, axis=1), layout)


def _chunked(fn, X, y, chunk):
    out = []
    for i in range(0, len(X), chunk):
        out.append(fn(X[i:i + chunk], None if y is None else y[i:i + chunk]))
    return np.concatenate(out, axis=0)


# dumps -----------------------------------------------------------------------

def save_features(path, fs):
    header = {"N": len(fs), "dim": fs.layout.dim, **fs.layout.to_dict(),
              "indices": [int(i) for i in fs.indices]}
    raw = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(fs.matrix, dtype="<f8").tobytes())


def load_features(path):
    with open(path, "rb") as fh:
        if fh.read(8) != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature dump")
        (n_head,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n_head).decode())
        body = fh.read()
    n, d = header["N"], header["dim"]
    if len(body) != 8 * n * d:
        raise ValueError(f"{path}: expected {8 * n * d} payload bytes, found {len(body)}")
    matrix = np.frombuffer(body, dtype="<f8").reshape(n, d).astype(np.float64)
    plans = [LayerSamplingPlan(np.array(p["masses"]), p["total"], np.array(p["draws"]),
                               np.array(p["scales"])) for p in header["plans"]]
    layout = FeatureLayout(header["checkpoints"], header["block_dims"], header["method"],
                           header["label_mode"], plans)
    return FeatureSet(matrix, layout, np.asarray(header["indices"], dtype=np.int64))
