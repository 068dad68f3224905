"""Bi-level meta re-weighting: virtual step, weight update from gradient inner
products, weighted parameter step; plus the warm-up run."""
from dataclasses import dataclass, field, asdict, replace
import csv
import json
import logging
import os

import numpy as np

from . import nn
from .errors import DivergenceError

log = logging.getLogger(__name__)

WEIGHT_RULES = ("shu", "ren")


@dataclass
class TrainConfig:
    lr: float = 0.1
    meta_lr: float = 100.0
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_size: int = 100          # 0 means full batch
    epochs: int = 50
    weight_rule: str = "shu"
    weight_init: float = 0.5
    seed: int = 0
    hidden: tuple = (16, 16)
    activation: str = "relu"
    meta_only: bool = False
    divergence_threshold: float = 1e6

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lr <= 0 or self.meta_lr < 0:
            raise ValueError("learning rates must be positive (meta_lr may be 0)")
        if self.batch_size < 0 or self.epochs < 1:
            raise ValueError("batch_size must be >= 0 and epochs >= 1")
        if self.weight_rule not in WEIGHT_RULES:
            raise ValueError(f"weight_rule must be one of {WEIGHT_RULES}")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class RunArtifacts:
    params: nn.NetworkParams
    store: nn.CheckpointStore
    pool: np.ndarray                 # dataset indices of the re-weighted samples
    meta_indices: np.ndarray
    weights: np.ndarray              # final weight per pool sample
    weight_trajectory: np.ndarray    # (epochs, len(pool))
    metrics: list = field(default_factory=list)

    def accuracy(self, split, epoch=None):
        epoch = self.store.last_epoch if epoch is None else epoch
        for row in self.metrics:
            if row["epoch"] == epoch and row["split"] == split:
                return row["accuracy"]
        raise KeyError((epoch, split))


# single operations -----------------------------------------------------------

def virtual_update(params, X, y, weights, lr):
    """``theta - (lr/n) * sum_j w_j grad_j``; ``params`` is untouched."""
    trace, deltas = nn.batch_deltas(params, X, y)
    g = nn.weighted_mean_gradient(params, trace, deltas, weights)
    if not g.is_finite():
        raise FloatingPointError("non-finite gradient in virtual update")
    return params.add_scaled(g, -lr)


def meta_weight_gradient(virtual_params, meta_X, meta_y, params, X, y, lr, meta_lr):
    """Additive weight update per batch sample:
    ``(meta_lr * lr) / (n * M) * sum_i <grad meta_i(virtual), grad_j(params)>``."""
    if len(meta_X) == 0:
        raise ValueError("empty meta set")
    meta_grad = nn.mean_gradient(virtual_params, meta_X, meta_y)
    trace, deltas = nn.batch_deltas(params, X, y)
    n = trace.logits.shape[0]
    return meta_lr * lr / n * nn.sample_inner_products(params, trace, deltas, meta_grad)


def apply_weight_update_shu(weights, delta):
    return np.clip(np.asarray(weights, dtype=np.float64) + delta, 0.0, 1.0)


def apply_weight_update_ren(delta):
    """Clip at zero and normalise over the batch; all-zero falls back to uniform."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.size == 0:
        raise ValueError("empty batch")
    w = np.maximum(delta, 0.0)
    total = w.sum()
    if total <= 0.0:
        return np.full(len(w), 1.0 / len(w))
    return w / total


def weighted_step(params, X, y, weights, lr, momentum=0.0, weight_decay=0.0, state=None):
    """Momentum-SGD step on ``(1/n) * sum_j w_j grad_j``."""
    trace, deltas = nn.batch_deltas(params, X, y)
    g = nn.weighted_mean_gradient(params, trace, deltas, weights)
    return nn.sgd_step(params, g, lr, momentum, weight_decay, state)


# training loop ---------------------------------------------------------------

def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    size = n if batch_size in (0, None) else batch_size
    return [perm[i:i + size] for i in range(0, n, size)]


def _accuracy(params, X, y):
    if len(X) == 0:
        return float("nan")
    return float(np.mean(nn.predict(params, X) == y))


def _step(params, state, Xb, yb, wb, Xm, ym, cfg):
    """One outer iteration on a mini-batch; returns (params, state, new_weights, loss)."""
    trace, deltas = nn.batch_deltas(params, Xb, yb)
    loss = float(np.mean(nn.cross_entropy(trace.logits, yb)))
    if not np.isfinite(loss) or loss > cfg.divergence_threshold:
        raise DivergenceError(f"batch loss {loss!r} exceeds divergence guard")
    n = len(yb)
    if cfg.meta_lr == 0.0 or len(Xm) == 0:
        delta = np.zeros(n)
    else:
        if cfg.weight_rule == "ren":
            virtual = params
        else:
            virtual = params.add_scaled(nn.weighted_mean_gradient(params, trace, deltas, wb),
                                        -cfg.lr)
        meta_grad = nn.mean_gradient(virtual, Xm, ym)
        delta = cfg.meta_lr * cfg.lr / n * nn.sample_inner_products(params, trace, deltas,
                                                                    meta_grad)
    if cfg.weight_rule == "shu":
        w_new = apply_weight_update_shu(wb, delta)
    else:
        w_new = apply_weight_update_ren(delta)
    g = nn.weighted_mean_gradient(params, trace, deltas, w_new)
    params, state = nn.sgd_step(params, g, cfg.lr, cfg.momentum, cfg.weight_decay, state)
    return params, state, w_new, loss


def run_meta_reweighting(config, dataset, meta_indices, init=None):
    """Train on the train split minus ``meta_indices``, re-weighting against the
    meta samples (which use their clean labels). Checkpoints every epoch."""
    cfg = config
    meta_indices = np.asarray(sorted(int(i) for i in meta_indices), dtype=np.int64)
    train = dataset.indices("train")
    if not np.isin(meta_indices, train).all():
        raise ValueError("meta indices must come from the train split")
    if cfg.meta_only:
        pool = meta_indices
        Xp, yp = dataset.features[pool], dataset.clean_labels[pool]
        Xm = np.empty((0, dataset.dim))
        ym = np.empty(0, dtype=np.int64)
    else:
        pool = np.setdiff1d(train, meta_indices)
        Xp, yp = dataset.features[pool], dataset.observed_labels[pool]
        Xm, ym = dataset.features[meta_indices], dataset.clean_labels[meta_indices]
    if len(pool) == 0:
        raise ValueError("no training samples left to re-weight")

    sizes = [dataset.dim, *cfg.hidden, dataset.class_count]
    params = nn.init_params(sizes, cfg.activation, cfg.seed) if init is None else init.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    init_w = 1.0 if cfg.meta_only else cfg.weight_init
    weights = np.full(len(pool), init_w)
    if cfg.weight_rule == "ren" and not cfg.meta_only:
        weights[:] = 0.0
    state = None
    store = nn.CheckpointStore()
    trajectory = np.empty((cfg.epochs, len(pool)))
    metrics = []
    val = dataset.indices("validation")
    test = dataset.indices("test")
    step_cfg = replace(cfg, meta_lr=0.0, weight_rule="shu") if cfg.meta_only else cfg

    for epoch in range(1, cfg.epochs + 1):
        for b in _batches(len(pool), cfg.batch_size, rng):
            try:
                params, state, w_new, _ = _step(params, state, Xp[b], yp[b], weights[b],
                                                Xm, ym, step_cfg)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from exc
            weights[b] = w_new
        trajectory[epoch - 1] = weights
        accs = {
            "train": _accuracy(params, dataset.features[train], dataset.clean_labels[train]),
            "validation": _accuracy(params, dataset.features[val], dataset.clean_labels[val]),
            "test": _accuracy(params, dataset.features[test], dataset.clean_labels[test]),
        }
        for split_name, acc in accs.items():
            metrics.append({"epoch": epoch, "split": split_name, "accuracy": acc})
        v = accs["validation"]
        nn.checkpoint(store, epoch, params, -np.inf if np.isnan(v) else v)
    log.debug("run done: M=%d pool=%d test=%.4f", len(meta_indices), len(pool), accs["test"])
    return RunArtifacts(params, store, pool, meta_indices, weights.copy(), trajectory, metrics)


def warmup(config, dataset, m0, seed=0):
    """Meta re-weighting with ``m0`` uniformly drawn meta samples; returns
    ``(artifacts, meta_indices)``."""
    train = dataset.indices("train")
    if m0 < 1:
        raise ValueError("m0 must be >= 1")
    if m0 >= len(train):
        raise ValueError(f"m0={m0} leaves no training samples (train size {len(train)})")
    rng = np.random.default_rng(seed)
    meta = np.sort(rng.choice(train, size=m0, replace=False))
    return run_meta_reweighting(config, dataset, meta), meta


# serialisation ---------------------------------------------------------------

def save_run(directory, art, dataset_ids=None):
    os.makedirs(directory, exist_ok=True)
    ids = art.pool if dataset_ids is None else dataset_ids[art.pool]
    art.store.save(os.path.join(directory, "checkpoints.npz"))
    nn.save_params(os.path.join(directory, "final_params.npz"), art.params)
    with open(os.path.join(directory, "weights.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "sample_id", "weight"])
        for e, row in enumerate(art.weight_trajectory, start=1):
            for sid, val in zip(ids, row):
                w.writerow([e, int(sid), repr(float(val))])
    with open(os.path.join(directory, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "accuracy"])
        for m in art.metrics:
            w.writerow([m["epoch"], m["split"], repr(float(m["accuracy"]))])
    with open(os.path.join(directory, "run.json"), "w") as fh:
        json.dump({"pool": art.pool.tolist(), "meta_indices": art.meta_indices.tolist(),
                   "best_epoch": art.store.best_epoch}, fh)


def load_run(directory):
    with open(os.path.join(directory, "run.json")) as fh:
        info = json.load(fh)
    store = nn.CheckpointStore.load(os.path.join(directory, "checkpoints.npz"))
    params = nn.load_params(os.path.join(directory, "final_params.npz"))
    pool = np.asarray(info["pool"], dtype=np.int64)
    rows = {}
    with open(os.path.join(directory, "weights.csv"), newline="") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["epoch"]), []).append(float(r["weight"]))
    traj = np.array([rows[e] for e in sorted(rows)]).reshape(len(rows), len(pool))
    metrics = []
    with open(os.path.join(directory, "metrics.csv"), newline="") as fh:
        for r in csv.DictReader(fh):
            metrics.append({"epoch": int(r["epoch"]), "split": r["split"],
                            "accuracy": float(r["accuracy"])})
    return RunArtifacts(params, store, pool, np.asarray(info["meta_indices"], dtype=np.int64),
                        traj[-1].copy(), traj, metrics)
