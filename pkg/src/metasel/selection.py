"""Meta-sample selection: warm-up, featurise, prune, cluster, extract, re-train.

Baseline selectors (random, certain, uncertain, plain Euclidean K-means) and the
fine-tuning variant plug into the same driver.
"""
from dataclasses import dataclass, field, replace
import csv
import logging

import numpy as np

from . import cluster, features, nn, reweight

log = logging.getLogger(__name__)

SELECTORS = ("rbc", "gbc", "random", "certain", "uncertain", "plain_kmeans", "finetune")


@dataclass
class SelectionConfig:
    method: str = "rbc"
    budget: int = 20
    m0: int = 10
    k_checkpoints: int = 3
    r_draws: int = 5
    keep_fraction: float = 0.5
    per_round: int = 0              # 0: fill the whole budget in one round
    label_mode: str = "label_free"
    checkpoint_mode: str = "uniform"
    stride: int = 20
    scaled: bool = True
    compact: bool = True
    max_iters: int = 200

    def __post_init__(self):
        if self.method not in SELECTORS:
            raise ValueError(f"method must be one of {SELECTORS}")
        if self.budget < self.m0:
            raise ValueError("budget must be >= m0")
        if self.label_mode not in ("full", "label_free"):
            raise ValueError("label_mode must be 'full' or 'label_free'")


@dataclass
class SelectionRound:
    surviving: np.ndarray
    chosen: np.ndarray
    cumulative: np.ndarray
    clusters: np.ndarray = None          # cluster id of each chosen sample
    similarity: np.ndarray = None        # weighted similarity of each chosen sample
    features: object = None              # FeatureSet of the survivors
    model: object = None                 # ClusterModel


@dataclass
class SelectionResult:
    meta_indices: np.ndarray
    rounds: list
    artifacts: list = field(default_factory=list)   # warm-up first, then one per round

    @property
    def final(self):
        return self.artifacts[-1]


def entropy(params, X):
    p = nn.softmax(nn.forward(params, np.atleast_2d(X)).logits)
    return -(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=1)


def baseline_select(kind, candidates, budget, seed=0, params=None, X=None, features_matrix=None):
    """Pick ``budget`` of ``candidates`` (dataset indices) with a baseline rule."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if budget > len(candidates):
        raise ValueError(f"budget {budget} exceeds {len(candidates)} candidates")
    if kind in ("random", "finetune"):
        rng = np.random.default_rng(seed)
        return np.sort(rng.choice(candidates, size=budget, replace=False))
    if kind in ("certain", "uncertain"):
        h = entropy(params, X)
        order = np.argsort(h if kind == "certain" else -h, kind="stable")
        return np.sort(candidates[order[:budget]])
    if kind == "plain_kmeans":
        C, a = cluster.euclidean_kmeans(features_matrix, budget, seed)
        return np.sort(candidates[cluster.euclidean_nearest_members(features_matrix, C, a)])
    raise ValueError(f"unknown baseline {kind!r}")


def pick_checkpoints(store, k, mode="uniform", stride=20, seed=0):
    """Checkpoints after the best epoch; falls back to the last epoch(s) when
    fewer than requested remain."""
    after = [e for e in store.epochs if e > store.best_epoch]
    if not after:
        return [store.last_epoch]
    if mode == "uniform" and k > len(after):
        return after
    try:
        return features.sample_checkpoints(store, k, mode, stride, seed)
    except ValueError:
        return after[-k:]


def featurize(dataset, store, rows, cfg, seed, label_rows=None):
    """Feature rows for ``rows`` (dataset indices) from the checkpoint store.

    ``label_rows`` supplies the labels in full mode (ignored for label-free).
    """
    method = "rbc" if cfg.method in ("rbc", "plain_kmeans") else cfg.method
    if method not in features.METHODS:
        raise ValueError(f"{cfg.method!r} does not use gradient features")
    ckpts = pick_checkpoints(store, cfg.k_checkpoints, cfg.checkpoint_mode, cfg.stride, seed)
    y = None if cfg.label_mode == "label_free" else label_rows
    fs = features.assemble_features(store, ckpts, dataset.features[rows], y, method,
                                    cfg.label_mode, cfg.r_draws, seed, cfg.scaled,
                                    compact=cfg.compact)
    fs.indices = np.asarray(rows, dtype=np.int64)
    return fs


def full_mode_labels(dataset, rows, meta):
    """Observed labels for ordinary rows, clean labels for meta samples."""
    y = dataset.observed_labels[rows].copy()
    is_meta = np.isin(rows, meta)
    y[is_meta] = dataset.clean_labels[rows][is_meta]
    return y


def select_from_features(Fc, Fm, candidates, need, cfg, seed, layout=None):
    """Prune candidates near the meta features, cluster the rest, extract one
    sample per cluster. ``Fc`` rows align with ``candidates`` (dataset indices)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    surv = cluster.prune_near_existing(Fc, Fm, cfg.keep_fraction)
    if len(surv) < need:
        raise ValueError(f"only {len(surv)} candidates survive pruning, need {need}")
    F = Fc[surv]
    kept = candidates[surv]
    surv_fs = None if layout is None else features.FeatureSet(F, layout, kept)
    if cfg.method == "plain_kmeans":
        chosen = baseline_select("plain_kmeans", kept, need, seed, features_matrix=F)
        return SelectionRound(kept, chosen, None, features=surv_fs)
    model = cluster.kmeans_with_restart(F, need, seed, cfg.max_iters)
    picks = cluster.extract_meta_samples(model, F)
    sim = cluster.similarity_matrix(F[picks], model.centroids)[np.arange(len(picks)),
                                                               np.arange(len(picks))]
    return SelectionRound(kept, kept[picks], None, clusters=np.arange(len(picks)),
                          similarity=sim, features=surv_fs, model=model)


def cluster_round(dataset, store, candidates, meta, need, cfg, seed):
    """One featurise / prune / cluster / extract pass; returns a SelectionRound."""
    rows = np.concatenate([candidates, meta])
    fs = featurize(dataset, store, rows, cfg, seed, full_mode_labels(dataset, rows, meta))
    nc = len(candidates)
    return select_from_features(fs.matrix[:nc], fs.matrix[nc:], candidates, need, cfg, seed,
                                fs.layout)


def run_selection_pipeline(dataset, train_cfg, cfg, seed=0, warm=None):
    """Warm-up with ``m0`` random meta samples, then add samples round by round
    until ``budget`` is reached, re-training after every round.

    ``warm`` may pass a precomputed ``(artifacts, meta_indices)`` warm-up.
    """
    train = dataset.indices("train")
    if cfg.budget >= len(train):
        raise ValueError(f"budget {cfg.budget} unreachable with {len(train)} train samples")
    if warm is None:
        warm = reweight.warmup(train_cfg, dataset, cfg.m0, seed)
    art, meta = warm
    result = SelectionResult(np.asarray(meta, dtype=np.int64), [], [art])
    per_round = cfg.per_round or cfg.budget - cfg.m0
    final_cfg = replace(train_cfg, meta_only=True) if cfg.method == "finetune" else train_cfg
    rnd = 0
    while len(result.meta_indices) < cfg.budget:
        need = min(per_round, cfg.budget - len(result.meta_indices))
        candidates = np.setdiff1d(train, result.meta_indices)
        if len(candidates) < need:
            raise ValueError(f"budget unreachable: {len(candidates)} candidates, need {need}")
        round_seed = seed * 1000 + rnd
        if cfg.method in ("rbc", "gbc", "plain_kmeans"):
            sel = cluster_round(dataset, art.store, candidates, result.meta_indices, need, cfg,
                                round_seed)
        else:
            X = dataset.features[candidates]
            chosen = baseline_select(cfg.method, candidates, need, round_seed, art.params, X)
            sel = SelectionRound(candidates, chosen, None)
        if len(sel.chosen) == 0:
            raise ValueError("selection round produced no samples")
        meta = np.union1d(result.meta_indices, sel.chosen)
        sel.cumulative = meta
        result.meta_indices = meta
        result.rounds.append(sel)
        art = reweight.run_meta_reweighting(final_cfg, dataset, meta)
        result.artifacts.append(art)
        log.info("round %d (%s): +%d -> %d meta, test acc %.4f", rnd, cfg.method,
                 len(sel.chosen), len(meta), art.accuracy("test"))
        rnd += 1
    return result


def save_selection(path, result, dataset_ids=None):
    """``round, sample_id, cluster_id, similarity`` rows for every chosen sample."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "sample_id", "cluster_id", "similarity"])
        for r, sel in enumerate(result.rounds):
            for k, idx in enumerate(sel.chosen):
                sid = int(idx if dataset_ids is None else dataset_ids[idx])
                cid = "" if sel.clusters is None else int(sel.clusters[k])
                sim = "" if sel.similarity is None else repr(float(sel.similarity[k]))
                w.writerow([r, sid, cid, sim])


def load_selection(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"round": int(r["round"]), "sample_id": int(r["sample_id"]),
                         "cluster_id": None if r["cluster_id"] == "" else int(r["cluster_id"]),
                         "similarity": None if r["similarity"] == "" else float(r["similarity"])})
    return rows
