"""Command-line entry point.

Every stage reads its predecessors' files from the output directory and
writes its own artifact plus a manifest entry::

    gen-data   -> dataset.csv
    corrupt    -> corrupted.csv, corruption.json
    warmup     -> warmup/
    featurize  -> features.bin
    select     -> selection.csv
    reweight   -> final/
    eval       -> eval.json
    verify     -> verify.json
    experiment -> results.csv, summary.csv, config.json

Sample ids in stage files are row positions in ``corrupted.csv``.
"""
import argparse
from dataclasses import replace
import json
import logging
import math
import os
import shutil
import sys

import numpy as np

from . import analysis, cluster, config, data, experiments, features, reweight, selection
from .errors import ConfigError, DivergenceError, MissingInputError

log = logging.getLogger("metasel")

CLUSTER_METHODS = ("rbc", "gbc", "plain_kmeans")
BOUNDARY_FRACTION = 0.2


class Stage:
    """Paths of the stage files under one output directory."""

    def __init__(self, out):
        self.out = out
        self.dataset = os.path.join(out, "dataset.csv")
        self.corrupted = os.path.join(out, "corrupted.csv")
        self.corruption = os.path.join(out, "corruption.json")
        self.warmup = os.path.join(out, "warmup")
        self.features = os.path.join(out, "features.bin")
        self.selection = os.path.join(out, "selection.csv")
        self.final = os.path.join(out, "final")
        self.eval = os.path.join(out, "eval.json")
        self.verify = os.path.join(out, "verify.json")

    def need(self, path, producer):
        if not os.path.exists(path):
            raise MissingInputError(f"missing input {path}; run '{producer}' first")
        return path


def _run_files(directory):
    return [os.path.join(directory, f) for f in sorted(os.listdir(directory))]


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


# stages ----------------------------------------------------------------------

def cmd_gen_data(cfg, seed, st):
    clean = replace(cfg, corruption=config.CorruptionSpec())
    ds, _ = experiments.build_dataset(clean, seed)
    data.save_dataset(st.dataset, ds)
    return [st.dataset]


def cmd_corrupt(cfg, seed, st):
    ds = data.load_dataset(st.need(st.dataset, "gen-data"))
    noise = cfg.corruption
    if noise.kind == "uniform":
        ds, report = data.inject_uniform_noise(ds, noise.percent, seed)
    elif noise.kind == "adversarial":
        ds, report = data.inject_adversarial_noise(ds, noise.percent, noise.mapping, seed)
    else:
        report = data.CorruptionReport(np.ones(len(ds), dtype=bool), 0.0, "none", None, {})
    data.save_dataset(st.corrupted, ds)
    _dump_json(st.corruption, report.to_dict())
    return [st.corrupted, st.corruption]


def _load_corrupted(st):
    return data.load_dataset(st.need(st.corrupted, "corrupt"))


def _load_warm(st):
    st.need(os.path.join(st.warmup, "run.json"), "warmup")
    return reweight.load_run(st.warmup)


def cmd_warmup(cfg, seed, st):
    ds = _load_corrupted(st)
    art, _ = reweight.warmup(replace(cfg.train, seed=seed), ds, cfg.selection.m0, seed)
    if os.path.isdir(st.warmup):
        shutil.rmtree(st.warmup)
    reweight.save_run(st.warmup, art)
    return _run_files(st.warmup)


def cmd_featurize(cfg, seed, st):
    sel = cfg.selection
    if sel.method not in CLUSTER_METHODS:
        raise ConfigError(f"method {sel.method!r} does not use features")
    ds = _load_corrupted(st)
    warm = _load_warm(st)
    meta = warm.meta_indices
    candidates = np.setdiff1d(ds.indices("train"), meta)
    rows = np.concatenate([candidates, meta])
    fs = selection.featurize(ds, warm.store, rows, sel, seed * 1000,
                             selection.full_mode_labels(ds, rows, meta))
    features.save_features(st.features, fs)
    return [st.features]


def cmd_select(cfg, seed, st):
    sel = cfg.selection
    ds = _load_corrupted(st)
    warm = _load_warm(st)
    meta = warm.meta_indices
    need = sel.budget - len(meta)
    if need <= 0:
        rnd = selection.SelectionRound(np.empty(0, np.int64), np.empty(0, np.int64), meta)
    elif sel.method in CLUSTER_METHODS:
        fs = features.load_features(st.need(st.features, "featurize"))
        is_meta = np.isin(fs.indices, meta)
        rnd = selection.select_from_features(fs.matrix[~is_meta], fs.matrix[is_meta],
                                             fs.indices[~is_meta], need, sel, seed * 1000)
    else:
        candidates = np.setdiff1d(ds.indices("train"), meta)
        chosen = selection.baseline_select(sel.method, candidates, need, seed * 1000,
                                           warm.params, ds.features[candidates])
        rnd = selection.SelectionRound(candidates, chosen, None)
    rnd.cumulative = np.union1d(meta, rnd.chosen)
    selection.save_selection(st.selection, selection.SelectionResult(rnd.cumulative, [rnd]))
    return [st.selection]


def cmd_reweight(cfg, seed, st):
    ds = _load_corrupted(st)
    warm = _load_warm(st)
    rows = selection.load_selection(st.need(st.selection, "select"))
    meta = np.union1d(warm.meta_indices, [r["sample_id"] for r in rows])
    train_cfg = replace(cfg.train, seed=seed, meta_only=cfg.selection.method == "finetune")
    art = reweight.run_meta_reweighting(train_cfg, ds, meta)
    if os.path.isdir(st.final):
        shutil.rmtree(st.final)
    reweight.save_run(st.final, art)
    return _run_files(st.final)


def weight_quality(art, ds, flags):
    """Weight AUC over the whole pool and over the samples nearest the
    decision boundary of the final model."""
    pool_flags = flags[art.pool]
    k = max(2, int(math.ceil(BOUNDARY_FRACTION * len(art.pool))))
    subset = analysis.boundary_subset(art.params, ds.features[art.pool], k)
    out = {"auc": None, "boundary_auc": None,
           "boundary_subset": f"{k} pool samples with the smallest first-order margin"}
    if pool_flags.any() and not pool_flags.all():
        out["auc"] = analysis.auc_weights_vs_clean(art.weights, pool_flags)
    f = pool_flags[subset]
    if f.any() and not f.all():
        out["boundary_auc"] = analysis.auc_weights_vs_clean(art.weights[subset], f)
    return out


def cmd_eval(cfg, seed, st):
    ds = _load_corrupted(st)
    st.need(os.path.join(st.final, "run.json"), "reweight")
    art = reweight.load_run(st.final)
    flags = ds.observed_labels == ds.clean_labels
    out = {split: analysis.evaluate_accuracy(art.params, ds, split)
           for split in ("train", "validation", "test") if len(ds.indices(split))}
    out = {f"{k}_accuracy": v for k, v in out.items()}
    out["meta_size"] = len(art.meta_indices)
    if cfg.selection.method != "finetune":
        out["weights"] = weight_quality(art, ds, flags)
    _dump_json(st.eval, out)
    return [st.eval]


def cmd_verify(cfg, seed, st):
    """Objective and theorem checks on the featurised candidates."""
    warm = _load_warm(st)
    fs = features.load_features(st.need(st.features, "featurize"))
    F = fs.matrix[~np.isin(fs.indices, warm.meta_indices)]
    m = max(1, min(cfg.selection.budget - cfg.selection.m0, len(F)))
    model = cluster.kmeans_with_restart(F, m, seed)
    C = model.centroids
    checks = {}
    abs_form, cos_form = analysis.mco_value(F, C), analysis.mco_value(F, C, form="cosine")
    checks["mco_forms_agree"] = abs(abs_form - cos_form) <= 1e-10 * max(1.0, abs_form)
    msso = analysis.msso_value(F, C)
    checks["msso_le_mco"] = msso <= abs_form * (1 + 1e-12)
    checks["assignment_monotone"] = all(after >= before - 1e-9 * max(1.0, abs(before))
                                        for before, after in model.assign_trace)
    t1 = analysis.verify_theorem1(F, C)
    checks["theorem1"] = t1.holds
    d = analysis.d_statistics(F, C)
    out = {"checks": checks, "passed": all(checks.values()), "clusters": model.n_clusters,
           "msso": msso, "mco": abs_form, "ratio": t1.ratio, "bound": t1.bound,
           "d_statistics": {k: (_finite(v) if isinstance(v, float) else v)
                            for k, v in d.table_row().items()}}
    _dump_json(st.verify, out)
    if not out["passed"]:
        failed = [k for k, v in checks.items() if not v]
        raise VerificationFailed(f"checks failed: {', '.join(failed)}")
    return [st.verify]


class VerificationFailed(RuntimeError):
    pass


def cmd_experiment(cfg, seed, st):
    report = experiments.run_experiment(cfg, st.out)
    sys.stdout.write(report.table())
    return []


COMMANDS = {
    "gen-data": cmd_gen_data,
    "corrupt": cmd_corrupt,
    "warmup": cmd_warmup,
    "featurize": cmd_featurize,
    "select": cmd_select,
    "reweight": cmd_reweight,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "experiment": cmd_experiment,
}


def build_parser():
    p = argparse.ArgumentParser(prog="metasel", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--seed", type=int, default=None, help="overrides the first config seed")
        s.add_argument("--out", default=None, help="output directory (overrides config 'out')")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.load(args.config)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        if args.seed is not None and args.command == "experiment":
            cfg = replace(cfg, seeds=[args.seed])
        seed = cfg.seeds[0] if args.seed is None else args.seed
        st = Stage(cfg.out)
        os.makedirs(cfg.out, exist_ok=True)
        written = COMMANDS[args.command](cfg, seed, st)
        if written:
            experiments.write_manifest(cfg.out, cfg, written, seed=seed)
    except FileNotFoundError as exc:
        print(f"metasel: error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"metasel: error: invalid config: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, VerificationFailed, ValueError, RuntimeError, OSError) as exc:
        print(f"metasel: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
