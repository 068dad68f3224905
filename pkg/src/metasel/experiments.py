"""End-to-end experiment driver: dataset construction from a config, one run
per (seed, method), long-format results, a mean +- std summary and a manifest."""
from dataclasses import dataclass, field, replace
import csv
import hashlib
import json
import logging
import math
import os
import platform

import numpy as np

from . import __version__, _accel, analysis, data, reweight, selection
from .errors import DivergenceError

log = logging.getLogger(__name__)

METRICS = ("test_accuracy", "weight_auc", "meta_size")


def class_centers(class_count):
    """First ``class_count`` vertices of the smallest hypercube that has enough."""
    dim = max(2, int(math.ceil(math.log2(max(class_count, 2)))))
    return data.hypercube_vertices(dim)[:class_count]


def build_dataset(cfg, seed):
    """Dataset for one seed, plus the CorruptionReport (``None`` without noise)."""
    spec = cfg.dataset
    if spec.kind == "toy":
        ds = data.gen_gaussian_mixture(spec.n, sigma=spec.sigma, base_flip=spec.base_flip,
                                       seed=seed, fractions=spec.fractions)
    else:
        if spec.kind == "blobs":
            ds = data.gen_blobs(spec.n_per_class, class_centers(spec.class_count), spec.sigma,
                                seed)
        else:
            ds = data.load_idx(spec.images, spec.labels)
            if spec.pool > 1:
                side = int(round(math.sqrt(ds.dim)))
                ds = replace(ds, features=data.avg_pool_images(ds.features, side, spec.pool))
        ds = data.split(ds, spec.fractions, seed)
    if cfg.imbalance.factor > 1:
        ds = data.build_imbalanced(ds, cfg.imbalance.factor, seed, cfg.imbalance.n_max or None)
    report = None
    noise = cfg.corruption
    if noise.kind == "uniform":
        ds, report = data.inject_uniform_noise(ds, noise.percent, seed)
    elif noise.kind == "adversarial":
        ds, report = data.inject_adversarial_noise(ds, noise.percent, noise.mapping, seed)
    return ds, report


@dataclass
class CellResult:
    seed: int
    method: str
    metrics: dict = field(default_factory=dict)
    error: str = ""
    result: object = None                # SelectionResult, kept in memory only


def run_cell(cfg, dataset, report, method, seed, warm=None):
    train_cfg = replace(cfg.train, seed=seed)
    sel_cfg = replace(cfg.selection, method=method)
    res = selection.run_selection_pipeline(dataset, train_cfg, sel_cfg, seed, warm=warm)
    final = res.final
    metrics = {"test_accuracy": final.accuracy("test"), "meta_size": len(res.meta_indices)}
    if report is not None and method != "finetune":
        flags = report.clean_flags[final.pool]
        if flags.all() or not flags.any():
            metrics["weight_auc"] = float("nan")
        else:
            metrics["weight_auc"] = analysis.auc_weights_vs_clean(final.weights, flags)
    return CellResult(seed, method, metrics, result=res)


def run_experiment(cfg, out_dir=None, keep_results=False):
    """Every method on every seed; one shared warm-up per seed.

    A failing (seed, method) cell is recorded with its error and left out of
    the summary.
    """
    cells = []
    for seed in cfg.seeds:
        dataset, report = build_dataset(cfg, seed)
        train_cfg = replace(cfg.train, seed=seed)
        warm = reweight.warmup(train_cfg, dataset, cfg.selection.m0, seed)
        for method in cfg.methods:
            try:
                cell = run_cell(cfg, dataset, report, method, seed, warm)
            except (ValueError, DivergenceError, FloatingPointError) as exc:
                log.warning("seed %d method %s failed: %s", seed, method, exc)
                cell = CellResult(seed, method, error=str(exc))
            if not keep_results:
                cell.result = None
            cells.append(cell)
    report_ = ExperimentReport(cfg, cells)
    if out_dir is not None:
        report_.write(out_dir)
    return report_


@dataclass
class ExperimentReport:
    config: object
    cells: list

    def long_rows(self):
        rows = []
        for c in self.cells:
            if c.error:
                rows.append({"seed": c.seed, "method": c.method, "metric": "error",
                             "value": c.error})
                continue
            for k in METRICS:
                if k in c.metrics:
                    rows.append({"seed": c.seed, "method": c.method, "metric": k,
                                 "value": c.metrics[k]})
        return rows

    def values(self, method, metric):
        return [c.metrics[metric] for c in self.cells
                if c.method == method and not c.error and metric in c.metrics]

    def summary(self):
        """``{method: {metric: (mean, std, n)}}`` over the successful seeds."""
        out = {}
        for m in self.config.methods:
            out[m] = {}
            for k in METRICS:
                v = [x for x in self.values(m, k) if not np.isnan(x)]
                if v:
                    mean, std = analysis.mean_std(v)
                    out[m][k] = (mean, std, len(v))
        return out

    def table(self):
        """Method x metric text table with ``mean +- std`` cells."""
        summ = self.summary()
        cols = [k for k in METRICS if any(k in summ[m] for m in summ)]
        lines = ["method," + ",".join(cols)]
        for m in self.config.methods:
            cells = []
            for k in cols:
                if k in summ[m]:
                    mean, std, _ = summ[m][k]
                    cells.append(f"{mean:.4f} +- {std:.4f}")
                else:
                    cells.append("missing")
            lines.append(m + "," + ",".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        results = os.path.join(out_dir, "results.csv")
        with open(results, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["seed", "method", "metric", "value"])
            w.writeheader()
            for r in self.long_rows():
                v = r["value"]
                w.writerow({**r, "value": repr(float(v)) if not isinstance(v, str) else v})
        summary = os.path.join(out_dir, "summary.csv")
        with open(summary, "w") as fh:
            fh.write(self.table())
        cfg_path = os.path.join(out_dir, "config.json")
        with open(cfg_path, "w") as fh:
            fh.write(self.config.dumps() + "\n")
        write_manifest(out_dir, self.config, [cfg_path, results, summary])


# manifest --------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def versions():
    import scipy
    return {"metasel": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__,
            "backend": _accel.backend_name()}


def write_manifest(out_dir, cfg, paths, seed=None, inputs=()):
    """``manifest.json`` in ``out_dir``; merges with an existing manifest so
    successive stages accumulate their files."""
    path = os.path.join(out_dir, "manifest.json")
    manifest = {"files": {}, "inputs": {}}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
    manifest["config"] = cfg.to_dict()
    manifest["config_sha256"] = cfg.digest()
    manifest["versions"] = versions()
    if seed is not None:
        manifest["seed"] = seed
    else:
        manifest["seeds"] = list(cfg.seeds)
    for p in paths:
        manifest["files"][os.path.relpath(p, out_dir)] = sha256_file(p)
    for p in inputs:
        manifest["inputs"][os.path.abspath(p)] = sha256_file(p)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def verify_manifest(out_dir):
    """Relative paths whose content hash no longer matches the manifest."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    bad = []
    for rel, digest in manifest["files"].items():
        p = os.path.join(out_dir, rel)
        if not os.path.exists(p) or sha256_file(p) != digest:
            bad.append(rel)
    return bad
