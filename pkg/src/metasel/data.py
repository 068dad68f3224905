"""Dataset synthesis, IDX ingestion, label corruption, long-tail subsampling and splits."""
from dataclasses import dataclass, field, replace
import csv
import gzip
import struct

import numpy as np

SPLITS = ("train", "meta_candidate", "validation", "test")
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    features: np.ndarray
    observed_labels: np.ndarray
    clean_labels: np.ndarray
    split: np.ndarray
    class_count: int
    ids: np.ndarray = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U14")
        n = len(self.features)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.observed_labels) == len(self.clean_labels) == len(self.split)
                == len(self.ids) == n):
            raise ValueError("dataset columns have different lengths")
        for labels in (self.observed_labels, self.clean_labels):
            if n and (labels.min() < 0 or labels.max() >= self.class_count):
                raise ValueError(f"labels must lie in [0, {self.class_count})")
        bad = set(np.unique(self.split)) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    def indices(self, split):
        return np.flatnonzero(self.split == split)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.observed_labels[idx], self.clean_labels[idx],
                       self.split[idx], self.class_count, self.ids[idx])

    def copy(self):
        return self.subset(np.arange(len(self)))

    def equals(self, other):
        return (self.class_count == other.class_count
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.observed_labels, other.observed_labels)
                and np.array_equal(self.clean_labels, other.clean_labels)
                and np.array_equal(self.split, other.split)
                and np.array_equal(self.ids, other.ids))


@dataclass
class CorruptionReport:
    clean_flags: np.ndarray
    realized_fraction: float
    kind: str
    mapping: np.ndarray = None
    per_class_rates: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "realized_fraction": self.realized_fraction,
                "mapping": None if self.mapping is None else self.mapping.tolist(),
                "per_class_rates": {str(k): v for k, v in self.per_class_rates.items()},
                "n_corrupted": int((~self.clean_flags).sum())}


# synthesis -------------------------------------------------------------------

def hypercube_vertices(dim=2):
    return np.array([[(v >> k) & 1 for k in range(dim)] for v in range(2 ** dim)],
                    dtype=np.float64)


def gen_gaussian_mixture(n=1000, centers=None, sigma=0.25, base_flip=0.01, seed=0,
                         fractions=(0.6, 0.16, 0.24)):
    """Four Gaussians on the unit-square vertices; upper pair is class 1, lower pair class 0.

    ``base_flip`` of the labels are flipped before anything else and become the
    ground truth. ``fractions`` are (train, validation, test).
    """
    if n < 8:
        raise ValueError("need at least 8 samples")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    centers = hypercube_vertices(2) if centers is None else np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, len(centers), size=n)
    X = centers[comp] + sigma * rng.standard_normal((n, centers.shape[1]))
    upper = centers[:, 1] > centers[:, 1].mean()
    y = upper[comp].astype(np.int64)
    flip = rng.random(n) < base_flip
    y = np.where(flip, 1 - y, y)
    ds = Dataset(X, y.copy(), y, np.full(n, "train"), 2)
    return split(ds, fractions, seed=int(rng.integers(2 ** 31)))


def gen_blobs(n_per_class, centers, sigma=0.25, seed=0):
    """One isotropic Gaussian per class; all samples tagged train."""
    centers = np.asarray(centers, dtype=np.float64)
    rng = np.random.default_rng(seed)
    c = len(centers)
    y = np.repeat(np.arange(c), n_per_class)
    X = centers[y] + sigma * rng.standard_normal((len(y), centers.shape[1]))
    return Dataset(X, y, y.copy(), np.full(len(y), "train"), c)


# IDX -------------------------------------------------------------------------

def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_idx(path, expect_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise ValueError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ValueError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    size = int(np.prod(dims))
    if len(raw) - head < size:
        raise ValueError(f"{path}: truncated data ({len(raw) - head} of {size} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=head).reshape(dims)


def load_idx(images_path, labels_path, class_count=10):
    """Parse an IDX image/label pair. Pixels are scaled to [0, 1]; all samples tagged train."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return Dataset(X, y, y.copy(), np.full(len(y), "train"), class_count)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IMAGE_MAGIC))
        fh.write(struct.pack(f">{images.ndim}I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def avg_pool_images(X, side=28, factor=2):
    """Average-pool flattened square images by ``factor`` along each axis."""
    n = X.shape[0]
    s = side // factor
    return X.reshape(n, s, factor, s, factor).mean(axis=(2, 4)).reshape(n, s * s)


# corruption ------------------------------------------------------------------

def _check_percent(p):
    if not 0 <= p <= 100:
        raise ValueError(f"noise percent must lie in [0, 100], got {p}")


def _report(ds, train, kind, mapping=None):
    flags = ds.observed_labels == ds.clean_labels
    realized = float((~flags[train]).mean()) if len(train) else 0.0
    rates = {}
    for c in range(ds.class_count):
        members = train[ds.clean_labels[train] == c]
        if len(members):
            rates[c] = float((~flags[members]).mean())
    return CorruptionReport(flags, realized, kind, mapping, rates)


def inject_uniform_noise(ds, p, seed=0):
    """Each train sample, with probability p/100, gets a label drawn uniformly from
    the classes other than its clean label."""
    _check_percent(p)
    rng = np.random.default_rng(seed)
    out = ds.copy()
    train = ds.indices("train")
    hit = train[rng.random(len(train)) < p / 100.0]
    shift = rng.integers(1, ds.class_count, size=len(hit))
    out.observed_labels[hit] = (ds.clean_labels[hit] + shift) % ds.class_count
    return out, _report(out, train, "uniform")


def cyclic_mapping(class_count):
    return (np.arange(class_count) + 1) % class_count


def inject_adversarial_noise(ds, p, mapping=None, seed=0):
    """A uniformly chosen p% subset of train samples is relabelled ``mapping[clean]``."""
    _check_percent(p)
    mapping = cyclic_mapping(ds.class_count) if mapping is None else np.asarray(mapping)
    if (mapping.shape != (ds.class_count,)
            or sorted(mapping.tolist()) != list(range(ds.class_count))):
        raise ValueError("mapping must be a permutation of the classes")
    if np.any(mapping == np.arange(ds.class_count)):
        raise ValueError("mapping has a fixed point")
    rng = np.random.default_rng(seed)
    out = ds.copy()
    train = ds.indices("train")
    k = int(round(len(train) * p / 100.0))
    hit = rng.choice(train, size=k, replace=False)
    out.observed_labels[hit] = mapping[ds.clean_labels[hit]]
    return out, _report(out, train, "adversarial", mapping)


# long tail -------------------------------------------------------------------

def long_tail_counts(n_max, class_count, imbalance_factor):
    """``n_c = floor(n_max * mu^(c/(C-1)))`` with ``mu = 1/imbalance_factor``."""
    if imbalance_factor < 1:
        raise ValueError("imbalance factor must be >= 1")
    if class_count == 1:
        return np.array([n_max])
    mu = 1.0 / imbalance_factor
    c = np.arange(class_count)
    return np.floor(n_max * mu ** (c / (class_count - 1)) + 1e-9).astype(np.int64)


def build_imbalanced(ds, imbalance_factor, seed=0, n_max=None):
    """Subsample the train split per class along a geometric profile.

    Non-train samples are kept. ``n_max`` defaults to the smallest per-class
    train count so every class can supply its quota.
    """
    train = ds.indices("train")
    per_class = [train[ds.clean_labels[train] == c] for c in range(ds.class_count)]
    avail = np.array([len(m) for m in per_class])
    n_max = int(avail.min()) if n_max is None else int(n_max)
    counts = long_tail_counts(n_max, ds.class_count, imbalance_factor)
    if counts.min() < 1:
        raise ValueError(f"smallest class rounds to 0 samples (n_max={n_max}, "
                         f"factor={imbalance_factor})")
    if np.any(counts > avail):
        raise ValueError(f"requested counts {counts.tolist()} exceed available {avail.tolist()}")
    rng = np.random.default_rng(seed)
    keep = [ds.indices(s) for s in SPLITS if s != "train"]
    for members, k in zip(per_class, counts):
        keep.append(np.sort(rng.choice(members, size=k, replace=False)))
    return ds.subset(np.sort(np.concatenate(keep)))


# splitting -------------------------------------------------------------------

def split_sizes(n, fractions):
    """Largest-remainder rounding of ``n * fractions``."""
    f = np.asarray(fractions, dtype=np.float64)
    raw = n * f
    sizes = np.floor(raw + 1e-9).astype(np.int64)
    rem = n - sizes.sum()
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[:rem]] += 1
    return sizes


def split(ds, fractions, seed=0):
    """Random partition into (train, validation, test) by ``fractions``."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    sizes = split_sizes(len(ds), fractions)
    for name, f, s in zip(("train", "validation", "test"), fractions, sizes):
        if f > 0 and s == 0:
            raise ValueError(f"split {name!r} would be empty")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    tags = np.empty(len(ds), dtype="<U14")
    a, b = sizes[0], sizes[0] + sizes[1]
    tags[perm[:a]] = "train"
    tags[perm[a:b]] = "validation"
    tags[perm[b:]] = "test"
    return replace(ds.copy(), split=tags)


# snapshots -------------------------------------------------------------------

def save_dataset(path, ds):
    """Columnar text snapshot; floats are written with ``repr`` so reloading is exact."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# class_count={ds.class_count} d={ds.dim} N={len(ds)}\n")
        w = csv.writer(fh)
        w.writerow(["id", "split", "observed", "clean"] + [f"x{k}" for k in range(ds.dim)])
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), ds.split[i], int(ds.observed_labels[i]),
                        int(ds.clean_labels[i])] + [repr(float(v)) for v in ds.features[i]])


def load_dataset(path):
    with open(path, newline="") as fh:
        head = fh.readline()
        if not head.startswith("#"):
            raise ValueError(f"{path}: missing dataset header")
        meta = dict(kv.split("=") for kv in head[1:].split())
        rows = list(csv.reader(fh))[1:]
    c, d, n = int(meta["class_count"]), int(meta["d"]), int(meta["N"])
    if len(rows) != n:
        raise ValueError(f"{path}: header says {n} rows, found {len(rows)}")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    tags = np.array([r[1] for r in rows])
    obs = np.array([int(r[2]) for r in rows], dtype=np.int64)
    clean = np.array([int(r[3]) for r in rows], dtype=np.int64)
    X = np.array([[float(v) for v in r[4:]] for r in rows], dtype=np.float64).reshape(n, d)
    return Dataset(X, obs, clean, tags, c, ids)
