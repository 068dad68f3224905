"""Experiment configuration: nested dataclasses read from and written to JSON.

Unknown keys anywhere in the file are rejected.
"""
from dataclasses import dataclass, field, fields, asdict, is_dataclass
import hashlib
import json

from .errors import ConfigError
from .reweight import TrainConfig
from .selection import SELECTORS, SelectionConfig

DATASET_KINDS = ("toy", "idx", "blobs")
NOISE_KINDS = ("none", "uniform", "adversarial")


@dataclass
class DatasetSpec:
    kind: str = "toy"
    n: int = 1000                       # toy
    sigma: float = 0.25                 # toy / blobs
    base_flip: float = 0.01             # toy
    n_per_class: int = 250              # blobs
    class_count: int = 4                # blobs
    images: str = ""                    # idx
    labels: str = ""                    # idx
    pool: int = 1                       # idx: average-pool factor on square images
    fractions: tuple = (0.6, 0.16, 0.24)

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("idx dataset needs both 'images' and 'labels'")
        if self.kind != "idx" and (self.images or self.labels):
            raise ConfigError(f"'images'/'labels' given for a {self.kind} dataset")
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError("dataset.fractions must be three numbers summing to 1")


@dataclass
class CorruptionSpec:
    kind: str = "none"
    percent: float = 0.0
    mapping: list = None                # adversarial; cyclic shift when omitted

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"corruption.kind must be one of {NOISE_KINDS}")
        if not 0 <= self.percent <= 100:
            raise ConfigError("corruption.percent must lie in [0, 100]")


@dataclass
class ImbalanceSpec:
    factor: float = 1.0
    n_max: int = 0                      # 0: smallest available class count

    def __post_init__(self):
        if self.factor < 1:
            raise ConfigError("imbalance.factor must be >= 1")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    imbalance: ImbalanceSpec = field(default_factory=ImbalanceSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    methods: list = field(default_factory=lambda: ["random", "rbc"])
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        bad = [m for m in self.methods if m not in SELECTORS]
        if bad or not self.methods:
            raise ConfigError(f"methods must be a nonempty subset of {SELECTORS}, got {self.methods}")
        if self.selection.budget < self.selection.m0:
            raise ConfigError("selection.budget must be >= selection.m0")

    def to_dict(self):
        return _plain(asdict(self))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data):
    return _build(ExperimentConfig, data, "config")


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def load(path):
    with open(path) as fh:
        return loads(fh.read())


def save(path, cfg):
    with open(path, "w") as fh:
        fh.write(cfg.dumps() + "\n")
