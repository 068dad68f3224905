"""Dense feed-forward network with exact per-sample gradients.

Everything is float64. Weight matrices are stored ``(out, in)`` so a layer
computes ``z = a @ W.T + b`` on row-major batches.
"""
from dataclasses import dataclass, field
import json

import numpy as np

from . import kernels
from .errors import DimensionError

ACTIVATIONS = ("relu", "tanh")
MODES = ("full", "label_free", "label_dependent")
CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class NetworkParams:
    weights: list
    biases: list
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {l}: weight {w.shape} / bias {b.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(f"layer {l} input {w.shape[1]} != previous output "
                                     f"{self.weights[l - 1].shape[0]}")

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_classes(self):
        return self.weights[-1].shape[0]

    def copy(self):
        return NetworkParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases], self.activation)

    def is_finite(self):
        return all(np.isfinite(w).all() and np.isfinite(b).all()
                   for w, b in zip(self.weights, self.biases))

    def add_scaled(self, grad, scale):
        """New params ``self + scale * grad``."""
        return NetworkParams([w + scale * gw for w, gw in zip(self.weights, grad.weights)],
                             [b + scale * gb for b, gb in zip(self.biases, grad.biases)],
                             self.activation)

    def equals(self, other):
        return (self.activation == other.activation
                and self.n_layers == other.n_layers
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases)))


def init_params(layer_sizes, activation="relu", seed=0):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases, activation)


@dataclass
class ForwardTrace:
    """``inputs[l]`` feeds layer ``l``; ``pre[l]`` is that layer's output before activation."""
    inputs: list
    pre: list
    activation: str

    @property
    def logits(self):
        return self.pre[-1]

    @property
    def last_input(self):
        return self.inputs[-1]


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(z, a, kind):
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def forward(params, x):
    """Forward pass on one sample ``(d,)`` or a batch ``(B, d)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.weights[0].shape[1]:
        raise DimensionError(f"input has {x.shape[-1]} features, network expects "
                             f"{params.weights[0].shape[1]}")
    inputs, pre = [], []
    a = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        if l < last:
            a = _activate(z, params.activation)
    return ForwardTrace(inputs, pre, params.activation)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _check_labels(y, n_classes):
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return y.astype(np.int64)


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]``; vectorised over a leading batch axis."""
    logits = np.asarray(logits, dtype=np.float64)
    label = _check_labels(label, logits.shape[-1])
    lp = log_softmax(logits)
    if lp.ndim == 1:
        return float(-lp[label])
    return -lp[np.arange(lp.shape[0]), label]


def last_layer_delta(logits, label=None, mode="full"):
    """Gradient of cross-entropy w.r.t. the logits, or one of its two parts.

    ``full = label_free - label_dependent`` with ``label_free = softmax`` and
    ``label_dependent = onehot(label)``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    logits = np.asarray(logits, dtype=np.float64)
    if mode == "label_free":
        return softmax(logits)
    if label is None:
        raise ValueError(f"mode {mode!r} needs a label")
    label = _check_labels(label, logits.shape[-1])
    onehot = np.zeros_like(logits)
    if logits.ndim == 1:
        onehot[label] = 1.0
    else:
        onehot[np.arange(logits.shape[0]), label] = 1.0
    if mode == "label_dependent":
        return onehot
    return softmax(logits) - onehot


def backprop_deltas(params, trace, delta_out):
    """Per-layer output deltas for a batch; ``deltas[l]`` has shape ``(B, out_l)``."""
    deltas = [None] * params.n_layers
    d = np.atleast_2d(delta_out)
    deltas[-1] = d
    for l in range(params.n_layers - 1, 0, -1):
        a = np.atleast_2d(trace.inputs[l])
        z = np.atleast_2d(trace.pre[l - 1])
        d = (d @ params.weights[l]) * _activation_grad(z, a, params.activation)
        deltas[l - 1] = d
    return deltas


def input_gradient(params, trace, delta_out):
    """Gradient w.r.t. the network input for each row of ``delta_out``."""
    deltas = backprop_deltas(params, trace, delta_out)
    return deltas[0] @ params.weights[0]


@dataclass
class LayeredGradient:
    weights: list
    biases: list
    mode: str = "full"

    def layer_vector(self, l, include_bias=True):
        parts = [self.weights[l].ravel()]
        if include_bias:
            parts.append(self.biases[l])
        return np.concatenate(parts)

    def flat(self, include_bias=True, layers=None):
        idx = range(len(self.weights)) if layers is None else layers
        return np.concatenate([self.layer_vector(l, include_bias) for l in idx])

    def inner(self, other):
        """Full layered Frobenius inner product, biases included."""
        return float(sum(np.vdot(a, b) for a, b in zip(self.weights, other.weights))
                     + sum(np.vdot(a, b) for a, b in zip(self.biases, other.biases)))

    def sq_norm(self):
        return self.inner(self)

    def scaled(self, s):
        return LayeredGradient([s * w for w in self.weights], [s * b for b in self.biases],
                               self.mode)

    def __sub__(self, other):
        return LayeredGradient([a - b for a, b in zip(self.weights, other.weights)],
                               [a - b for a, b in zip(self.biases, other.biases)], self.mode)

    def __add__(self, other):
        return LayeredGradient([a + b for a, b in zip(self.weights, other.weights)],
                               [a + b for a, b in zip(self.biases, other.biases)], self.mode)

    def is_finite(self):
        return all(np.isfinite(w).all() for w in self.weights) and \
            all(np.isfinite(b).all() for b in self.biases)


def zeros_like_params(params, mode="full"):
    return LayeredGradient([np.zeros_like(w) for w in params.weights],
                           [np.zeros_like(b) for b in params.biases], mode)


def per_sample_gradient(params, x, y=None, mode="full"):
    """Exact gradient of one sample's loss (or of its label-free / label-dependent part)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("per_sample_gradient takes a single input vector")
    trace = forward(params, x)
    if not np.isfinite(trace.logits).all():
        raise FloatingPointError("non-finite values in forward trace")
    delta = last_layer_delta(trace.logits, y, mode)
    deltas = backprop_deltas(params, trace, delta)
    weights = [np.outer(d[0], trace.inputs[l]) for l, d in enumerate(deltas)]
    biases = [d[0].copy() for d in deltas]
    return LayeredGradient(weights, biases, mode)


def batch_deltas(params, X, y=None, mode="full"):
    """Forward + backprop for a batch: ``(trace, deltas)``; per-sample layer-l
    gradient is ``outer(deltas[l][j], trace.inputs[l][j])``."""
    trace = forward(params, np.atleast_2d(X))
    if not np.isfinite(trace.logits).all():
        raise FloatingPointError("non-finite values in forward trace")
    delta = last_layer_delta(trace.logits, y, mode)
    return trace, backprop_deltas(params, trace, delta)


def per_sample_layer_gradients(params, X, y=None, mode="full", layers=None, include_bias=True):
    """Materialised per-sample gradients: ``{l: (B, out*in [+ out])}``."""
    trace, deltas = batch_deltas(params, X, y, mode)
    layers = range(params.n_layers) if layers is None else layers
    out = {}
    for l in layers:
        d, a = deltas[l], trace.inputs[l]
        g = (d[:, :, None] * a[:, None, :]).reshape(d.shape[0], -1)
        out[l] = np.concatenate([g, d], axis=1) if include_bias else g
    return out


def weighted_mean_gradient(params, trace, deltas, weights, denom=None):
    """``(1/denom) * sum_j w_j grad_j`` with ``denom`` defaulting to the batch size."""
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    denom = len(weights) if denom is None else denom
    gws, gbs = [], []
    for l in range(params.n_layers):
        gw, gb = kernels.weighted_outer(np.ascontiguousarray(deltas[l]),
                                        np.ascontiguousarray(np.atleast_2d(trace.inputs[l])),
                                        weights)
        gws.append(gw / denom)
        gbs.append(gb / denom)
    return LayeredGradient(gws, gbs)


def mean_gradient(params, X, y=None, mode="full", weights=None):
    trace, deltas = batch_deltas(params, X, y, mode)
    n = trace.logits.shape[0]
    w = np.ones(n) if weights is None else weights
    g = weighted_mean_gradient(params, trace, deltas, w)
    g.mode = mode
    return g


def sample_inner_products(params, trace, deltas, grad):
    """``<grad, grad_j>`` for every sample j of a batch, from its deltas."""
    total = 0.0
    for l in range(params.n_layers):
        total = total + kernels.sample_inner(
            np.ascontiguousarray(deltas[l]),
            np.ascontiguousarray(np.atleast_2d(trace.inputs[l])),
            np.ascontiguousarray(grad.weights[l]),
            np.ascontiguousarray(grad.biases[l]))
    return total


def predict(params, X):
    return np.argmax(forward(params, np.atleast_2d(X)).logits, axis=1)


# optimizer -------------------------------------------------------------------

@dataclass
class SGDState:
    velocity: list = field(default=None)


def sgd_step(params, grad, lr, momentum=0.0, weight_decay=0.0, state=None):
    """Momentum SGD with the L2 term ``weight_decay * theta`` folded into the gradient.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if not grad.is_finite():
        raise FloatingPointError("non-finite gradient")
    state = SGDState() if state is None else state
    tensors = params.weights + params.biases
    grads = grad.weights + grad.biases
    new_v, new_t = [], []
    for i, (t, g) in enumerate(zip(tensors, grads)):
        d = g + weight_decay * t if weight_decay else g
        if momentum and state.velocity is not None:
            v = momentum * state.velocity[i] + d
        else:
            v = d
        new_v.append(v)
        new_t.append(t - lr * v)
    n = params.n_layers
    return NetworkParams(new_t[:n], new_t[n:], params.activation), SGDState(new_v)


# checkpoints -----------------------------------------------------------------

class CheckpointStore:
    """Epoch -> params snapshot, with the best-validation epoch tracked."""

    def __init__(self):
        self.params = {}
        self.val_acc = {}
        self.best_epoch = None

    @property
    def epochs(self):
        return sorted(self.params)

    @property
    def last_epoch(self):
        return self.epochs[-1]

    def __len__(self):
        return len(self.params)

    def __getitem__(self, epoch):
        return self.params[epoch]

    def add(self, epoch, params, val_acc):
        epoch = int(epoch)
        if epoch in self.params:
            raise ValueError(f"epoch {epoch} already checkpointed")
        if self.params and epoch < self.last_epoch:
            raise ValueError(f"epoch {epoch} precedes stored epoch {self.last_epoch}")
        self.params[epoch] = params.copy()
        self.val_acc[epoch] = float(val_acc)
        if self.best_epoch is None or val_acc > self.val_acc[self.best_epoch]:
            self.best_epoch = epoch
        return self

    def save(self, path):
        arrays = {}
        for e, p in self.params.items():
            for l, (w, b) in enumerate(zip(p.weights, p.biases)):
                arrays[f"e{e}_w{l}"] = w
                arrays[f"e{e}_b{l}"] = b
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "epochs": self.epochs,
            "val_acc": [self.val_acc[e] for e in self.epochs],
            "activation": {e: self.params[e].activation for e in self.epochs},
            "n_layers": {e: self.params[e].n_layers for e in self.epochs},
        }
        arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            header = json.loads(z["header"].tobytes().decode())
            _check_version(header)
            store = cls()
            for e, acc in zip(header["epochs"], header["val_acc"]):
                n = header["n_layers"][str(e)]
                p = NetworkParams([z[f"e{e}_w{l}"] for l in range(n)],
                                  [z[f"e{e}_b{l}"] for l in range(n)],
                                  header["activation"][str(e)])
                store.add(e, p, acc)
        return store


def checkpoint(store, epoch, params, val_acc):
    return store.add(epoch, params, val_acc)


def _check_version(header):
    v = header.get("format_version")
    if v != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {v!r}")


def save_params(path, params):
    arrays = {f"w{l}": w for l, w in enumerate(params.weights)}
    arrays.update({f"b{l}": b for l, b in enumerate(params.biases)})
    header = {"format_version": CHECKPOINT_FORMAT_VERSION, "activation": params.activation,
              "n_layers": params.n_layers}
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path):
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        _check_version(header)
        n = header["n_layers"]
        return NetworkParams([z[f"w{l}"] for l in range(n)], [z[f"b{l}"] for l in range(n)],
                             header["activation"])

