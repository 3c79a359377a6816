"""Dense softplus/relu classifier: parameters, forward pass, loss, checkpoints.

The forward pass records onto an autodiff graph so both the input and the
parameters can be differentiated (the training objective needs d/dθ of an
input-gradient norm). A plain-numpy forward is kept alongside as the fast
path for evaluation; it performs the same array expressions in the same
order, so the two routes agree bitwise.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import named_stream

CHECKPOINT_FORMAT = "flatreg-checkpoint"
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("softplus", "relu")


@dataclass(frozen=True)
class Architecture:
    """Layer widths (input, hidden..., classes) plus activation kind."""

    widths: tuple[int, ...]
    activation: str = "softplus"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2:
            raise ValueError(f"need at least input and class widths, got {widths}")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation '{self.activation}' (choose from {ACTIVATIONS})"
            )

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def num_classes(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class ModelParams:
    """Immutable per-layer weights (out×in) and biases (out)."""

    arch: Architecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    seed: int

    def __post_init__(self):
        pairs = list(zip(self.arch.widths, self.arch.widths[1:]))
        if len(self.weights) != len(pairs) or len(self.biases) != len(pairs):
            raise ValueError(
                f"{len(pairs)} layers in architecture, got "
                f"{len(self.weights)} weights / {len(self.biases)} biases"
            )
        for li, (fan_in, fan_out) in enumerate(pairs):
            w, b = self.weights[li], self.biases[li]
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ValueError(
                    f"layer {li}: expected weight {(fan_out, fan_in)} and bias "
                    f"{(fan_out,)}, got {w.shape} and {b.shape}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {li}: non-finite parameter entries")
        frozen_w = tuple(_frozen(w) for w in self.weights)
        frozen_b = tuple(_frozen(b) for b in self.biases)
        object.__setattr__(self, "weights", frozen_w)
        object.__setattr__(self, "biases", frozen_b)

    @property
    def num_layers(self) -> int:
        return len(self.weights)


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, order="C", copy=True)
    out.flags.writeable = False
    return out


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Glorot-uniform weights (bound √(6/(fan_in+fan_out))), zero biases.

    Draws come from the named stream ("init") of the given seed, so the same
    (arch, seed) pair always yields bit-identical parameters.
    """
    rng = named_stream(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(arch.widths, arch.widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(arch, tuple(weights), tuple(biases), int(seed))


def param_nodes(graph: ad.Graph, params: ModelParams, differentiable: bool) -> list[ad.NodeId]:
    """Insert all parameters into the graph, flat order [w0, b0, w1, b1, ...]."""
    make = graph.leaf if differentiable else graph.constant
    out = []
    for w, b in zip(params.weights, params.biases):
        out.append(make(w))
        out.append(make(b))
    return out


def forward_logits(
    params: ModelParams,
    x,
    graph: ad.Graph,
    nodes: list[ad.NodeId] | None = None,
) -> ad.NodeId:
    """Record the affine–activation chain; returns the b×c logits node.

    ``x`` is either a node id already in the graph (pass a leaf to make the
    input differentiable) or a b×d array, inserted as a constant. ``nodes``
    optionally supplies parameter node ids from :func:`param_nodes`;
    otherwise parameters enter as constants.
    """
    if isinstance(x, (int, np.integer)) and not isinstance(x, np.ndarray):
        h = int(x)
    else:
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != params.arch.input_dim:
            raise ad.ShapeMismatch(
                f"input must be batch×{params.arch.input_dim}, got {arr.shape}"
            )
        h = graph.constant(arr)
    if nodes is None:
        nodes = param_nodes(graph, params, differentiable=False)
    b = graph.shape(h)[0]
    last = params.num_layers - 1
    for li in range(params.num_layers):
        wn, bn = nodes[2 * li], nodes[2 * li + 1]
        width = graph.shape(bn)[0]
        z = ad.matmul(graph, h, wn, tb=True)
        bias_row = ad.reshape(graph, bn, (1, width))
        z = ad.add(graph, z, ad.broadcast(graph, bias_row, (b, width)))
        if li == last:
            return z
        if params.arch.activation == "softplus":
            h = ad.softplus(graph, z)
        else:
            # relu(z) = (z + |z|)/2, built from differentiable primitives
            h = ad.scale(graph, ad.add(graph, z, ad.abs_(graph, z)), 0.5)
    raise AssertionError("unreachable")


def forward_logits_np(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward pass; bitwise identical to the graph route."""
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.arch.input_dim:
        raise ad.ShapeMismatch(
            f"input must be batch×{params.arch.input_dim}, got {h.shape}"
        )
    last = params.num_layers - 1
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + np.broadcast_to(b.reshape(1, -1), (h.shape[0], b.size))
        if li == last:
            return z
        if params.arch.activation == "softplus":
            h = np.logaddexp(0.0, z)
        else:
            h = (z + np.abs(z)) * 0.5
    raise AssertionError("unreachable")


def cross_entropy_sum(graph: ad.Graph, logits: ad.NodeId, labels) -> ad.NodeId:
    """Summed (not averaged) cross-entropy; input-gradient rows are then the
    exact per-sample gradients, which the attack loops rely on."""
    labels = np.asarray(labels)
    b, c = graph.shape(logits)
    if labels.shape != (b,):
        raise ad.ShapeMismatch(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    lse = ad.logsumexp(graph, logits, axis=1)
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.sum_(graph, ad.mul(graph, logits, graph.constant(onehot)))
    return ad.sub(graph, ad.sum_(graph, lse), picked)


def cross_entropy(graph: ad.Graph, logits: ad.NodeId, labels) -> ad.NodeId:
    """Mean over the batch of logsumexp(logits) − logit[true label]."""
    b = graph.shape(logits)[0]
    return ad.scale(graph, cross_entropy_sum(graph, logits, labels), 1.0 / b)


def cross_entropy_np(logits: np.ndarray, labels) -> np.ndarray:
    """Per-sample losses as a plain array (evaluation/reporting path)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m = logits.max(axis=1, keepdims=True)
    rest = np.exp(logits - m)
    np.put_along_axis(rest, np.argmax(logits, axis=1)[:, None], 0.0, axis=1)
    lse = m[:, 0] + np.log1p(rest.sum(axis=1))
    return lse - logits[np.arange(len(labels)), labels]


def decision_value(logits_row: np.ndarray, y: int) -> float:
    """Margin of the true-class logit over the best rival; > 0 iff correct."""
    row = np.asarray(logits_row, dtype=np.float64).ravel()
    if row.size < 2:
        raise ValueError("need at least two classes")
    if not 0 <= y < row.size:
        raise ValueError(f"label {y} out of range for {row.size} classes")
    rivals = np.delete(row, y)
    return float(row[y] - rivals.max())


def decision_values(logits: np.ndarray, labels) -> np.ndarray:
    """Vectorized :func:`decision_value` over rows."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    masked = logits.copy()
    masked[np.arange(len(labels)), labels] = -np.inf
    return logits[np.arange(len(labels)), labels] - masked.max(axis=1)


def predict(params: ModelParams, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Argmax class per row, evaluated in chunks to bound memory."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    for lo in range(0, x.shape[0], chunk):
        hi = min(lo + chunk, x.shape[0])
        out[lo:hi] = np.argmax(forward_logits_np(params, x[lo:hi]), axis=1)
    return out


def accuracy(params: ModelParams, x: np.ndarray, labels) -> float:
    return float(np.mean(predict(params, x) == np.asarray(labels)))


# ---------------------------------------------------------------------------
# checkpoints: JSON container, float64 little-endian base64 payloads


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _decode(text: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode())
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise ValueError(f"checkpoint array payload: {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Write a checkpoint; round-trips bit-exactly. Atomic on POSIX."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": {
            "widths": list(params.arch.widths),
            "activation": params.arch.activation,
        },
        "seed": params.seed,
        "layers": [
            {"weight": _encode(w), "bias": _encode(b)}
            for w, b in zip(params.weights, params.biases)
        ],
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a model checkpoint: format tag {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    arch = Architecture(
        tuple(doc["architecture"]["widths"]), doc["architecture"]["activation"]
    )
    weights, biases = [], []
    for li, (fan_in, fan_out) in enumerate(zip(arch.widths, arch.widths[1:])):
        layer = doc["layers"][li]
        weights.append(_decode(layer["weight"], (fan_out, fan_in)))
        biases.append(_decode(layer["bias"], (fan_out,)))
    return ModelParams(arch, tuple(weights), tuple(biases), int(doc["seed"]))
