"""Tape-based reverse-mode autodiff over dense float64 tensors.

A :class:`Graph` is an append-only list of nodes, each holding an op kind,
input node ids, and an eagerly computed value. :func:`backward` appends the
adjoint computation to the *same* graph using the same differentiable
primitives, so gradients are ordinary nodes and can be differentiated again
(double backprop). That property is what the whole package leans on: the
training objective contains the 1-norm of an input gradient, and its
parameter gradient needs mixed second derivatives.

Non-differentiable primitives (``sign`` and the argmax mask behind
``max_over_axis``) propagate a zero adjoint, i.e. the usual subgradient
convention with sign(0) = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NodeId = int

__all__ = [
    "AutodiffError",
    "ShapeMismatch",
    "NonFiniteValue",
    "Graph",
    "NodeId",
    "record",
    "backward",
    "grad_norm1",
    "finite_diff_gradient",
]


class AutodiffError(Exception):
    """Base class for graph construction/differentiation failures."""


class ShapeMismatch(AutodiffError):
    """Operands have incompatible shapes; the message names both."""


class NonFiniteValue(AutodiffError):
    """An op produced (or was asked to differentiate through) NaN/Inf."""


def _as_value(value, kind: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64, order="C", copy=True)
    if arr.size == 0:
        raise ShapeMismatch(f"empty tensors are not allowed (shape {arr.shape})")
    _check_finite(arr, kind)
    arr.flags.writeable = False
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    # min/max propagate NaN and catch +-Inf without allocating a bool mask.
    lo, hi = arr.min(), arr.max()
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise NonFiniteValue(f"'{op}': non-finite value (NaN or Inf)")


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[NodeId, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


class Graph:
    """Append-only computation tape.

    Node ids are indices into ``nodes``; every node's inputs have strictly
    smaller ids, so the list order is a topological order. ``leaves`` holds
    the ids marked differentiable at creation time.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.leaves: set[NodeId] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: Node) -> NodeId:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, value) -> NodeId:
        """Add a differentiable input node."""
        nid = self._append(Node("leaf", (), _as_value(value, "leaf")))
        self.leaves.add(nid)
        return nid

    def constant(self, value) -> NodeId:
        """Add a non-differentiable input node."""
        return self._append(Node("const", (), _as_value(value, "const")))

    def value(self, nid: NodeId) -> np.ndarray:
        return self.nodes[nid].value

    def shape(self, nid: NodeId) -> tuple[int, ...]:
        return self.nodes[nid].value.shape

    def replay(self, leaf_values: dict[NodeId, np.ndarray] | None = None) -> "Graph":
        """Re-execute the recorded op sequence, optionally overriding leaves.

        Returns a fresh graph whose node values are recomputed from scratch;
        with identical leaf values the result is bit-identical.
        """
        overrides = leaf_values or {}
        out = Graph()
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf":
                out.leaf(overrides.get(nid, node.value))
            elif node.op == "const":
                out.constant(overrides.get(nid, node.value))
            else:
                record(out, node.op, list(node.inputs), **node.attrs)
        return out


# ---------------------------------------------------------------------------
# forward rules


def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"op '{op}': operand shapes {a.shape} and {b.shape} differ")


def _fwd_add(a, b):
    _require_same_shape("add", a, b)
    return a + b


def _fwd_sub(a, b):
    _require_same_shape("sub", a, b)
    return a - b


def _fwd_mul(a, b):
    _require_same_shape("mul", a, b)
    return a * b


def _fwd_matmul(a, b, *, ta=False, tb=False):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"op 'matmul': need 2-D operands, got {a.shape} and {b.shape}")
    aa = a.T if ta else a
    bb = b.T if tb else b
    if aa.shape[1] != bb.shape[0]:
        raise ShapeMismatch(
            f"op 'matmul': inner dims of {aa.shape} and {bb.shape} do not match"
        )
    return aa @ bb


def _fwd_softplus(a):
    return np.logaddexp(0.0, a)


def _fwd_exp(a):
    return np.exp(a)


def _fwd_logsumexp(a, *, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeMismatch(f"op 'logsumexp': axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    m = np.max(a, axis=axis, keepdims=True)
    rest = np.exp(a - m)
    # Zero out one max entry per lane so log1p keeps sub-eps tails exact;
    # this is what makes the loss strictly positive at huge finite margins.
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    np.put_along_axis(rest, idx, 0.0, axis=axis)
    return np.squeeze(m, axis=axis) + np.log1p(np.sum(rest, axis=axis))


def _fwd_sum(a, *, axis=None):
    return np.sum(a, axis=axis)


def _fwd_abs(a):
    return np.abs(a)


def _fwd_sign(a):
    return np.sign(a)


def _fwd_scale(a, *, factor):
    return a * float(factor)


def _fwd_slice(a, *, bounds):
    if len(bounds) != a.ndim:
        raise ShapeMismatch(
            f"op 'slice': got {len(bounds)} bounds for array of shape {a.shape}"
        )
    for dim, (start, stop) in zip(a.shape, bounds):
        if not (0 <= start < stop <= dim):
            raise ShapeMismatch(f"op 'slice': bounds {bounds} invalid for shape {a.shape}")
    return a[tuple(slice(s, t) for s, t in bounds)]


def _fwd_pad(a, *, shape, offsets):
    out = np.zeros(shape, dtype=np.float64)
    region = tuple(slice(o, o + d) for o, d in zip(offsets, a.shape))
    out[region] = a
    return out


def _fwd_reshape(a, *, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"op 'reshape': cannot reshape {a.shape} to {tuple(shape)}")
    return a.reshape(shape)


def _fwd_broadcast(a, *, shape):
    try:
        return np.broadcast_to(a, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"op 'broadcast': {a.shape} to {tuple(shape)}: {exc}") from exc


def _fwd_max_over_axis(a, *, axis):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeMismatch(f"op 'max_over_axis': axis {axis} out of range for {a.shape}")
    return np.max(a, axis=axis)


_FORWARD: dict[str, Callable] = {
    "add": _fwd_add,
    "sub": _fwd_sub,
    "mul": _fwd_mul,
    "matmul": _fwd_matmul,
    "softplus": _fwd_softplus,
    "exp": _fwd_exp,
    "logsumexp": _fwd_logsumexp,
    "sum": _fwd_sum,
    "abs": _fwd_abs,
    "sign": _fwd_sign,
    "scale": _fwd_scale,
    "slice": _fwd_slice,
    "pad": _fwd_pad,
    "reshape": _fwd_reshape,
    "broadcast": _fwd_broadcast,
    "max_over_axis": _fwd_max_over_axis,
}


def record(graph: Graph, op: str, inputs: Sequence[NodeId], **attrs) -> NodeId:
    """Append an op node, computing its value eagerly.

    Raises :class:`ShapeMismatch` for incompatible operands and
    :class:`NonFiniteValue` if the result contains NaN/Inf.
    """
    fwd = _FORWARD.get(op)
    if fwd is None:
        raise AutodiffError(f"unknown op kind '{op}'")
    n = len(graph.nodes)
    ids = tuple(int(i) for i in inputs)
    for i in ids:
        if not 0 <= i < n:
            raise AutodiffError(f"op '{op}': input id {i} not in graph of size {n}")
    # Overflow and friends are detected by the finiteness check below, so
    # numpy's own warnings are just noise here.
    with np.errstate(all="ignore"):
        value = fwd(*(graph.nodes[i].value for i in ids), **attrs)
    value = np.asarray(value, dtype=np.float64)
    _check_finite(value, op)
    if value.flags.writeable:
        value.flags.writeable = False
    return graph._append(Node(op, ids, value, attrs))


# convenience wrappers, used throughout the package

def add(g, a, b):
    return record(g, "add", [a, b])


def sub(g, a, b):
    return record(g, "sub", [a, b])


def mul(g, a, b):
    return record(g, "mul", [a, b])


def matmul(g, a, b, ta=False, tb=False):
    return record(g, "matmul", [a, b], ta=ta, tb=tb)


def softplus(g, a):
    return record(g, "softplus", [a])


def exp(g, a):
    return record(g, "exp", [a])


def logsumexp(g, a, axis):
    return record(g, "logsumexp", [a], axis=axis)


def sum_(g, a, axis=None):
    return record(g, "sum", [a], axis=axis)


def abs_(g, a):
    return record(g, "abs", [a])


def sign(g, a):
    return record(g, "sign", [a])


def scale(g, a, factor):
    return record(g, "scale", [a], factor=float(factor))


def reshape(g, a, shape):
    return record(g, "reshape", [a], shape=tuple(int(s) for s in shape))


def broadcast(g, a, shape):
    return record(g, "broadcast", [a], shape=tuple(int(s) for s in shape))


def slice_(g, a, bounds):
    return record(g, "slice", [a], bounds=tuple((int(s), int(t)) for s, t in bounds))


def max_over_axis(g, a, axis):
    return record(g, "max_over_axis", [a], axis=axis)


# ---------------------------------------------------------------------------
# reverse rules
#
# Each rule receives (graph, node, its own id, upstream adjoint id, wanted
# mask) and
# returns one contribution id per input; None means zero contribution (either
# non-differentiable or not requested). Rules emit ordinary graph ops, so
# adjoints are differentiable in turn.


def _keepdims_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    axis = axis % len(shape)
    return tuple(1 if i == axis else d for i, d in enumerate(shape))


def _vjp_add(g, node, out, up, wanted):
    return [up if wanted[0] else None, up if wanted[1] else None]


def _vjp_sub(g, node, out, up, wanted):
    return [up if wanted[0] else None, scale(g, up, -1.0) if wanted[1] else None]


def _vjp_mul(g, node, out, up, wanted):
    a, b = node.inputs
    return [
        mul(g, up, b) if wanted[0] else None,
        mul(g, up, a) if wanted[1] else None,
    ]


def _vjp_matmul(g, node, out, up, wanted):
    a, b = node.inputs
    ta, tb = node.attrs["ta"], node.attrs["tb"]
    da = db = None
    if wanted[0]:
        if not ta:
            da = matmul(g, up, b, ta=False, tb=not tb)
        else:
            da = matmul(g, b, up, ta=tb, tb=True)
    if wanted[1]:
        if not tb:
            db = matmul(g, a, up, ta=not ta, tb=False)
        else:
            db = matmul(g, up, a, ta=True, tb=ta)
    return [da, db]


def _vjp_softplus(g, node, out, up, wanted):
    (a,) = node.inputs
    # sigmoid(x) = exp(x - softplus(x)); the exponent is always <= 0.
    sig = exp(g, sub(g, a, out))
    return [mul(g, up, sig)]


def _vjp_exp(g, node, out, up, wanted):
    return [mul(g, up, out)]


def _vjp_logsumexp(g, node, out, up, wanted):
    (a,) = node.inputs
    axis = node.attrs["axis"]
    in_shape = g.shape(a)
    keep = _keepdims_shape(in_shape, axis)
    lse_b = broadcast(g, reshape(g, out, keep), in_shape)
    softmax = exp(g, sub(g, a, lse_b))
    up_b = broadcast(g, reshape(g, up, keep), in_shape)
    return [mul(g, up_b, softmax)]


def _vjp_sum(g, node, out, up, wanted):
    (a,) = node.inputs
    in_shape = g.shape(a)
    axis = node.attrs["axis"]
    if axis is None:
        return [broadcast(g, reshape(g, up, (1,) * len(in_shape)), in_shape)]
    keep = _keepdims_shape(in_shape, axis)
    return [broadcast(g, reshape(g, up, keep), in_shape)]


def _vjp_abs(g, node, out, up, wanted):
    (a,) = node.inputs
    return [mul(g, up, sign(g, a))]


def _vjp_scale(g, node, out, up, wanted):
    return [scale(g, up, node.attrs["factor"])]


def _vjp_slice(g, node, out, up, wanted):
    (a,) = node.inputs
    offsets = tuple(s for s, _ in node.attrs["bounds"])
    return [record(g, "pad", [up], shape=g.shape(a), offsets=offsets)]


def _vjp_pad(g, node, out, up, wanted):
    (a,) = node.inputs
    offs = node.attrs["offsets"]
    bounds = tuple((o, o + d) for o, d in zip(offs, g.shape(a)))
    return [slice_(g, up, bounds)]


def _vjp_reshape(g, node, out, up, wanted):
    (a,) = node.inputs
    return [reshape(g, up, g.shape(a))]


def _vjp_broadcast(g, node, out, up, wanted):
    (a,) = node.inputs
    in_shape = g.shape(a)
    out_shape = node.attrs["shape"]
    pad_shape = (1,) * (len(out_shape) - len(in_shape)) + tuple(in_shape)
    acc = up
    for ax in reversed(range(len(out_shape))):
        if pad_shape[ax] == 1 and out_shape[ax] != 1:
            acc = sum_(g, acc, axis=ax)
    return [reshape(g, acc, in_shape)]


def _vjp_max_over_axis(g, node, out, up, wanted):
    (a,) = node.inputs
    axis = node.attrs["axis"] % len(g.shape(a))
    in_shape = g.shape(a)
    keep = _keepdims_shape(in_shape, axis)
    # One winner per lane (first argmax); the mask is a constant, so the
    # adjoint through it is the standard subgradient.
    val = g.value(a)
    mask = np.zeros(in_shape)
    np.put_along_axis(mask, np.expand_dims(np.argmax(val, axis), axis), 1.0, axis=axis)
    up_b = broadcast(g, reshape(g, up, keep), in_shape)
    return [mul(g, up_b, g.constant(mask))]


_REVERSE: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "matmul": _vjp_matmul,
    "softplus": _vjp_softplus,
    "exp": _vjp_exp,
    "logsumexp": _vjp_logsumexp,
    "sum": _vjp_sum,
    "abs": _vjp_abs,
    "sign": None,  # non-differentiable by convention
    "scale": _vjp_scale,
    "slice": _vjp_slice,
    "pad": _vjp_pad,
    "reshape": _vjp_reshape,
    "broadcast": _vjp_broadcast,
    "max_over_axis": _vjp_max_over_axis,
}


def backward(graph: Graph, output: NodeId, wrt: Sequence[NodeId]) -> list[NodeId]:
    """Append adjoint nodes for d(output)/d(wrt item) and return their ids.

    ``output`` must be scalar-shaped. A wrt node that the output does not
    depend on yields a zero tensor of its shape (documented convention, not
    an error). The returned nodes are regular graph nodes, so any scalar
    function of them can be differentiated again.
    """
    out_node = graph.nodes[output]
    if out_node.value.size != 1:
        raise ShapeMismatch(
            f"backward: output must be scalar-shaped, got shape {out_node.value.shape}"
        )
    wrt = [int(w) for w in wrt]

    # Nodes the output depends on, walking input edges.
    reachable: set[NodeId] = set()
    stack = [output]
    while stack:
        nid = stack.pop()
        if nid in reachable:
            continue
        reachable.add(nid)
        stack.extend(graph.nodes[nid].inputs)

    # Nodes through which gradient must flow to hit some wrt target.
    needed: set[NodeId] = set()
    wrt_set = set(wrt)
    for nid in sorted(reachable):
        node = graph.nodes[nid]
        if nid in wrt_set or any(i in needed for i in node.inputs):
            needed.add(nid)

    adjoint: dict[NodeId, NodeId] = {}
    if output in needed:
        adjoint[output] = graph.constant(np.ones(out_node.value.shape))

    for nid in sorted(reachable, reverse=True):
        up = adjoint.get(nid)
        if up is None:
            continue
        node = graph.nodes[nid]
        if node.op in ("leaf", "const"):
            continue
        rule = _REVERSE[node.op]
        if rule is None:
            continue
        wanted = tuple(i in needed for i in node.inputs)
        if not any(wanted):
            continue
        contribs = rule(graph, node, nid, up, wanted)
        for inp, contrib in zip(node.inputs, contribs):
            if contrib is None or inp not in needed:
                continue
            prev = adjoint.get(inp)
            adjoint[inp] = contrib if prev is None else add(graph, prev, contrib)

    results = []
    for w in wrt:
        got = adjoint.get(w)
        if got is None:
            got = graph.constant(np.zeros(graph.shape(w)))
        results.append(got)
    return results


def grad_norm1(graph: Graph, loss: NodeId, input: NodeId) -> NodeId:
    """Scalar node for the 1-norm of d(loss)/d(input), itself differentiable.

    Uses the sign(0) = 0 subgradient for the absolute value, so the node is
    well-defined at kinks.
    """
    if input not in graph.leaves:
        raise AutodiffError("grad_norm1: input must be a leaf node")
    (gx,) = backward(graph, loss, [input])
    return sum_(graph, abs_(graph, gx))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Independent of the graph machinery on purpose: it is the oracle the
    reverse-mode results are checked against.
    """
    if not h > 0:
        raise ValueError(f"finite_diff_gradient: step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        for s, dest in ((+1.0, 0), (-1.0, 1)):
            pert = flat.copy()
            pert[i] += s * h
            val = float(f(pert.reshape(x.shape)))
            if not np.isfinite(val):
                raise NonFiniteValue(
                    f"finite_diff_gradient: f returned non-finite value at coordinate {i}"
                )
            if dest == 0:
                f_plus = val
            else:
                f_minus = val
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)
