"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Each op builds a Tensor node holding its parents and a closure that maps the
output gradient to per-parent gradients. backward() walks the reachable graph
in reverse creation order, so gradient sums always accumulate in the same
order and repeated runs are bitwise identical.

Broadcasting is deliberately narrow: ops accept exactly the shape patterns the
toy transformer needs (documented per op) and reject everything else.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterator

import numpy as np

from .errors import ContractError, DataError, DimensionError, NumericError

_node_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaf tensors created with requires_grad=True are parameters; backward()
    fills their .grad. Tensors hash by identity, never by value.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._node_id = next(_node_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Trainable leaf with its own storage (safe to mutate in place)."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn, op_name: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite output of {op_name}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    out._node_id = next(_node_counter)
    return out


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (k, m), or batched with matching leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2 operands, got {a.data.ndim} and {b.data.ndim}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims incompatible: {a.data.shape} @ {b.data.shape}") from exc

    def grad_fn(g):
        ga = _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.data.shape) if a.requires_grad else None
        gb = _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), grad_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; shapes must match exactly (no implicit broadcast)."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def grad_fn(g):
        return (g if a.requires_grad else None, g if b.requires_grad else None)

    return _node(out, (a, b), grad_fn, "add")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product. Same shapes, or one operand 1-D matching the other's last dim."""
    sa, sb = a.data.shape, b.data.shape
    conforms = (
        sa == sb
        or (len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0])
        or (len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0])
    )
    if not conforms:
        raise DimensionError(f"elementwise_mul shape mismatch: {sa} vs {sb}")
    out = a.data * b.data

    def grad_fn(g):
        ga = _reduce_to(g * b.data, sa) if a.requires_grad else None
        gb = _reduce_to(g * a.data, sb) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), grad_fn, "elementwise_mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    if not np.isfinite(c):
        raise NumericError(f"scale factor must be finite, got {c}")
    out = a.data * c

    def grad_fn(g):
        return (g * c if a.requires_grad else None,)

    return _node(out, (a,), grad_fn, "scale")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the FFN gate nonlinearity."""
    s = _sigmoid(x.data)
    out = x.data * s

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _node(out, (x,), grad_fn, "silu_activation")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for overflow safety."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (x,), grad_fn, "softmax_lastdim")


def rms_normalize(x: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2, last axis) + eps), no learned gain."""
    n = x.data.shape[-1]
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    out = x.data * inv

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        inner = (g * x.data).sum(axis=-1, keepdims=True)
        return (inv * (g - x.data * (inner * inv * inv / n)),)

    return _node(out, (x,), grad_fn, "rms_normalize")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather: table (V, d) indexed by an integer id array -> ids.shape + (d,)."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DataError(f"embedding ids must be integers, got dtype {idx.dtype}")
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got shape {table.data.shape}")
    V, d = table.data.shape
    if idx.size and (idx.min() < 0 or idx.max() >= V):
        raise DataError(f"embedding id out of range [0, {V})")
    out = table.data[idx]

    def grad_fn(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _node(out, (table,), grad_fn, "embedding_lookup")


def cross_entropy_mean(logits: Tensor, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over non-ignored target positions.

    logits: (..., V); targets: integer array of shape logits.shape[:-1].
    Positions equal to ignore_index contribute nothing to loss or gradient.
    """
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        raise DataError(f"targets must be integers, got dtype {t.dtype}")
    if t.shape != logits.data.shape[:-1]:
        raise DimensionError(f"target shape {t.shape} does not match logits {logits.data.shape}")
    V = logits.data.shape[-1]
    valid = t != ignore_index
    if (t[valid] < 0).any() or (t[valid] >= V).any():
        raise DataError(f"target id out of range [0, {V})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy_mean: no supervised positions in batch")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat_logp = logp.reshape(-1, V)
    flat_t = t.reshape(-1)
    flat_valid = valid.reshape(-1)
    rows = np.nonzero(flat_valid)[0]
    picked = flat_logp[rows, flat_t[rows]]
    loss = np.asarray(-picked.sum() / n_valid)
    probs = np.exp(logp)

    def grad_fn(g):
        if not logits.requires_grad:
            return (None,)
        gx = probs.reshape(-1, V).copy()
        gx[rows, flat_t[rows]] -= 1.0
        gx[~flat_valid] = 0.0
        gx *= float(g) / n_valid
        return (gx.reshape(x.shape),)

    return _node(loss, (logits,), grad_fn, "cross_entropy_mean")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.data.shape} to {shape}") from exc

    def grad_fn(g):
        return (g.reshape(x.data.shape) if x.requires_grad else None,)

    return _node(out, (x,), grad_fn, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.data.ndim)):
        raise DimensionError(f"transpose axes {axes} invalid for ndim {x.data.ndim}")
    out = np.transpose(x.data, axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse) if x.requires_grad else None,)

    return _node(out, (x,), grad_fn, "transpose")


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum())

    def grad_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(np.asarray(g), x.data.shape),)

    return _node(out, (x,), grad_fn, "sum_all")


OP_KINDS = (
    "matmul",
    "add",
    "elementwise_mul",
    "scale",
    "silu_activation",
    "softmax_lastdim",
    "rms_normalize",
    "embedding_lookup",
    "cross_entropy_mean",
)

_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "elementwise_mul": elementwise_mul,
    "scale": scale,
    "silu_activation": silu,
    "softmax_lastdim": softmax_lastdim,
    "rms_normalize": rms_normalize,
    "embedding_lookup": embedding_lookup,
    "cross_entropy_mean": cross_entropy_mean,
}


def apply(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch one of the supported ops by name."""
    if op_kind not in _DISPATCH:
        raise ContractError(f"unknown op kind {op_kind!r}; supported: {OP_KINDS}")
    return _DISPATCH[op_kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss.

    Returns a map keyed by the reachable requires_grad leaf tensors; a
    parameter with no path to the loss is absent, never zero-filled. Also
    writes each leaf's .grad (fresh buffer, not accumulated across calls).
    """
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any requires_grad parameter")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._node_id not in nodes:
            nodes[t._node_id] = t
            stack.extend(t._parents)

    # Reverse creation order is a valid topological order of the tape.
    ordered = sorted(nodes.values(), key=lambda t: -t._node_id)
    pending: dict[int, np.ndarray] = {loss._node_id: np.ones((), dtype=np.float64)}
    grads: dict[Tensor, np.ndarray] = {}
    for t in ordered:
        g = pending.pop(t._node_id, None)
        if g is None:
            continue
        if t._grad_fn is not None:
            for parent, pg in zip(t._parents, t._grad_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = pending.get(parent._node_id)
                # never in-place: gradient arrays may be shared between nodes
                pending[parent._node_id] = pg if prev is None else prev + pg
        elif t.requires_grad:
            buf = np.asarray(g, dtype=np.float64)
            if buf.shape != t.data.shape:
                buf = np.broadcast_to(buf, t.data.shape)
            if not buf.flags.owndata or not buf.flags.writeable:
                buf = buf.copy()
            t.grad = buf
            grads[t] = buf
    return grads


def finite_difference_gradient(
    f: Callable[[], float],
    params: list[Tensor],
    eps: float = 1e-5,
) -> dict[Tensor, np.ndarray]:
    """Central-difference gradients, the test oracle for backward().

    f re-evaluates the scalar objective from the params' current .data; it is
    called 2 * total_parameter_count times. Parameter values are restored
    exactly afterwards.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    out: dict[Tensor, np.ndarray] = {}
    for p in params:
        flat = p.data.reshape(-1)
        grad = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f())
            flat[i] = orig - eps
            f_minus = float(f())
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * eps)
        out[p] = grad.reshape(p.data.shape)
    return out
