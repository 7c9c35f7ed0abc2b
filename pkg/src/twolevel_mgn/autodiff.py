"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when any input
requires a gradient. Outside a tape nothing is recorded, so inference runs
without bookkeeping::

    with Tape() as tape:
        loss = l2_loss(model(x), y)
        tape.backward(loss)
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __getitem__(self, key):
        return slice_(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations executed inside ``with``."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        out.requires_grad = True
        out._leaf = False
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

        Leaves used on the tape but not influencing ``loss`` receive zeros.
        The tape is cleared afterwards.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            for t in node.inputs:
                if t._leaf and t.requires_grad:
                    leaves[id(t)] = t
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if loss._leaf and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes.clear()


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor):
    tape = current_tape()
    if tape is None:
        raise RuntimeError("backward() called outside a Tape context")
    tape.backward(loss)


def _make(data, inputs, backward) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sum_(x: Tensor) -> Tensor:
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` with ``W`` shaped (in, out)."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    if b is None:
        return matmul(x, W)
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    return _make(x.data @ W.data + b.data, (x, W, b),
                 lambda g: (g @ W.data.T, x.data.T @ g, g.sum(axis=0)))


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for ax, (s, r) in enumerate(zip(t.shape, ref)) if ax != axis % len(ref)
        ):
            raise ShapeError(f"concat axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def slice_(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    data = x.data[key]

    def bw(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _make(np.array(data, copy=True), (x,), bw)


def _segment_reduce(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` into ``n`` buckets, each bucket in ascending row order."""
    out = np.zeros((n,) + values.shape[1:])
    if len(index) == 0:
        return out
    if np.all(index[1:] >= index[:-1]):
        order = None
        idx = index
    else:
        order = np.argsort(index, kind="stable")
        idx = index[order]
        values = values[order]
    starts = np.flatnonzero(np.concatenate([[True], idx[1:] != idx[:-1]]))
    out[idx[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError("gather_rows: index out of range")

    return _make(x.data[index], (x,), lambda g: (_segment_reduce(g, index, x.shape[0]),))


def segment_sum(values: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Row ``s`` of the result sums rows of ``values`` whose index is ``s``.

    Each segment accumulates its rows in ascending row order, so results are
    reproducible bit for bit.
    """
    index = np.asarray(index, dtype=np.int64)
    if len(index) != values.shape[0]:
        raise ShapeError(f"segment_sum: {len(index)} indices for {values.shape[0]} rows")
    if index.size and (index.min() < 0 or index.max() >= num_segments):
        raise IndexError(f"segment_sum: index out of range for {num_segments} segments")
    out = _segment_reduce(values.data, index, num_segments)
    return _make(out, (values,), lambda g: (g[index],))


def segment_sum_edges(edge_values: Tensor, receiver: np.ndarray, num_nodes: int) -> Tensor:
    return segment_sum(edge_values, receiver, num_nodes)


def segment_mean(values: Tensor, assignment: np.ndarray, num_groups: int) -> Tensor:
    assignment = np.asarray(assignment, dtype=np.int64)
    if len(assignment) != values.shape[0]:
        raise ShapeError(f"segment_mean: assignment covers {len(assignment)} rows, values have {values.shape[0]}")
    counts = np.bincount(assignment, minlength=num_groups).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("segment_mean: empty group")
    out = _segment_reduce(values.data, assignment, num_groups) / counts[:, None]
    return _make(out, (values,), lambda g: ((g / counts[:, None])[assignment],))


# ------------------------------------------------------------ normalisation

def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row to zero mean and unit variance, then apply ``gain`` and ``bias``."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}, {bias.shape} for width {h}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).reshape(-1, h).sum(axis=0), g.reshape(-1, h).sum(axis=0)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw)


# ------------------------------------------------------------------- checks

def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over every parameter entry.

    ``f`` takes no arguments and reads ``params`` in place; it is evaluated
    once under a tape for the analytic gradient and twice per coordinate for
    central differences.
    """
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
