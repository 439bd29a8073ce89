"""Minimal reverse-mode automatic differentiation on float64 numpy arrays,
with a gradient reversal layer and its lambda schedule."""

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyList, MalformedHeader, NonFinite, NonScalarLoss, OutOfRangeStep, ShapeMismatch

CHECKPOINT_MAGIC = b"VXCK"


class Tensor:
    """A node of the dynamic tape: values, accumulated grad, backward rule."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        self.values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NonFinite("tensor holds non-finite values")
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # convenience arithmetic used all over the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_values = a.values + b.values

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out_values, _parents=(a, b), _backward=backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_values = a.values * b.values

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return Tensor(out_values, _parents=(a, b), _backward=backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.shape[-1] != b.values.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out_values = a.values @ b.values

    def backward(g):
        ga = g @ b.values.T if b.values.ndim == 2 else np.outer(g, b.values)
        gb = a.values.T @ g
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return Tensor(out_values, _parents=(a, b), _backward=backward)


def relu(x):
    x = _as_tensor(x)
    mask = x.values > 0

    def backward(g):
        return (g * mask,)

    return Tensor(np.where(mask, x.values, 0.0), _parents=(x,), _backward=backward)


def tanh(x):
    x = _as_tensor(x)
    y = np.tanh(x.values)

    def backward(g):
        return (g * (1.0 - y ** 2),)

    return Tensor(y, _parents=(x,), _backward=backward)


def log(x):
    x = _as_tensor(x)

    def backward(g):
        return (g / x.values,)

    return Tensor(np.log(x.values), _parents=(x,), _backward=backward)


def softmax(x, axis=-1):
    x = _as_tensor(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor(y, _parents=(x,), _backward=backward)


def mean(x, axis=None):
    x = _as_tensor(x)
    out_values = x.values.mean(axis=axis)
    count = x.values.size if axis is None else x.values.shape[axis]

    def backward(g):
        if axis is None:
            return (np.full(x.shape, g / count),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / count,)

    return Tensor(out_values, _parents=(x,), _backward=backward)


def sum_(x, axis=None):
    x = _as_tensor(x)
    out_values = x.values.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(x.shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor(out_values, _parents=(x,), _backward=backward)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.values.shape[axis] for t in tensors]
    out_values = np.concatenate([t.values for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return Tensor(out_values, _parents=tuple(tensors), _backward=backward)


def embedding(table, ids):
    """Row lookup: table is (V, d), ids a 1-D integer array."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeMismatch("ids must be 1-D")
    if ids.min(initial=0) < 0 or (len(ids) and ids.max() >= table.shape[0]):
        raise ShapeMismatch("embedding id out of range")

    def backward(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor(table.values[ids], _parents=(table,), _backward=backward)


def grl_apply(x, lam):
    """Gradient reversal layer: identity forward, gradient times -lam backward."""
    x = _as_tensor(x)
    if lam < 0:
        raise ValueError("lambda must be non-negative")

    def backward(g):
        return (-lam * g,)

    return Tensor(x.values.copy(), _parents=(x,), _backward=backward)


def backward(loss):
    """Reverse-topological gradient propagation from a scalar loss."""
    if loss.values.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or not node._parents:
            node.accumulate(g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NonFinite("non-finite gradient encountered")
            if id(p) in grads:
                grads[id(p)] += pg
            else:
                grads[id(p)] = pg.astype(np.float64, copy=True)


@dataclass(frozen=True)
class LambdaSchedule:
    gamma: float = 10.0
    total_updates: int = 1
    fixed_lambda: Optional[float] = None

    def __post_init__(self):
        if self.gamma <= 0 or self.total_updates <= 0:
            raise ValueError("gamma and total_updates must be positive")


def lambda_at(schedule: LambdaSchedule, updates_done: int) -> float:
    """lambda = 2 / (1 + exp(-gamma * p)) - 1, with p the training progress."""
    if not 0 <= updates_done <= schedule.total_updates:
        raise OutOfRangeStep(f"updates_done {updates_done} outside [0, {schedule.total_updates}]")
    if schedule.fixed_lambda is not None:
        return schedule.fixed_lambda
    p = updates_done / schedule.total_updates
    return 2.0 / (1.0 + np.exp(-schedule.gamma * p)) - 1.0


def save_checkpoint(params: dict, path) -> None:
    """Little-endian binary: magic, u32 count, then per parameter
    (u32 name length, name bytes, u32 rank, u32 dims..., float64 data)."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + struct.pack("<I", len(params)))
        for name, values in params.items():
            arr = np.asarray(values, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)) + encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8 or head[:4] != CHECKPOINT_MAGIC:
            raise MalformedHeader(f"{path}: bad checkpoint magic")
        (count,) = struct.unpack("<I", head[4:])
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8")
            if data.size != n:
                raise MalformedHeader(f"{path}: truncated parameter {name}")
            params[name] = data.reshape(dims).astype(np.float64)
    return params


def average_checkpoints(ckpts: list) -> dict:
    """Elementwise arithmetic mean of parameter dicts."""
    if not ckpts:
        raise EmptyList("no checkpoints to average")
    names = set(ckpts[0])
    for c in ckpts[1:]:
        if set(c) != names or any(c[n].shape != ckpts[0][n].shape for n in names):
            raise ShapeMismatch("checkpoints disagree on parameter names or shapes")
    return {n: np.mean([c[n] for c in ckpts], axis=0) for n in names}
