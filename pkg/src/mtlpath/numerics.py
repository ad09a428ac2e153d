"""Dense tensors with tape-based reverse-mode gradients, Adam, and a gradient checker.

Every op builds its output eagerly and, when any operand needs a gradient,
records a closure mapping the upstream gradient to operand gradients. The
tape is implicit in the parent links and is dropped after ``backward``.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

_DTYPE = np.float32

# op name -> multiplier applied to that op's operand gradients (test hook)
_GRAD_FAULTS: dict[str, float] = {}

TASKS = ("shared", "path", "dkt")


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the compute dtype (float64 is meant for oracle runs)."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 1.5) -> Iterator[None]:
    """Scale the backward rule of ``op`` by ``factor``; negative control for gradcheck."""
    _GRAD_FAULTS[op] = factor
    try:
        yield
    finally:
        _GRAD_FAULTS.pop(op, None)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # scalar-with-tensor is the only broadcast allowed
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# --- ops -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = _DTYPE(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * c, (a,), backward, "scale")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows and gives exactly 0.5 at 0
    s = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.data.dtype, copy=False)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _result(s, (a,), backward, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _result(t, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward, "relu")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), backward, "softmax_rows")


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(a, floor)``; no gradient flows where the floor is active."""
    x = a.data
    live = x > floor if floor > 0 else np.ones(x.shape, dtype=bool)
    safe = np.maximum(x, _DTYPE(floor)) if floor > 0 else x

    def backward(g):
        return (np.where(live, g / safe, 0).astype(g.dtype),)

    return _result(np.log(safe), (a,), backward, "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    live = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * live,)

    return _result(np.clip(a.data, _DTYPE(lo), _DTYPE(hi)), (a,), backward, "clip")


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(g.dtype),)

    out = a.data.sum() if axis is None else a.data.sum(axis=axis)
    return _result(np.asarray(out, dtype=a.data.dtype), (a,), backward, "sum")


def reduce_mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / a.data.size)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` with ``b`` broadcast over rows."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")

    def backward(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ w.data + b.data, (x, w, b), backward, "linear")


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward, "concat")


def stack(parts: list[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _result(np.stack([p.data for p in parts], axis=axis), parts, backward, "stack")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop], (a,), backward, "slice")


def select(a: Tensor, index: int, axis: int = 1) -> Tensor:
    """``a`` indexed at ``index`` along ``axis`` (that axis is dropped)."""

    def backward(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _result(np.take(a.data, index, axis=axis), (a,), backward, "select")


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"take_rows: index out of range [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _result(table.data[ids], (table,), backward, "take_rows")


def pick(a: Tensor, ids) -> Tensor:
    """Gather ``a[..., ids]`` elementwise along the last axis; ``ids`` has shape ``a.shape[:-1]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError(f"pick: ids shape {ids.shape} does not match {a.shape[:-1]}")
    idx = ids[..., None]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _result(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), backward, "pick")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def bmm_vec(mat: Tensor, vec: Tensor) -> Tensor:
    """Batched matrix-vector product: ``[b, t, h] x [b, h] -> [b, t]``."""
    if mat.data.ndim != 3 or vec.data.ndim != 2 or mat.shape[::2] != vec.shape:
        raise ShapeError(f"bmm_vec: cannot contract {mat.shape} with {vec.shape}")

    def backward(g):
        return g[:, :, None] * vec.data[:, None, :], np.einsum("bt,bth->bh", g, mat.data)

    return _result(np.einsum("bth,bh->bt", mat.data, vec.data), (mat, vec), backward, "bmm_vec")


def weighted_sum(weights: Tensor, mat: Tensor) -> Tensor:
    """``[b, t] x [b, t, h] -> [b, h]``: sum of rows of ``mat`` under ``weights``."""
    if mat.data.ndim != 3 or weights.shape != mat.shape[:2]:
        raise ShapeError(f"weighted_sum: {weights.shape} against {mat.shape}")

    def backward(g):
        return np.einsum("bh,bth->bt", g, mat.data), weights.data[:, :, None] * g[:, None, :]

    return _result(np.einsum("bt,bth->bh", weights.data, mat.data), (weights, mat), backward, "weighted_sum")


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax_rows": softmax_rows,
}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*[as_tensor(x) for x in inputs])


# --- parameters and backprop ---------------------------------------------


class ParameterStore:
    """Named trainable tensors in insertion order, each tagged with a task."""

    def __init__(self):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        self._tasks: dict[str, str] = {}

    def add(self, name: str, value, task: str = "shared") -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        if task not in TASKS:
            raise ContractError(f"task tag must be one of {TASKS}, got {task!r}")
        t = Tensor(value, requires_grad=True)
        self._entries[name] = t
        self._tasks[name] = task
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def task_of(self, name: str) -> str:
        return self._tasks[name]

    def names(self, task: str | None = None) -> list[str]:
        return [n for n in self._entries if task is None or self._tasks[n] == task]

    def zero_grads(self) -> None:
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def copy(self) -> "ParameterStore":
        other = ParameterStore()
        for name, t in self._entries.items():
            other.add(name, t.data.copy(), self._tasks[name])
        return other

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._entries.items()}

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self._entries.values()]))


def backward(loss: Tensor, store: ParameterStore | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Store entries that the loss does not reach end up with a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if store is not None:
        for _, t in store.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        parent_grads = node._backward(g)
        fault = _GRAD_FAULTS.get(node._op)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if fault is not None:
                pg = pg * fault
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
        # release the tape as we go
        node._parents = ()
        node._backward = None


# --- optimizer -------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Gradients are left for the caller to zero."""
    for name, p in store.items():
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.t += 1
    dt = _DTYPE
    b1, b2 = dt(state.beta1), dt(state.beta2)
    bc1 = dt(1.0 - state.beta1**state.t)
    bc2 = dt(1.0 - state.beta2**state.t)
    lr, eps = dt(state.lr), dt(state.eps)
    for name, p in store.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (dt(1) - b1) * g
        v *= b2
        v += (dt(1) - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# --- gradient checking -----------------------------------------------------


def gradcheck(
    f: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    h: float = 1e-2,
    max_coords: int | None = 64,
    seed: int = 0,
) -> float:
    """Max over sampled coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``max_coords`` caps the coordinates probed per parameter (``None`` probes all).
    The numeric derivative uses the perturbation actually representable in the
    storage dtype, so float32 rounding of ``w + h`` does not bias it.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ContractError(f"gradcheck step h={h} outside [1e-5, 1e-2]")
    store.zero_grads()
    loss = f(store)
    backward(loss, store)
    analytic = {n: t.grad.copy() for n, t in store.items()}
    rng = np.random.default_rng(seed)

    worst = 0.0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for k in coords:
            orig = flat[k]
            up = orig + t.data.dtype.type(h)
            down = orig - t.data.dtype.type(h)
            flat[k] = up
            f_up = f(store).item()
            flat[k] = down
            f_down = f(store).item()
            flat[k] = orig
            if not (math.isfinite(f_up) and math.isfinite(f_down)):
                raise NumericError(f"gradcheck: non-finite loss perturbing {name}[{k}]")
            numeric = (f_up - f_down) / (float(up) - float(down))
            err = abs(float(analytic[name].reshape(-1)[k]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    store.zero_grads()
    return worst
