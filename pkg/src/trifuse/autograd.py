"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy float64 array.  Operations build an
implicit computation graph (each result remembers its parents and a local
gradient rule); ``backward()`` walks that graph once, in reverse topological
order, accumulating into ``.grad`` buffers.  Gradients accumulate across
calls until explicitly zeroed, which is what the staged training harness
relies on.

Elementwise ops accept shapes that are numpy-broadcastable (dims equal or 1);
the backward pass sums gradients over the broadcast axes.  Matrix products
are restricted to exact batch-dimension match or a shared 2-D right operand.
"""

from __future__ import annotations

import json
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ParameterError(ValueError):
    """Raised for invalid operation parameters (e.g. non-positive temperature)."""


class NondeterministicLossError(RuntimeError):
    """Raised when a loss function returns different values on repeated evaluation."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- graph bookkeeping ---------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be scalar.  Repeated calls accumulate on top of existing
        gradients; call ``zero_grad`` between steps for fresh gradients.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node._accumulate(g)
            if node._backward is not None:
                node._backward_dispatch(g, grads)

    def _backward_dispatch(self, g: np.ndarray, grads: dict[int, np.ndarray]):
        for parent, pg in self._backward(g):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] += pg
            else:
                grads[key] = pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis):
        return mean_pool(self, axis)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over axes the forward pass broadcast, back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable")


# -- elementwise ops -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data

    def bw(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    data = a.data / b.data

    def bw(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    return _make(data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        return ((a, -g),)

    return _make(-a.data, (a,), bw)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    e = float(exponent)
    data = a.data**e

    def bw(g):
        return ((a, g * e * a.data ** (e - 1.0)),)

    return _make(data, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bw(g):
        return ((a, g * data),)

    return _make(data, (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def bw(g):
        return ((a, g / a.data),)

    return _make(data, (a,), bw)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def bw(g):
        return ((a, g * (1.0 - data * data)),)

    return _make(data, (a,), bw)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


# -- shape ops -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bw(g):
        return ((a, g.reshape(a.shape)),)

    return _make(data, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def bw(g):
        return ((a, g.transpose(inv)),)

    return _make(data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append((t, g[tuple(idx)]))
        return out

    return _make(data, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        return [(t, parts[i]) for i, t in enumerate(tensors)]

    return _make(data, tensors, bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()

    def bw(g):
        return ((a, _unbroadcast(g, a.shape)),)

    return _make(data, (a,), bw)


# -- reductions -------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg, a.shape).copy()),)

    return _make(data, (a,), bw)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along ``axis``; gradient distributes 1/n to each slot."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean_pool: axis {axis} invalid for shape {a.shape}")
    n = a.shape[axis]
    if n == 0:
        raise ShapeError("mean_pool: cannot reduce over an empty axis")
    data = a.data.mean(axis=axis)

    def bw(g):
        gg = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(gg / n, a.shape).copy()),)

    return _make(data, (a,), bw)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Either both operands share identical batch dims, or the
    right operand is a plain 2-D matrix shared across the left's batch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    shared_rhs = b.ndim == 2 and a.ndim > 2
    if not shared_rhs and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for {a.shape} and {b.shape}")
    data = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared_rhs:
            a2 = a.data.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gb = a2.T @ g2
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ((a, ga), (b, gb))

    return _make(data, (a, b), bw)


# -- normalisation / activation ops ------------------------------------------------


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax along ``axis`` with mandatory max-subtraction."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    x = _as_tensor(x)
    z = (x.data - x.data.max(axis=axis, keepdims=True)) / temperature
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((x, data * (g - dot) / temperature),)

    return _make(data, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def bw(g):
        return ((x, g - np.exp(data) * g.sum(axis=axis, keepdims=True)),)

    return _make(data, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalisation over the last axis, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    if d == 1 and eps == 0.0:
        raise ParameterError("layer_norm: last dimension of size 1 with eps=0 divides by zero")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data

    def bw(g):
        gb = g.reshape(-1, d).sum(axis=0)
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return ((x, gx), (gain, gg), (bias, gb))

    return _make(data, (x, gain, bias), bw)


# -- indexing ops -----------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: output shape ``ids.shape + (D,)``; gradient scatter-adds."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding: index out of range [0, {table.shape[0]}) in lookup"
        )
    data = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return ((table, gt),)

    return _make(data, (table,), bw)


def gather_last(x: Tensor, ids) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    x = _as_tensor(x)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} must equal {x.shape[:-1]}")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return ((x, gx),)

    return _make(data, (x,), bw)


# -- parameter registry -------------------------------------------------------------


class ParameterStore:
    """Named leaf tensors: the trainable state of a model.

    Supports group-prefixed names ("connector/v/wq"), freezing by prefix, and
    an exact-round-trip JSON checkpoint format.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def set_trainable(self, prefixes: Iterable[str] | None):
        """Mark parameters trainable iff their name starts with one of ``prefixes``
        (``None`` means everything trainable)."""
        if prefixes is None:
            for t in self._params.values():
                t.requires_grad = True
            return
        prefixes = tuple(prefixes)
        for name, t in self._params.items():
            t.requires_grad = name.startswith(prefixes)

    def trainable(self) -> list[Tensor]:
        return [t for t in self._params.values() if t.requires_grad]

    def group(self, prefix: str) -> list[Tensor]:
        return [t for name, t in self._params.items() if name.startswith(prefix)]

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            name: t.data.copy() for name, t in self._params.items() if name.startswith(prefix)
        }

    # checkpoint io: JSON keeps full float64 precision (shortest round-trip repr)

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "params": {
                name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
                for name, t in self._params.items()
            },
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.state_dict(), fh)

    def load_state_dict(self, state: dict):
        if state.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {state.get('version')!r}")
        params = state["params"]
        missing = set(self._params) - set(params)
        extra = set(params) - set(self._params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, entry in params.items():
            t = self._params[name]
            arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            if arr.shape != t.shape:
                raise ShapeError(f"checkpoint shape {arr.shape} != parameter shape {t.shape} for {name!r}")
            t.data = arr

    def load(self, path):
        with open(path, "r", encoding="utf-8") as fh:
            self.load_state_dict(json.load(fh))


# -- gradient verification ------------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    h: float = 1e-5,
    max_coords: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be a deterministic closure re-running the forward pass from
    current parameter values.  A sample of coordinates of ``param`` is perturbed
    by ±h; the relative error denominator is ``|analytic| + 1e-8``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ParameterError(f"finite_diff_check: h={h} outside [1e-7, 1e-3]")
    l1 = loss_fn()
    l2 = loss_fn()
    if l1.data != l2.data:
        raise NondeterministicLossError(
            f"loss_fn returned {l1.data} then {l2.data} on identical state"
        )
    was = param.requires_grad
    param.requires_grad = True
    param.grad = None
    loss_fn().backward()
    analytic = param.grad.copy() if param.grad is not None else np.zeros_like(param.data)
    param.grad = None
    param.requires_grad = was

    n = param.data.size
    if rng is None:
        rng = np.random.default_rng(0)
    coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
    flat = param.data.reshape(-1)
    worst = 0.0
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        fp = loss_fn().item()
        flat[c] = orig - h
        fm = loss_fn().item()
        flat[c] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[c]
        worst = max(worst, abs(a - numeric) / (abs(a) + 1e-8))
    return worst
