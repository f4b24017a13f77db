"""Float64 tensor ops recorded on a tape for reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When a :class:`ComputationRecord` is
active (``with ComputationRecord() as rec:``) each op appends one entry holding
its inputs, its output and a closure mapping the output adjoint to input
adjoints. :func:`backward` replays those entries in reverse.

Batched leading dimensions are supported where the model needs them
(``matmul`` follows ``numpy.matmul`` broadcasting, elementwise ops follow
numpy broadcasting); nothing more general is attempted.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class NumericError(ArithmeticError):
    """A non-finite value appeared in the output of an op."""


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "__weakref__")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=DTYPE)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Entry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class ComputationRecord:
    """Ordered list of op applications; usable as a context manager."""

    entries: list[_Entry] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "ComputationRecord":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)


_ACTIVE: contextvars.ContextVar[ComputationRecord | None] = contextvars.ContextVar(
    "kformer_active_record", default=None
)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op}: non-finite value in output")
    out = Tensor(out_data)
    rec = _ACTIVE.get()
    if rec is not None:
        rec.entries.append(_Entry(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        if b.ndim == 2 and a.ndim > 2:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
        else:
            out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        # batched rows against one matrix: fold leading dims into a single GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

    else:

        def vjp(g):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _emit(
        "sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        (a, b),
        ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def gelu(x) -> Tensor:
    """GeLU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = x2 * _GELU_A
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def vjp(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) C (1 + 3 A x^2), built in place
        d = x2 * (3.0 * _GELU_A * _GELU_C)
        d += _GELU_C
        d *= xd
        sech2 = t * t
        np.subtract(1.0, sech2, out=sech2)
        d *= sech2
        d += t
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _emit("gelu", (x,), out, vjp)


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (v,), p, vjp)


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _emit(
        "log_softmax", (v,), out, lambda g: (g - p * g.sum(axis=axis, keepdims=True),)
    )


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last dim {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, d)
        return gx, np.einsum("ij,ij->j", g2, xhat.reshape(-1, d)), g2.sum(axis=0)

    return _emit("layer_norm", (x, gamma, beta), out, vjp)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", ts, out, vjp)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(orig),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _emit(
        "swap_last", (x,), np.swapaxes(x.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)
    )


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    out = np.broadcast_to(x.data, shape).copy()
    return _emit("broadcast_to", (x,), out, lambda g: (_unbroadcast(g, orig),))


def take_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; adjoints scatter-add back into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit("take_rows", (table,), table.data[ids], vjp)


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice)) or k is Ellipsis or k is None for k in parts)


def getitem(x, key) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    basic = _is_basic_index(key)

    def vjp(g):
        gx = np.zeros(shape, dtype=DTYPE)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _emit("getitem", (x,), np.array(x.data[key]), vjp)


def sum(x, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), np.asarray(x.data.sum(axis=axis)), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# Parameters and backward
# ---------------------------------------------------------------------------


class Parameter:
    """A named trainable tensor and its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = as_tensor(value)
        self.grad = np.zeros(self.value.shape, dtype=DTYPE)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def assign(self, data: np.ndarray) -> None:
        data = np.asarray(data, dtype=DTYPE)
        if data.shape != self.value.shape:
            raise ShapeError(f"{self.name}: cannot assign shape {data.shape} to {self.value.shape}")
        self.value = Tensor(data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.value.shape, dtype=DTYPE)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def backward(record: ComputationRecord, loss: Tensor, params: Sequence[Parameter]) -> None:
    """Fill ``p.grad`` with d(loss)/d(p.value) for every parameter.

    Parameters not reachable from ``loss`` get a zero gradient.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for entry in reversed(record.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for p in params:
        g = grads.get(id(p.value))
        p.grad = np.zeros(p.shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.shape)


def grad_check(
    forward: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    n_coords: int = 100,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between taped gradients and central differences.

    ``forward`` rebuilds the scalar loss from the current parameter values.
    Up to ``n_coords`` coordinates are sampled per parameter (all of them when
    the parameter is smaller). Relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    with ComputationRecord() as rec:
        loss = forward()
    again = forward()
    if loss.data.tobytes() != again.data.tobytes():
        raise ContractError("forward is not deterministic: two runs gave different losses")
    backward(rec, loss, params)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        size = flat.size
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        base = flat.copy()
        for c in coords:
            plus = base.copy()
            plus[c] += eps
            p.value = Tensor(plus.reshape(p.shape))
            f_plus = forward().item()
            minus = base.copy()
            minus[c] -= eps
            p.value = Tensor(minus.reshape(p.shape))
            f_minus = forward().item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[p.name].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        p.value = Tensor(base.reshape(p.shape))
    return worst
