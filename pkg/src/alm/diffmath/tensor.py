"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable operation executed while a :class:`Tape` is active and
while at least one input is tracked (a leaf with ``requires_grad`` or an
output already recorded on that tape) appends one node to the tape. Nodes are
appended after their parents, so reverse insertion order is a valid reverse
topological order and :func:`backward` is a single sweep.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them must be a scalar (0-d).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, DomainError, NumericError

_TAPES: list["Tape"] = []


class _Node:
    __slots__ = ("op", "parents", "need", "vjp")

    def __init__(self, op, parents, need, vjp):
        self.op = op
        self.parents = parents
        self.need = need
        self.vjp = vjp


class Tape:
    """Append-only record of operations; use as a context manager."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A float64 array, optionally recorded on the active tape."""

    __slots__ = ("data", "requires_grad", "name", "_tape", "_idx")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._idx = -1

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
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape (shares memory)."""
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _record(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is None:
        return out
    need = tuple(_tracked(p, tape) for p in parents)
    if any(need):
        out._tape = tape
        out._idx = len(tape.nodes)
        tape.nodes.append(_Node(op, parents, need, vjp))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(g, sb) if need[1] else None)

    return _record("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(-g, sb) if need[1] else None)

    return _record("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g, need):
        return (_unbroadcast(g * bd, ad.shape) if need[0] else None,
                _unbroadcast(g * ad, bd.shape) if need[1] else None)

    return _record("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g, need):
        return (_unbroadcast(g / bd, ad.shape) if need[0] else None,
                _unbroadcast(-g * out / bd, bd.shape) if need[1] else None)

    return _record("div", out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g, need):
        return (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None)

    return _record("matmul", ad @ bd, (a, b), vjp)


def linear(x, w: Tensor, b: Tensor) -> Tensor:
    """Fused ``x @ w + b`` with ``b`` broadcast over rows."""
    x = as_tensor(x)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data

    def vjp(g, need):
        return (g @ wd.T if need[0] else None,
                xd.T @ g if need[1] else None,
                g.sum(axis=0) if need[2] else None)

    return _record("linear", xd @ wd + b.data, (x, w, b), vjp)


# ----------------------------------------------------------------- unary ops

def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g, need: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g, need: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g, need: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    if np.any(ad <= 0) or np.any(np.isnan(ad)):
        raise DomainError(f"log: non-positive input (min {np.nanmin(ad) if ad.size else ad})")
    return _record("log", np.log(ad), (a,), lambda g, need: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g, need: (g * (1.0 - out * out),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    slope = np.exp(np.minimum(ad, 0.0))  # the derivative: 1 where x > 0, exp(x) elsewhere
    out = np.maximum(ad, 0.0) + (slope - 1.0)
    return _record("elu", out, (a,), lambda g, need: (g * slope,))


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("softplus", np.logaddexp(0.0, ad), (a,),
                   lambda g, need: (g * sigmoid_array(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = sigmoid_array(a.data)
    return _record("sigmoid", out, (a,), lambda g, need: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g, need: (2.0 * g * ad,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the input was inside."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record("clip", np.clip(ad, lo, hi), (a,), lambda g, need: (g * inside,))


def clip_straight_through(a, lo: float, hi: float) -> Tensor:
    """Clamp in the forward pass, identity in the backward pass."""
    a = as_tensor(a)
    return _record("clip_st", np.clip(a.data, lo, hi), (a,), lambda g, need: (g,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g, need: (g.reshape(old),))


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch by name; ``scale`` takes ``(tensor, factor)``."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div, "exp": exp, "log": log,
        "tanh": tanh, "elu": elu, "softplus": softplus, "sigmoid": sigmoid,
        "square": square, "negate": neg, "scale": scale,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------- reductions

def _check_axis(a: Tensor, axis: int | None, op: str) -> int | None:
    if axis is None:
        return None
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axis = _check_axis(a, axis, "sum")
    shape = a.shape

    def vjp(g, need):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.sum(a.data, axis=axis), (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    axis = _check_axis(a, axis, "mean")
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reduce(op: str, t, axis: int | None = None) -> Tensor:
    if op == "sum":
        return sum(t, axis)
    if op == "mean":
        return mean(t, axis)
    raise ContractError(f"unknown reduction {op!r}")


# ------------------------------------------------------------- shape helpers

def concat(ts: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    nd = ts[0].ndim
    for t in ts[1:]:
        if t.ndim != nd:
            raise DimensionError(f"concat: ranks differ {[t.shape for t in ts]}")
    axis = axis % nd
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, need):
        out = []
        for i, keep in enumerate(need):
            if keep:
                idx = [slice(None)] * nd
                idx[axis] = slice(bounds[i], bounds[i + 1])
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)

    return _record("concat", np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def columns(a, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g, need):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("columns", a.data[..., start:stop], (a,), vjp)


def layer_norm(x, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise standardisation followed by an affine map."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(f"layer_norm: x{x.shape} gain{gain.shape} bias{bias.shape}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gain.data

    def vjp(g, need):
        gx = None
        if need[0]:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return (gx,
                (g * xhat).sum(axis=0) if need[1] else None,
                g.sum(axis=0) if need[2] else None)

    return _record("layer_norm", xhat * gd + bias.data, (x, gain, bias), vjp)


# ------------------------------------------------------------------ backward

GradMap = dict


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> GradMap:
    """Gradient of a scalar ``loss`` with respect to leaf tensors.

    With ``params`` given, the map has exactly those keys and leaves the sweep
    never reached get zeros. Without it, every reached leaf is returned.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not recorded on a tape (nothing to differentiate)")
    nodes = tape.nodes
    slots: dict[int, np.ndarray] = {loss._idx: np.ones(())}
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for idx in range(loss._idx, -1, -1):
        g = slots.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        pgrads = node.vjp(g, node.need)
        for parent, keep, pg in zip(node.parents, node.need, pgrads):
            if not keep or pg is None:
                continue
            if parent._tape is tape:
                j = parent._idx
                prev = slots.get(j)
                slots[j] = pg if prev is None else prev + pg
            else:
                key = id(parent)
                prev = leaves.get(key)
                leaves[key] = (parent, pg if prev is None else prev[1] + pg)
    if params is None:
        return {t: g for t, g in leaves.values()}
    out = {}
    for p in params:
        hit = leaves.get(id(p))
        out[p] = hit[1] if hit is not None else np.zeros_like(p.data)
    return out


def check_finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite value in {what}")
