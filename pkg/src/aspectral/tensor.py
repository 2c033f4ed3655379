"""Small dense tensor library with tape-based reverse-mode autodiff.

Every differentiable op records its parents and a backward closure on the
output tensor when gradient tracking is on. ``backward`` walks the tape in
reverse topological order and accumulates gradients additively, so shared
subexpressions are handled the same way as an unrolled graph.

Broadcasting is deliberately narrow: a binary elementwise op accepts a
second operand whose shape is a suffix of the first operand's shape (bias
add, per-column scaling). Anything else needs an explicit reshape/expand.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its documented preconditions."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def T(self) -> "Tensor":
        return transpose(self, None)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def tensor(data, requires_grad: bool = False, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible "
                         "(second operand must equal or be a trailing suffix)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + shape).sum(axis=0) if lead > 0 else grad


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without forming sigmoid(x) first."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    sig_neg = np.exp(out - x)  # sigmoid(-x) = exp(log_sigmoid(x) - x)
    return _make(out, (a,), lambda g: (g * sig_neg,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ------------------------------------------------------------------- shapes

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def expand(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),))


def index_select(a: Tensor, index) -> Tensor:
    """General numpy indexing; gradients scatter-add back to the source."""
    out = a.data[index]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            grads.append(g[tuple(sl)])
        return grads

    return _make(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tuple(tensors),
                 lambda g: [np.take(g, i, axis=axis) for i in range(n)])


# ---------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(a.data.sum(axis=axis))
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared weight applied to every row of ``a``) or have the
    same leading (batch) axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), backward)


# ---------------------------------------------------------------- normalize

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is 0 get weight 0.

    ``mask`` is a constant broadcastable to ``x`` (e.g. ``[B, 1, 1, n]``).
    A row with no unmasked entry yields all zeros.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    z = np.where(m, x.data, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(m, np.exp(np.where(m, x.data, 0.0) - zmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = e / np.where(denom > 0, denom, 1.0)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows.

    ``logits`` is ``[n]`` with an int target or ``[B, n]`` with ``B`` targets.
    """
    single = logits.ndim == 1
    x = logits.data[None, :] if single else logits.data
    t = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n = x.shape[1]
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"cross_entropy: {t.shape[0]} targets for logits of shape {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexError(f"cross_entropy: target index out of range [0, {n})")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(x.shape[0])
    out = np.asarray(-logp[rows, t].mean())

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= g / x.shape[0]
        return (d[0] if single else d,)

    return _make(out, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    h = xd.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, h)
        return gx, (lead * xhat.reshape(-1, h)).sum(axis=0), lead.sum(axis=0)

    return _make(out, (x, gain, bias), backward)


# ----------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers. Leaves listed in
    ``params`` that the loss does not reach get a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_entries: int | None = None, rng: np.random.Generator | None = None,
                      floor: float = 1e-6, prefer_nonzero: bool = False) -> float:
    """Largest relative error between autodiff and central-difference gradients.

    ``f`` must be deterministic given the current parameter values. Relative
    error is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps entries whose
    true gradient is ~0 from reporting pure round-off as a relative blow-up.
    With ``max_entries`` only that many randomly chosen coordinates per
    parameter are perturbed; ``prefer_nonzero`` draws them from coordinates
    with a non-zero analytic gradient first (sparse embedding tables would
    otherwise be sampled almost entirely from untouched rows).
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss, params)
    auto = [p.grad.copy() for p in params]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, g in zip(params, auto):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            if prefer_nonzero:
                nz = np.flatnonzero(g.reshape(-1))
                zero = np.setdiff1d(idx, nz, assume_unique=True)
                take = min(len(nz), max_entries - 1 if len(zero) else max_entries)
                idx = np.concatenate([rng.choice(nz, size=take, replace=False),
                                      rng.choice(zero, size=min(len(zero), max_entries - take), replace=False)])
            else:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = float(g.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
