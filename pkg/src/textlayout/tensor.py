"""Dense tensors with reverse-mode automatic differentiation.

Only the handful of operations the text-layout model needs are provided.
Shapes are checked explicitly; the only broadcasting allowed is a bias
vector added over the last axis.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None):
        """Propagate gradients to every leaf reachable from this tensor.

        Each node is visited once, in reverse topological order; a tensor used
        by several consumers sums their contributions.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _tracks(*ts: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad or t._backward is not None for t in ts)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _tracks(*parents):
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bw(g):
            return ((a, g), (b, g.reshape(-1, b.shape[0]).sum(axis=0)))
        return _make(a.data + b.data, (a, b), bw)
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: ((a, g * b.data), (b, g * a.data)))


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: ((a, g * c),))


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array (e.g. an attention mask) of the same shape."""
    a = as_tensor(a)
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape:
        c = np.broadcast_to(c, a.shape)
    return _make(a.data + c, (a,), lambda g: ((a, g),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: ((a, g.reshape(src)),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: ((a, g.transpose(inv)),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        res = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            idx[ax] = slice(lo, hi)
            res.append((t, g[tuple(idx)]))
        return res

    return _make(out, tuple(ts), bw)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; ``idx`` may have any integer shape.

    This is both embedding lookup and row selection; repeated indices
    accumulate in the backward pass.
    """
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take_rows: index out of range for {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return ((table, full),)

    return _make(out, (table,), bw)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(np.array(a.data.sum()), (a,), lambda g: ((a, np.full(a.shape, float(g))),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``a`` is ``[..., m, k]``. ``b`` is either a plain ``[k, n]`` matrix (shared
    across the leading axes of ``a``) or ``[..., k, n]`` with identical
    leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ((a, ga), (b, gb))

        return _make(out, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwb(g):
        return ((a, g @ np.swapaxes(b.data, -1, -2)), (b, np.swapaxes(a.data, -1, -2) @ g))

    return _make(out, (a, b), bwb)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis (max-subtracted)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((x, p * (g - (g * p).sum(axis=-1, keepdims=True))),)

    return _make(p, (x,), bw)


def log_softmax(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((x, g - p * g.sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return ((x, g * (cdf + x.data * pdf)),)

    return _make(out, (x,), bw)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, d)
        return ((x, dx), (gain, (flat * xhat.reshape(-1, d)).sum(axis=0)), (bias, flat.sum(axis=0)))

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` is ``[..., n]`` and ``target`` an integer array of the leading
    shape (a plain int for a single ``[n]`` vector). ``mask`` selects which
    positions enter the mean; an empty selection is an error.
    """
    logits = as_tensor(logits)
    n = logits.shape[-1]
    target = np.asarray(target, dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: target shape {target.shape} vs logits {logits.shape}")
    if mask is None:
        mask = np.ones(target.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    sel_t = target[mask]
    if sel_t.size == 0:
        raise ValueError("cross_entropy: mask selects no positions")
    if sel_t.min() < 0 or sel_t.max() >= n:
        raise IndexError(f"cross_entropy: target out of range [0, {n})")
    flat = logits.data.reshape(-1, n)
    fmask = mask.reshape(-1)
    ftgt = np.where(mask, target, 0).reshape(-1)
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    nll = lse - z[np.arange(len(ftgt)), ftgt]
    count = int(fmask.sum())
    loss = float((nll * fmask).sum() / count)

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(ftgt)), ftgt] -= 1.0
        p *= (fmask[:, None] * (float(g) / count))
        return ((logits, p.reshape(logits.shape)),)

    return _make(np.array(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckError(RuntimeError):
    pass


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
    samples_per_param: int | None = 8,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``f`` rebuilds the scalar loss from the current parameter values. Returns
    the maximum of ``|analytic - numeric| / max(1, |numeric|)`` over the
    probed coordinates: all of them when ``samples_per_param`` is None,
    otherwise that many random ones plus that many with the largest analytic
    gradient (large embedding tables are mostly untouched rows).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError(f"grad_check: non-finite loss {loss.data}")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
            flat = p.data.reshape(-1)
            if samples_per_param is None or samples_per_param >= flat.size:
                coords = np.arange(flat.size)
            else:
                top = np.argsort(-np.abs(analytic.reshape(-1)), kind="stable")[:samples_per_param]
                rand = rng.choice(flat.size, size=samples_per_param, replace=False)
                coords = np.unique(np.concatenate([top, rand]))
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                up = f().item()
                flat[c] = orig - eps
                down = f().item()
                flat[c] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise GradCheckError(f"grad_check: non-finite loss probing {p.name}[{c}]")
                numeric = (up - down) / (2 * eps)
                err = abs(analytic.reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst
