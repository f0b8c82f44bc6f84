"""Reverse-mode automatic differentiation over numpy arrays.

Every network in this package is a small dense model, so the primitive set
is fixed and deliberately tiny: elementwise arithmetic, matrix products
against 2-D weight matrices, embedding-row lookup, per-channel frame
mixing, concatenation, reshaping, a few pointwise nonlinearities, and full
reductions.

Constants are plain numpy arrays; anything wrapped in :class:`Var` receives
a gradient after :func:`backward` runs on a scalar loss. All graph values
are float64. The free functions (``matmul``, ``silu``, ...) accept either
``Var`` or ``ndarray`` operands, so the same forward code serves both
training (taped) and inference (plain numpy) callers.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Var",
    "backward",
    "value_of",
    "matmul",
    "take_rows",
    "temporal_mix",
    "concat_last",
    "reshape",
    "sigmoid",
    "silu",
    "log",
    "square",
    "clamp",
    "sum_all",
    "mean_all",
    "gradcheck",
]


def _as_f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x saturates to inf and the quotient
    # correctly rounds to 0, so only the warning needs suppressing.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """One node of the computation graph.

    ``value`` is always a float64 ndarray (scalars become 0-d arrays).
    ``grad`` is populated by :func:`backward`.
    """

    __slots__ = ("value", "grad", "_parents", "_bwd")

    # Make ndarray (op) Var dispatch to the reflected Var operators instead
    # of numpy's elementwise object fallback.
    __array_ufunc__ = None

    def __init__(self, value, _parents=(), _bwd=None):
        self.value = _as_f64(value)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _neg(other))

    def __rsub__(self, other):
        return _add(_neg(self), other)

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, other)

    def __rmul__(self, other):
        return _mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("Var/Var division is not a supported primitive")
        return _div_const(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def backward(self):
        backward(self)


def value_of(x) -> np.ndarray:
    """Underlying ndarray of a Var, or the array itself."""
    return x.value if isinstance(x, Var) else _as_f64(x)


def _accum(node: Var, g: np.ndarray) -> None:
    # Grads are never mutated in place, so storing views is safe.
    node.grad = g if node.grad is None else node.grad + g


def backward(loss: Var) -> None:
    """Run reverse-mode accumulation from a scalar loss node."""
    if not isinstance(loss, Var):
        raise TypeError("backward expects a Var")
    if loss.value.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")

    # Iterative topological order (graphs are shallow but play it safe).
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


# -- primitives --------------------------------------------------------


def _add(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _as_f64(a) + _as_f64(b)
    av, bv = value_of(a), value_of(b)
    out = Var(av + bv, _parents=tuple(x for x in (a, b) if isinstance(x, Var)))

    def bwd(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g, bv.shape))

    out._bwd = bwd
    return out


def _neg(a):
    if not isinstance(a, Var):
        return -_as_f64(a)
    out = Var(-a.value, _parents=(a,))
    out._bwd = lambda g: _accum(a, -g)
    return out


def _mul(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _as_f64(a) * _as_f64(b)
    av, bv = value_of(a), value_of(b)
    out = Var(av * bv, _parents=tuple(x for x in (a, b) if isinstance(x, Var)))

    def bwd(g):
        if isinstance(a, Var):
            _accum(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            _accum(b, _unbroadcast(g * av, bv.shape))

    out._bwd = bwd
    return out


def _div_const(a: Var, b):
    # True division keeps taped values bit-identical to the plain-numpy path.
    bv = _as_f64(b)
    out = Var(a.value / bv, _parents=(a,))
    out._bwd = lambda g: _accum(a, _unbroadcast(g / bv, a.value.shape))
    return out


def matmul(a, b):
    """Product against a 2-D weight matrix: (..., k) @ (k, n)."""
    if not isinstance(a, Var) and not isinstance(b, Var):
        return _as_f64(a) @ _as_f64(b)
    av, bv = value_of(a), value_of(b)
    if bv.ndim != 2:
        raise ValueError("matmul right operand must be 2-D")
    out = Var(av @ bv, _parents=tuple(x for x in (a, b) if isinstance(x, Var)))

    def bwd(g):
        if isinstance(a, Var):
            _accum(a, g @ bv.T)
        if isinstance(b, Var):
            axes = (tuple(range(av.ndim - 1)), tuple(range(g.ndim - 1)))
            _accum(b, np.tensordot(av, g, axes=axes))

    out._bwd = bwd
    return out


def take_rows(table, idx):
    """Embedding lookup: rows of a 2-D table selected by an int index array."""
    idx = np.asarray(idx)
    tv = value_of(table)
    if np.any(idx < 0) or np.any(idx >= tv.shape[0]):
        raise IndexError(f"embedding index out of range [0, {tv.shape[0]})")
    if not isinstance(table, Var):
        return tv[idx]
    out = Var(tv[idx], _parents=(table,))

    def bwd(g):
        dt = np.zeros_like(tv)
        np.add.at(dt, idx, g)
        _accum(table, dt)

    out._bwd = bwd
    return out


def temporal_mix(mix, h):
    """Per-channel frame mixing: out[b,f,c] = sum_g mix[c,f,g] * h[b,g,c]."""
    mv, hv = value_of(mix), value_of(h)
    if not isinstance(mix, Var) and not isinstance(h, Var):
        return np.einsum("cfg,bgc->bfc", mv, hv)
    out = Var(
        np.einsum("cfg,bgc->bfc", mv, hv),
        _parents=tuple(x for x in (mix, h) if isinstance(x, Var)),
    )

    def bwd(g):
        if isinstance(mix, Var):
            _accum(mix, np.einsum("bfc,bgc->cfg", g, hv))
        if isinstance(h, Var):
            _accum(h, np.einsum("cfg,bfc->bgc", mv, g))

    out._bwd = bwd
    return out


def concat_last(parts):
    """Concatenate along the last axis."""
    vals = [value_of(p) for p in parts]
    if not any(isinstance(p, Var) for p in parts):
        return np.concatenate(vals, axis=-1)
    out = Var(
        np.concatenate(vals, axis=-1),
        _parents=tuple(p for p in parts if isinstance(p, Var)),
    )
    sizes = [v.shape[-1] for v in vals]

    def bwd(g):
        start = 0
        for p, size in zip(parts, sizes):
            if isinstance(p, Var):
                _accum(p, g[..., start : start + size])
            start += size

    out._bwd = bwd
    return out


def reshape(x, shape):
    if not isinstance(x, Var):
        return _as_f64(x).reshape(shape)
    orig = x.value.shape
    out = Var(x.value.reshape(shape), _parents=(x,))
    out._bwd = lambda g: _accum(x, g.reshape(orig))
    return out


def sigmoid(x):
    if not isinstance(x, Var):
        return _sigmoid_np(_as_f64(x))
    y = _sigmoid_np(x.value)
    out = Var(y, _parents=(x,))
    out._bwd = lambda g: _accum(x, g * y * (1.0 - y))
    return out


def silu(x):
    if not isinstance(x, Var):
        xv = _as_f64(x)
        return xv * _sigmoid_np(xv)
    s = _sigmoid_np(x.value)
    out = Var(x.value * s, _parents=(x,))
    out._bwd = lambda g: _accum(x, g * s * (1.0 + x.value * (1.0 - s)))
    return out


def log(x):
    if not isinstance(x, Var):
        return np.log(_as_f64(x))
    out = Var(np.log(x.value), _parents=(x,))
    out._bwd = lambda g: _accum(x, g / x.value)
    return out


def square(x):
    if not isinstance(x, Var):
        xv = _as_f64(x)
        return xv * xv
    out = Var(x.value * x.value, _parents=(x,))
    out._bwd = lambda g: _accum(x, 2.0 * x.value * g)
    return out


def clamp(x, lo: float, hi: float):
    """Clip to [lo, hi]; gradient passes through the interior only."""
    if not isinstance(x, Var):
        return np.clip(_as_f64(x), lo, hi)
    inside = (x.value >= lo) & (x.value <= hi)
    out = Var(np.clip(x.value, lo, hi), _parents=(x,))
    out._bwd = lambda g: _accum(x, g * inside)
    return out


def sum_all(x):
    if not isinstance(x, Var):
        return np.sum(_as_f64(x))
    out = Var(np.sum(x.value), _parents=(x,))
    out._bwd = lambda g: _accum(x, np.broadcast_to(g, x.value.shape))
    return out


def mean_all(x):
    if not isinstance(x, Var):
        return np.mean(_as_f64(x))
    n = x.value.size
    out = Var(np.mean(x.value), _parents=(x,))
    out._bwd = lambda g: _accum(x, np.broadcast_to(g / n, x.value.shape))
    return out


# -- finite-difference verification ------------------------------------


def gradcheck(loss_fn, params: dict, h: float = 1e-5, floor: float = 1e-6) -> dict:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` receives a dict mapping names to Var (analytic pass) or
    ndarray (finite-difference pass) and must return the scalar loss.
    Relative error per coordinate uses ``max(|analytic|, |numeric|, floor)``
    as the denominator so that near-zero gradients do not blow up the ratio.

    Returns a report with per-parameter max relative error and the overall
    worst coordinate.
    """
    base = {k: _as_f64(v) for k, v in params.items()}

    pvars = {k: Var(v) for k, v in base.items()}
    loss = loss_fn(pvars)
    if not isinstance(loss, Var):
        raise TypeError("loss_fn must return a Var when given Var parameters")
    backward(loss)
    analytic = {
        k: (pvars[k].grad if pvars[k].grad is not None else np.zeros_like(base[k]))
        for k in base
    }

    per_param = {}
    worst = 0.0
    work = {k: v.copy() for k, v in base.items()}
    for name in base:
        arr = work[name]
        err_max = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(value_of(loss_fn(work)))
            flat[i] = keep - h
            dn = float(value_of(loss_fn(work)))
            flat[i] = keep
            numeric = (up - dn) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), floor)
            err_max = max(err_max, abs(a - numeric) / denom)
        per_param[name] = err_max
        worst = max(worst, err_max)

    return {"per_param": per_param, "max_rel_err": worst, "n_params": sum(v.size for v in base.values())}
