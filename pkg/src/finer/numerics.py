"""Dense float64 arithmetic, a small reverse-mode tape, and SVD with its adjoint.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Differentiable
computations are expressed with :class:`Var` nodes recorded on a
:class:`GradientTape`; every op registered in :data:`OPS` has an adjoint rule
that the test-suite checks against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation

# |sigma_j^2 - sigma_i^2| floor in the SVD adjoint
SVD_GAP_FLOOR = 1e-8


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# plain (non-taped) numerics


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma[..., None, :]) @ np.swapaxes(self.v, -1, -2)


SIGN_TIE_TOL = 1e-12


def _normalize_signs(u: np.ndarray, v: np.ndarray):
    # largest-|.| entry of each u column made non-negative; magnitudes within
    # SIGN_TIE_TOL of the column max count as tied and the lowest row wins
    mag = np.abs(u)
    near = mag >= np.max(mag, axis=-2, keepdims=True) - SIGN_TIE_TOL
    idx = np.argmax(near, axis=-2)
    pivots = np.take_along_axis(u, idx[..., None, :], axis=-2)
    signs = np.where(pivots < 0, -1.0, 1.0)
    return u * signs, v * signs


def svd_batched(m: np.ndarray) -> SvdFactors:
    """Thin, sign-normalized SVD over the last two axes of ``m``."""
    m = as_tensor(m)
    if m.ndim < 2:
        raise ContractViolation(f"svd needs at least a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation("svd input contains NaN or Inf")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    u, v = _normalize_signs(u, np.swapaxes(vt, -1, -2))
    return SvdFactors(u=u, sigma=s, v=v)


def svd(m) -> SvdFactors:
    m = as_tensor(m)
    if m.ndim != 2:
        raise ContractViolation(f"svd expects a rank-2 tensor, got shape {m.shape}")
    return svd_batched(m)


def svd_backward(m, factors: SvdFactors, grad_u) -> np.ndarray:
    """Gradient w.r.t. ``m`` of a loss that depends on ``factors.u`` only.

    Works batched over leading axes. Near-repeated singular values are
    regularised by flooring ``|sigma_j^2 - sigma_i^2|`` at ``SVD_GAP_FLOOR``.
    """
    u, s, v = factors.u, factors.sigma, factors.v
    gu = as_tensor(grad_u)
    if not np.any(gu):
        return np.zeros_like(as_tensor(m))
    s2 = s * s
    diff = s2[..., None, :] - s2[..., :, None]  # diff[i, j] = s_j^2 - s_i^2
    diff = np.where(diff >= 0, np.maximum(diff, SVD_GAP_FLOOR), np.minimum(diff, -SVD_GAP_FLOOR))
    f = 1.0 / diff
    r = s.shape[-1]
    f[..., np.arange(r), np.arange(r)] = 0.0
    ut = np.swapaxes(u, -1, -2)
    utgu = ut @ gu
    inner = f * (utgu - np.swapaxes(utgu, -1, -2))
    vt = np.swapaxes(v, -1, -2)
    grad = u @ (inner * s[..., None, :]) @ vt
    n = u.shape[-2]
    if n > r:
        safe_s = np.maximum(s, SVD_GAP_FLOOR)
        proj = gu - u @ utgu
        grad = grad + (proj / safe_s[..., None, :]) @ vt
    return grad


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = as_tensor(logits)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = as_tensor(logits)
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row of a probability array, no validation."""
    p = as_tensor(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -np.sum(terms, axis=-1)


def shannon_entropy(p) -> float:
    p = as_tensor(p)
    if p.ndim != 1 or p.size == 0:
        raise ContractViolation("entropy expects a non-empty probability vector")
    if np.any(p < 0) or abs(float(np.sum(p)) - 1.0) > 1e-9:
        raise ContractViolation("entropy input is not a normalized distribution")
    return float(entropy_rows(p))


def mse(a, b) -> float:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mse shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# --------------------------------------------------------------------------
# reverse-mode tape


class Var:
    __slots__ = ("value", "grad", "parents", "adjoint", "requires_grad", "name")

    def __init__(self, value, parents=(), adjoint=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.adjoint = adjoint
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


class GradientTape:
    """Records ops in creation order; creation order is a valid topological order.

    Use as a context manager so ops built inside are recorded::

        with GradientTape() as tape:
            w = tape.watch(w0)
            loss = sum_(tanh(w @ x))
        (gw,) = tape.gradient(loss, [w])
    """

    _active: list = []

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self):
        GradientTape._active.append(self)
        return self

    def __exit__(self, *exc):
        GradientTape._active.pop()
        return False

    def watch(self, value, name=None) -> Var:
        return Var(as_tensor(value), requires_grad=True, name=name)

    def gradient(self, root: Var, sources: Sequence[Var]) -> list:
        if root.value.size != 1:
            raise ContractViolation("gradient root must be a scalar")
        for node in self.nodes:
            node.grad = None
        for s in sources:
            s.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            grads = node.adjoint(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not isinstance(parent, Var) or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg
        out = []
        for s in sources:
            out.append(np.zeros_like(s.value) if s.grad is None else s.grad)
        return out


def _record(value, parents, adjoint, name=None) -> Var:
    needs = any(isinstance(p, Var) and p.requires_grad for p in parents)
    node = Var(value, parents if needs else (), adjoint if needs else None, needs, name)
    if needs and GradientTape._active:
        GradientTape._active[-1].nodes.append(node)
    return node


def value_of(x):
    return x.value if isinstance(x, Var) else as_tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    av, bv = value_of(a), value_of(b)
    return _record(av + bv, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    av, bv = value_of(a), value_of(b)
    return _record(av - bv, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b) -> Var:
    av, bv = value_of(a), value_of(b)
    return _record(
        av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def square(a) -> Var:
    av = value_of(a)
    return _record(av * av, (a,), lambda g: (2.0 * av * g,))


def matmul(a, b) -> Var:
    av, bv = value_of(a), value_of(b)

    def adjoint(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(av @ bv, (a, b), adjoint)


def tanh(a) -> Var:
    y = np.tanh(value_of(a))
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Var:
    y = np.exp(value_of(a))
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Var:
    av = value_of(a)
    return _record(np.log(av), (a,), lambda g: (g / av,))


def sum_(a, axis=None, keepdims=False) -> Var:
    av = value_of(a)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record(np.asarray(np.sum(av, axis=axis, keepdims=keepdims)), (a,), adjoint)


def mean(a, axis=None, keepdims=False) -> Var:
    av = value_of(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Var:
    av = value_of(a)
    return _record(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None) -> Var:
    av = value_of(a)
    if axes is None:
        axes = tuple(range(av.ndim))[::-1]
    inv = np.argsort(axes)
    return _record(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, key) -> Var:
    av = value_of(a)

    def adjoint(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return (full,)

    return _record(av[key], (a,), adjoint)


def concat(parts, axis=-1) -> Var:
    values = [value_of(p) for p in parts]
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def adjoint(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(np.concatenate(values, axis=axis), tuple(parts), adjoint)


def take_rows(a, idx) -> Var:
    """Gather rows of a 2-D array; an index of -1 yields a zero row."""
    av = value_of(a)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    out = np.zeros((idx.size, av.shape[1]))
    out[valid] = av[idx[valid]]

    def adjoint(g):
        full = np.zeros_like(av)
        np.add.at(full, idx[valid], g[valid])
        return (full,)

    return _record(out, (a,), adjoint)


def log_softmax_op(a, axis=-1) -> Var:
    y = log_softmax(value_of(a), axis=axis)

    def adjoint(g):
        p = np.exp(y)
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _record(y, (a,), adjoint)


def logsumexp(a, axis=-1, mask=None) -> Var:
    """log-sum-exp over ``axis``; entries where ``mask`` is False are excluded."""
    av = value_of(a)
    if mask is None:
        mask = np.ones(av.shape, dtype=bool)
    shifted = np.where(mask, av, -np.inf)
    top = np.max(shifted, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(shifted - top), 0.0)
    total = np.sum(e, axis=axis, keepdims=True)
    y = np.log(total) + top

    def adjoint(g):
        w = e / total
        return (np.expand_dims(g, axis) * w,)

    return _record(np.squeeze(y, axis=axis), (a,), adjoint)


def take_along(a, idx, axis=-1) -> Var:
    """``a[i, idx[i]]`` along the last axis for a 2-D ``a``."""
    av = value_of(a)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(av.shape[0])

    def adjoint(g):
        full = np.zeros_like(av)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _record(av[rows, idx], (a,), adjoint)


def rnn_scan(x, w_in, w_rec, bias) -> Var:
    """Elman tanh recurrence over axis 1 of ``x`` (batch, time, features), zero initial state."""
    xv, wv, uv, bv = value_of(x), value_of(w_in), value_of(w_rec), value_of(bias)
    batch, steps, _ = xv.shape
    hidden = wv.shape[1]
    hs = np.empty((batch, steps, hidden))
    pre = xv @ wv + bv
    h = np.zeros((batch, hidden))
    for t in range(steps):
        h = np.tanh(pre[:, t] + h @ uv)
        hs[:, t] = h

    def adjoint(g):
        da_all = np.empty_like(hs)
        carry = np.zeros((batch, hidden))
        for t in range(steps - 1, -1, -1):
            dh = g[:, t] + carry
            da = dh * (1.0 - hs[:, t] ** 2)
            da_all[:, t] = da
            carry = da @ uv.T
        prev = np.concatenate([np.zeros((batch, 1, hidden)), hs[:, :-1]], axis=1)
        flat_da = da_all.reshape(-1, hidden)
        gx = da_all @ wv.T
        gw = xv.reshape(-1, xv.shape[2]).T @ flat_da
        gu = prev.reshape(-1, hidden).T @ flat_da
        gb = flat_da.sum(axis=0)
        return gx, gw, gu, gb

    return _record(hs, (x, w_in, w_rec, bias), adjoint)


def svd_u(a) -> Var:
    """Sign-normalized thin left singular factor over the last two axes."""
    av = value_of(a)
    factors = svd_batched(av)
    return _record(factors.u, (a,), lambda g: (svd_backward(av, factors, g),))


# every differentiable op, by name, for the finite-difference property suite
OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "square": square,
    "matmul": matmul,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "transpose": transpose,
    "getitem": getitem,
    "concat": concat,
    "take_rows": take_rows,
    "log_softmax": log_softmax_op,
    "logsumexp": logsumexp,
    "take_along": take_along,
    "rnn_scan": rnn_scan,
    "svd_u": svd_u,
}


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function."""
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    scale = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / scale)


def check_gradient(
    build: Callable[[Var], Var], x: np.ndarray, step: float = 1e-4
) -> tuple[float, np.ndarray, np.ndarray]:
    """Compare the tape gradient of ``build`` at ``x`` with finite differences."""
    with GradientTape() as tape:
        xv = tape.watch(x)
        out = build(xv)
    (analytic,) = tape.gradient(out, [xv])

    def fn(z):
        return float(value_of(build(Var(z))))

    numeric = numeric_gradient(fn, x, step)
    return relative_error(analytic, numeric), analytic, numeric


def scalar(x: Optional[Var]) -> float:
    return float(value_of(x)) if x is not None else 0.0
