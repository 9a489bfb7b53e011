"""A small reverse-mode automatic differentiation engine over float64 numpy arrays.

Each op computes its forward value eagerly and, when any input requires a
gradient, records a closure mapping the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph once in reverse topological order.

Gradient rules:

* ``backward`` zeroes the gradients of every tensor in the graph before
  accumulating, and may be called only once per graph root.
* ``abs`` uses the subgradient 0 at 0.
* ``stop_gradient`` is the identity forward and a dead end backward.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import InvalidConfiguration, ShapeError

DTYPE = np.float64
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_spent")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._spent = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{rg})"

    # -- backward -------------------------------------------------------------
    def _topo(self):
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if self._spent:
            raise RuntimeError("backward() already ran for this graph; rebuild it first")
        if grad is None:
            if self.data.size != 1:
                raise InvalidConfiguration(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = self._topo()
        for node in order:
            node.grad = None
        self.grad = np.asarray(grad, dtype=DTYPE).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    p.grad += g
        self._spent = True

    # -- operator sugar -------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _result(data, parents, backward, op):
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def square(x):
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def abs_(x):
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,), "abs")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (out * g,), "exp")


def log(x):
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return ((cdf + x.data * pdf) * g,)

    return _result(x.data * cdf, (x,), back, "gelu")


def stop_gradient(x):
    x = as_tensor(x)
    out = Tensor(x.data)
    out._op = "stop_gradient"
    return out


# -- shape ops -------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def slice_(x, key):
    x = as_tensor(x)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(x.data[key], (x,), back, "slice")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else ts[0].ndim + 1 + axis
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


def index_select(x, indices, axis=0):
    """``np.take(x, indices, axis)`` with gradient (duplicates accumulate)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (gx,)

    if indices.ndim != 1:
        raise ShapeError(f"index_select expects 1-D indices, got shape {indices.shape}")
    return _result(np.take(x.data, indices, axis=axis), (x,), back, "index_select")


def _flat_rows(idx, lead):
    idx = np.broadcast_to(np.asarray(idx, dtype=np.int64), lead + (np.shape(idx)[-1],))
    b = int(np.prod(lead, dtype=np.int64)) if lead else 1
    return idx.reshape(b, -1), b


def gather_rows(x, idx):
    """Select rows along axis -2: ``out[..., t, :] = x[..., idx[..., t], :]``.

    ``idx`` has shape ``[..., T]`` matching (or broadcasting to) the leading
    dims of ``x``.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"gather_rows needs a tensor of rank >= 2, got {x.shape}")
    lead, n, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    flat_idx, b = _flat_rows(idx, lead)
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    t = flat_idx.shape[1]
    rows = np.arange(b)[:, None]
    xf = x.data.reshape(b, n, d)
    out = xf[rows, flat_idx].reshape(lead + (t, d))

    def back(g):
        gx = np.zeros((b, n, d))
        np.add.at(gx, (rows, flat_idx), g.reshape(b, t, d))
        return (gx.reshape(x.shape),)

    return _result(out, (x,), back, "gather_rows")


def scatter_rows(x, idx, n_rows):
    """Inverse of ``gather_rows``: place rows of ``x`` at ``idx`` in a zero
    tensor with ``n_rows`` rows along axis -2 (duplicates add)."""
    x = as_tensor(x)
    lead, t, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    flat_idx, b = _flat_rows(idx, lead)
    if flat_idx.shape[1] != t:
        raise ShapeError(f"scatter_rows: {t} rows but index shape {np.shape(idx)}")
    rows = np.arange(b)[:, None]
    out = np.zeros((b, n_rows, d))
    np.add.at(out, (rows, flat_idx), x.data.reshape(b, t, d))

    def back(g):
        return (g.reshape(b, n_rows, d)[rows, flat_idx].reshape(x.shape),)

    return _result(out.reshape(lead + (n_rows, d)), (x,), back, "scatter_rows")


# -- reductions ------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    return _result(
        x.data.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand(g, x.shape, axis, keepdims),),
        "sum",
    )


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size // max(out.size, 1) if x.data.size else 1
    return _result(
        out,
        (x,),
        lambda g: (_expand(g, x.shape, axis, keepdims) / count,),
        "mean",
    )


# -- linear algebra & normalisation ----------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # shared weight: contract all leading dims in one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return _unbroadcast(ga, a.shape), gb
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), back, "matmul")


def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), back, "softmax")


def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def back(g):
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), back, "log_softmax")


def layer_norm(x, weight=None, bias=None, eps=1e-6):
    """Normalise over the last axis, then apply the optional affine map."""
    if eps <= 0:
        raise InvalidConfiguration(f"layer_norm eps must be > 0, got {eps}")
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    out = _result(xhat, (x,), back, "layer_norm")
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# -- finite-difference checking --------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    indices: np.ndarray
    tol: float

    @property
    def element_passed(self):
        return self.rel_errors < self.tol


def relative_error(analytic, numeric, floor=1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(f, x, h=1e-5, tol=1e-5, indices=None, floor=1e-8, reference=None):
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``indices`` restricts the check to
    a subset of flat coordinates. ``reference``, if given, is differenced in
    place of ``f`` (useful when ``f`` contains stop-gradients). Passes iff the worst relative error
    (denominator floored at ``floor``) is below ``tol``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise InvalidConfiguration(f"step h must lie in [1e-7, 1e-3], got {h}")
    if tol <= 0:
        raise InvalidConfiguration(f"tolerance must be > 0, got {tol}")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    xt = parameter(x0.copy())
    out = f(xt)
    if out.size != 1:
        raise InvalidConfiguration(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic_full = np.zeros_like(x0) if xt.grad is None else xt.grad
    flat_idx = np.arange(x0.size) if indices is None else np.asarray(indices, dtype=np.int64)

    numeric = np.empty(flat_idx.size)
    g = f if reference is None else reference
    with no_grad():
        for k, i in enumerate(flat_idx):
            xp = x0.copy().reshape(-1)
            xp[i] += h
            fp = g(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * h
            fm = g(Tensor(xp.reshape(x0.shape))).item()
            numeric[k] = (fp - fm) / (2 * h)
    analytic = analytic_full.reshape(-1)[flat_idx]
    rel = relative_error(analytic, numeric, floor)
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, worst < tol, rel, analytic, numeric, flat_idx, tol)
