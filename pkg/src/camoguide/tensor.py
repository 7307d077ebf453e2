"""Dense tensors with reverse-mode automatic differentiation.

Conventions used throughout the project:

- row-major float32 buffers (``verification_mode`` switches new tensors to
  float64 for tight gradient checking),
- feature maps are ``C x H x W``, matrices are ``(rows, cols)``,
- ``backward`` accumulates into ``.grad`` and never zeroes it; the training
  loop owns gradient lifecycles,
- calling ``backward`` twice on the same output is an error.

GELU uses the tanh approximation
``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def verification_mode():
    """Build tensors in float64 while the context is active.

    Used by gradient checks that need tolerances tighter than float32 allows.
    """
    global _DEFAULT_DTYPE
    saved = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64
    try:
        yield
    finally:
        _DEFAULT_DTYPE = saved


class Tensor:
    """A dense array plus an optional record of how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw", "_done")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, (np.ndarray, np.floating)) and \
                data.dtype in (np.float32, np.float64):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._bw = None
        self._done = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{req})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Stop-gradient boundary: same values, no graph, no grad."""
        return Tensor(self.data)

    # -- autodiff core --------------------------------------------------------

    def _acc(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse accumulation from a scalar output to every grad leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("backward() on a non-finite loss")
        if self._done:
            raise RuntimeError("backward() already ran on this output")
        order = _toposort(self)
        self._acc(np.ones_like(self.data))
        for node in reversed(order):
            if node._bw is not None:
                node._bw()
        self._done = True

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = _make(self.data + other.data, (self, other))
            if out.requires_grad:
                def bw():
                    g = out.grad
                    if self.requires_grad:
                        self._acc(_unbroadcast(g, self.data.shape))
                    if other.requires_grad:
                        other._acc(_unbroadcast(g, other.data.shape))
                out._bw = bw
            return out
        out = _make(self.data + other, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad)
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(-out.grad)
        return out

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out = _make(self.data - other.data, (self, other))
            if out.requires_grad:
                def bw():
                    g = out.grad
                    if self.requires_grad:
                        self._acc(_unbroadcast(g, self.data.shape))
                    if other.requires_grad:
                        other._acc(_unbroadcast(-g, other.data.shape))
                out._bw = bw
            return out
        out = _make(self.data - other, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad)
        return out

    def __rsub__(self, other):
        out = _make(other - self.data, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(-out.grad)
        return out

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = _make(self.data * other.data, (self, other))
            if out.requires_grad:
                def bw():
                    g = out.grad
                    if self.requires_grad:
                        self._acc(_unbroadcast(g * other.data, self.data.shape))
                    if other.requires_grad:
                        other._acc(_unbroadcast(g * self.data, other.data.shape))
                out._bw = bw
            return out
        out = _make(self.data * other, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad * other)
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = _make(self.data / other.data, (self, other))
            if out.requires_grad:
                def bw():
                    g = out.grad
                    if self.requires_grad:
                        self._acc(_unbroadcast(g / other.data, self.data.shape))
                    if other.requires_grad:
                        other._acc(_unbroadcast(-g * self.data / (other.data * other.data),
                                                other.data.shape))
                out._bw = bw
            return out
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        out = _make(other / self.data, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(-out.grad * other / (self.data * self.data))
        return out

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = _make(self.data ** p, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad * p * self.data ** (p - 1))
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.data.shape
        out = _make(self.data.reshape(shape), (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad.reshape(src_shape))
        return out

    def transpose(self, axes=None):
        out = _make(np.transpose(self.data, axes), (self,))
        if out.requires_grad:
            inv = None if axes is None else tuple(np.argsort(axes))
            out._bw = lambda: self._acc(np.transpose(out.grad, inv))
        return out

    # -- reductions --------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            shape = self.data.shape

            def bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._acc(np.broadcast_to(g, shape))
            out._bw = bw
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions ---------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = _make(y, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad * y)
        return out

    def log(self):
        out = _make(np.log(self.data), (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad / self.data)
        return out

    def sqrt(self):
        y = np.sqrt(self.data)
        out = _make(y, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad * 0.5 / y)
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = _make(y, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad * (1.0 - y * y))
        return out

    def relu(self):
        y = np.maximum(self.data, 0.0)
        out = _make(y, (self,))
        if out.requires_grad:
            mask = self.data > 0
            out._bw = lambda: self._acc(out.grad * mask)
        return out

    def sigmoid(self):
        y = _sigmoid(self.data)
        out = _make(y, (self,))
        if out.requires_grad:
            out._bw = lambda: self._acc(out.grad * y * (1.0 - y))
        return out

    def softplus(self):
        x = self.data
        y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        out = _make(y, (self,))
        if out.requires_grad:
            s = _sigmoid(x)
            out._bw = lambda: self._acc(out.grad * s)
        return out

    def gelu(self):
        x = self.data
        u = _GELU_C0 * (x + _GELU_C1 * x ** 3)
        t = np.tanh(u)
        out = _make(0.5 * x * (1.0 + t), (self,))
        if out.requires_grad:
            du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            out._bw = lambda: self._acc(out.grad * local)
        return out


def _make(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _toposort(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


# -- creation helpers --------------------------------------------------------


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(*shape, requires_grad: bool = False) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(*shape, requires_grad: bool = False) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, scale: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    data = (rng.standard_normal(shape) * scale).astype(_DEFAULT_DTYPE)
    return Tensor(data, requires_grad=requires_grad)


# -- spec-level operations -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product with exact gradients."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects tensors")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = _make(a.data @ b.data, (a, b))
    if out.requires_grad:
        def bw():
            g = out.grad
            if a.requires_grad:
                a._acc(g @ b.data.T)
            if b.requires_grad:
                b._acc(a.data.T @ g)
        out._bw = bw
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Probability-normalize along ``axis`` with max-subtraction stability."""
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,))
    if out.requires_grad:
        def bw():
            g = out.grad
            x._acc(y * (g - (g * y).sum(axis=axis, keepdims=True)))
        out._bw = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Population variance (no Bessel correction); ``eps`` guards zero variance.
    """
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def bw():
            g = out.grad
            if gain.requires_grad:
                gain._acc(_unbroadcast(g * xhat, gain.data.shape))
            if bias.requires_grad:
                bias._acc(_unbroadcast(g, bias.data.shape))
            if x.requires_grad:
                dxh = g * gain.data
                m1 = dxh.mean(axis=-1, keepdims=True)
                m2 = (dxh * xhat).mean(axis=-1, keepdims=True)
                x._acc(inv * (dxh - m1 - xhat * m2))
        out._bw = bw
    return out


_ACTIVATIONS = {
    "tanh": Tensor.tanh,
    "relu": Tensor.relu,
    "gelu": Tensor.gelu,
    "sigmoid": Tensor.sigmoid,
}


def activate(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation dispatch; unknown kinds are an error."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    return fn(x)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with padding 1 and stride 1 or 2.

    ``x`` is ``C_in x H x W``, ``w`` is ``C_out x C_in x 3 x 3``.
    """
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects CxHxW and Cx Cx3x3, got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cw = w.shape[:2]
    if cw != cin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((cin, 3, 3, ho, wo), dtype=x.data.dtype)
    for ki in range(3):
        for kj in range(3):
            cols[:, ki, kj] = xp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    cols2 = cols.reshape(cin * 9, ho * wo)
    w2 = w.data.reshape(cout, cin * 9)
    y = (w2 @ cols2 + b.data[:, None]).reshape(cout, ho, wo)
    out = _make(y, (x, w, b))
    if out.requires_grad:
        def bw():
            g2 = out.grad.reshape(cout, ho * wo)
            if w.requires_grad:
                w._acc((g2 @ cols2.T).reshape(w.data.shape))
            if b.requires_grad:
                b._acc(g2.sum(axis=1))
            if x.requires_grad:
                gcols = (w2.T @ g2).reshape(cin, 3, 3, ho, wo)
                gxp = np.zeros_like(xp)
                for ki in range(3):
                    for kj in range(3):
                        gxp[:, ki:ki + stride * ho:stride,
                            kj:kj + stride * wo:stride] += gcols[:, ki, kj]
                x._acc(gxp[:, 1:h + 1, 1:wd + 1])
        out._bw = bw
    return out


_UP_CACHE: dict = {}


def _up_matrix(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    r = _UP_CACHE.get(key)
    if r is None:
        r = np.zeros((2 * n, n), dtype=dtype)
        for i in range(2 * n):
            xc = (i + 0.5) / 2.0 - 0.5
            x0 = math.floor(xc)
            t = xc - x0
            lo = min(max(x0, 0), n - 1)
            hi = min(max(x0 + 1, 0), n - 1)
            r[i, lo] += 1.0 - t
            r[i, hi] += t
        _UP_CACHE[key] = r
    return r


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    """Double the spatial size of a ``C x H x W`` map (align_corners=false)."""
    if x.ndim != 3:
        raise ValueError(f"upsample expects CxHxW, got {x.shape}")
    _, h, w = x.shape
    rh = _up_matrix(h, x.data.dtype)
    rw = _up_matrix(w, x.data.dtype)
    y = np.matmul(np.matmul(rh, x.data), rw.T)
    out = _make(y, (x,))
    if out.requires_grad:
        out._bw = lambda: x._acc(np.matmul(np.matmul(rh.T, out.grad), rw))
    return out


def global_average_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean of a ``C x H x W`` map."""
    if x.ndim != 3:
        raise ValueError(f"global_average_pool expects CxHxW, got {x.shape}")
    return x.mean(axis=(1, 2))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def bw():
            g = out.grad
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._acc(g[tuple(idx)])
        out._bw = bw
    return out


def backward(loss: Tensor) -> None:
    loss.backward()


# -- verification -----------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float | None = None,
                            max_coords: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Compare the analytic gradient of ``f`` at ``x`` to central differences.

    Returns the max relative error over checked coordinates, with denominator
    ``max(|analytic|, |numeric|, 1e-6)``. ``h`` defaults to 1e-3 for float32
    inputs and 1e-5 for float64. Coordinates are subsampled to ``max_coords``
    when given (spec tolerance applies per coordinate either way).
    """
    if h is None:
        h = 1e-3 if x.data.dtype == np.float32 else 1e-5
    leaf = Tensor(x.data.copy(), requires_grad=True)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise ValueError("function value is not finite")
    out.backward()
    analytic = (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad).ravel()

    coords = np.arange(x.data.size)
    if max_coords is not None and x.data.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(x.data.size, size=max_coords, replace=False)

    # numeric side runs in float64 so central differences are not drowned by
    # storage-precision rounding of the function values
    base = x.data.astype(np.float64).ravel().copy()
    worst = 0.0
    for i in coords:
        for sign in (+1.0, -1.0):
            pert = base.copy()
            pert[i] += sign * h
            val = f(Tensor(pert.reshape(x.data.shape))).item()
            if not math.isfinite(val):
                raise ValueError("function value is not finite during perturbation")
            if sign > 0:
                fp = val
            else:
                fm = val
        numeric = (fp - fm) / (2.0 * h)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
