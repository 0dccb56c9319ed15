"""Dense float64 tensors with a dynamic reverse-mode tape.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure that pushes the output gradient back into them.
``backward`` collects the reachable nodes and replays the closures in reverse
creation order, so each node is visited exactly once.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_seq = itertools.count()
_state = threading.local()

# Sigmoid outputs are kept inside the open interval so log(D) and log(1-D)
# stay finite when the discriminator saturates.
_SIGMOID_EPS = 1e-15


class DimensionError(ValueError):
    """Raised when tensor extents are incompatible with an op."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._seq = next(_seq)
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Tuple["Tensor", ...], op: str,
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = ""
        out._seq = next(_seq)
        out.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    # -- reverse pass ----------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1 and grad is None:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._parents)
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)

        grads = {id(self): np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accum(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(a.data + b.data, (a, b), "add",
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(a.data - b.data, (a, b), "sub",
                        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._make(a.data * b.data, (a, b), "mul",
                        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def broadcast_mul(x, weights) -> Tensor:
    """Weight a C×H×W (or N×C×H×W) map by a 1×H×W map, shared over channels."""
    x, weights = as_tensor(x), as_tensor(weights)
    if x.shape[-2:] != weights.shape[-2:] or weights.shape[-3] != 1:
        raise DimensionError(f"cannot weight {x.shape} by {weights.shape}")
    return mul(x, weights)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make(out, (a, b), "div", back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._make(out, (x,), "sqrt", lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),))


def power(x: Tensor, p) -> Tensor:
    """``x ** p`` for nonnegative ``x``; ``p`` may itself be a tensor.

    Gradients at ``x == 0`` follow the limit for ``p >= 1`` (zero for
    ``p > 1``), and the ``p``-gradient ``x**p * ln x`` is taken as 0 there.
    """
    x = as_tensor(x)
    p = as_tensor(p)
    out = np.power(x.data, p.data)

    def back(g):
        xd, pd = x.data, p.data
        safe = np.where(xd > 0, xd, 1.0)
        gx = np.where(xd > 0, pd * np.power(safe, pd - 1.0), np.where(pd == 1.0, 1.0, 0.0))
        gp = np.where(xd > 0, out * np.log(safe), 0.0)
        return _unbroadcast(g * gx, x.shape), _unbroadcast(g * gp, p.shape)

    return Tensor._make(out, (x, p), "power", back)


def root(x: Tensor, p) -> Tensor:
    """``x ** (1/p)`` for nonnegative ``x``; gradient is 0 where ``x == 0``."""
    x = as_tensor(x)
    p = as_tensor(p)
    inv = 1.0 / p.data
    out = np.power(x.data, inv)

    def back(g):
        xd = x.data
        pos = xd > 0
        safe = np.where(pos, xd, 1.0)
        gx = np.where(pos, inv * out / safe, 0.0)
        gp = np.where(pos, -out * np.log(safe) * inv * inv, 0.0)
        return _unbroadcast(g * gx, x.shape), _unbroadcast(g * gp, p.shape)

    return Tensor._make(out, (x, p), "root", back)


# -- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return Tensor._make(x.data * scale, (x,), "leaky_relu", lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    s = np.clip(s, _SIGMOID_EPS, 1.0 - _SIGMOID_EPS)
    return Tensor._make(s, (x,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x) in the overflow-safe form max(x, 0) + ln(1 + e^-|x|)."""
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    # d/dx softplus = sigmoid(x)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(out, (x,), "softplus", lambda g: (g * sig,))


# -- reductions and shape ops ---------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (x,), "sum", back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (x,), "mean", back)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._make(x.data.transpose(axes), (x,), "transpose", lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), "concat",
                        lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), "stack",
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def index(x: Tensor, i: int) -> Tensor:
    """Select entry ``i`` along the leading axis."""
    def back(g):
        full = np.zeros_like(x.data)
        full[i] = g
        return (full,)

    return Tensor._make(x.data[i].copy(), (x,), "index", back)


def l2_normalize(x: Tensor, axis=-1, eps: float = 1e-12) -> Tensor:
    """Scale ``x`` to unit Euclidean norm along ``axis``.

    Slices whose norm is below ``eps`` are divided by ``eps`` instead.
    """
    axes = _norm_axis(axis, x.ndim)
    norm = np.sqrt((x.data * x.data).sum(axis=axes, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom

    def back(g):
        live = norm >= eps
        proj = (g * out).sum(axis=axes, keepdims=True)
        gx = np.where(live, (g - out * proj) / denom, g / denom)
        return (gx,)

    return Tensor._make(out, (x,), "l2_normalize", back)


def log_softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return Tensor._make(out, (x,), "log_softmax",
                        lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    return exp(log_softmax(x, axis))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def back(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return Tensor._make(out, (a, b), "matmul", back)


def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between two vectors; gradient is 0 when they coincide."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"distance between {a.shape} and {b.shape}")
    diff = a.data - b.data
    d = float(np.sqrt((diff * diff).sum()))

    def back(g):
        if d == 0.0:
            z = np.zeros_like(diff)
            return z, z
        u = g * diff / d
        return u, -u

    return Tensor._make(np.asarray(d), (a, b), "euclidean_distance", back)


# -- spatial ops ------------------------------------------------------------------

def _as4d(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a C×H×W (or N×C×H×W) input with O×C×k×k filters."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be 3-D or 4-D, got {x.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    squeeze = x.ndim == 3
    xd = _as4d(x.data)
    n, c, h, w = xd.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels, weight expects {ci}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}+2*{padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: n, c, ho, wo, kh, kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, as_tensor(bias))

    def back(g):
        g4 = _as4d(g)
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if squeeze:
                gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return Tensor._make(out[0] if squeeze else out, parents, "conv2d", back)


def upsample_nearest(x: Tensor, target: Tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize of the last two axes to ``target``.

    ``out[..., i, j] = x[..., floor(i*H/Ht), floor(j*W/Wt)]``.
    """
    x = as_tensor(x)
    ht, wt = int(target[0]), int(target[1])
    h, w = x.shape[-2:]
    if ht <= 0 or wt <= 0:
        raise DimensionError(f"upsample target must be positive, got {target}")
    if ht < h or wt < w:
        raise DimensionError(f"upsample target {target} smaller than input {(h, w)}")
    if (ht, wt) == (h, w):
        return Tensor._make(x.data.copy(), (x,), "upsample_nearest", lambda g: (g,))
    ri = (np.arange(ht) * h) // ht
    rj = (np.arange(wt) * w) // wt
    out = x.data[..., ri[:, None], rj[None, :]]

    def back(g):
        lead = g.shape[:-2]
        # fold replicated rows, then replicated columns
        acc = np.zeros(lead + (h, wt))
        for src_i in range(h):
            acc[..., src_i, :] = g[..., ri == src_i, :].sum(axis=-2)
        gx = np.zeros(lead + (h, w))
        for src_j in range(w):
            gx[..., :, src_j] = acc[..., :, rj == src_j].sum(axis=-1)
        return (gx,)

    return Tensor._make(out, (x,), "upsample_nearest", back)
