"""Dense tensors with a dynamic reverse-mode tape.

Storage is a row-major numpy buffer.  Every op records its parents and a
closure mapping the output gradient to parent gradients; ``backward`` walks
the recorded graph in reverse topological order.  Ops never mutate their
inputs and no op works in place on a taped tensor.
"""
from __future__ import annotations

import contextlib
import math
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from faxbev.errors import ConfigurationError, DimensionError, NonFiniteError, UsageError

DTYPES = {"f32": np.float32, "f64": np.float64}
DEFAULT_DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


_DEBUG_DEFAULT = os.environ.get("FAXBEV_DEBUG", "") not in ("", "0")


def _debug() -> bool:
    return getattr(_state, "debug", _DEBUG_DEFAULT)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/Inf while active."""
    prev = _debug()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}, op={self._op})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute_axes(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def backward(self) -> None:
        backward(self)


def _raise_item(shape):
    raise UsageError(f"item() needs a single-element tensor, got shape {shape}")


class Parameter(Tensor):
    """A trainable tensor with a dotted name path."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype.name})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        dtype = DEFAULT_DTYPE
    return Tensor(arr, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _debug() and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return out


def _result_dtype(*ts: Tensor):
    return np.result_type(*[t.data.dtype for t in ts])


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- backward -------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d t into ``t.grad`` for every tensor reachable from ``loss``.

    Repeated calls without resetting gradients accumulate.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor requiring grad")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad * bd
    return _make(
        out, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(x: Tensor, s: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data.dtype.type(s), (x,), lambda g: (g * s,), "scale")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean")


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    ax = axis % x.ndim

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=ax, keepdims=keepdims), (x,), bw, "sum_axis")


# -- shape ---------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def permute_axes(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"axes {axes} are not a permutation of rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "permute")


def swap_last2(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute_axes(x, axes)


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    ax = axis % ts[0].ndim
    sizes = [t.shape[ax] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(ts))
        )

    return _make(out, ts, bw, "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in ts]
    ax = axis % (ts[0].ndim + 1)
    out = np.stack([t.data for t in ts], axis=ax)

    def bw(g):
        return tuple(np.ascontiguousarray(np.take(g, i, axis=ax)) for i in range(len(ts)))

    return _make(out, ts, bw, "stack")


def index_select(x: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather whole slices along ``axis`` (indices may repeat)."""
    x = as_tensor(x)
    ax = axis % x.ndim
    index = np.asarray(index, dtype=np.int64)
    out = np.take(x.data, index, axis=ax)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(gx, ax, 0)
        # the index dims sit where ``ax`` was; bring them to the front and flatten
        k = index.ndim
        gm = np.moveaxis(g, list(range(ax, ax + k)), list(range(k))) if k else np.expand_dims(g, 0)
        np.add.at(moved, index.reshape(-1), gm.reshape((-1,) + moved.shape[1:]))
        return (gx,)

    return _make(out, (x,), bw, "index_select")


def gather_last(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[..., index]`` for a flat index array of any shape (bias lookup)."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    lead = table.shape[:-1]
    n = table.shape[-1]
    out = table.data[..., index]

    def bw(g):
        g2 = g.reshape(-1, index.size)
        flat = index.reshape(-1)
        gt = np.stack([np.bincount(flat, weights=row, minlength=n) for row in g2])
        return (gt.reshape(lead + (n,)).astype(g.dtype, copy=False),)

    return _make(out, (table,), bw, "gather_last")


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions incompatible: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                # fold batch dims for a single large GEMM
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` on the last axis."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def mlp_block(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Two channel projections with a GELU in between: ``W2 GELU(W1 x)``."""
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != x.shape[-1]:
        raise DimensionError(f"mlp shapes do not chain: x{x.shape} w1{w1.shape} w2{w2.shape}")
    return matmul(gelu(matmul(x, w1)), w2)


# -- normalisation / softmax ------------------------------------------------

def softmax_lastaxis(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax_lastaxis(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift.

    Zero-variance rows map to ``beta`` (the eps in the denominator keeps them finite).
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm channel mismatch: x{x.shape} gamma{gamma.shape} beta{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = gb = gx = None
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Channel-last batch norm over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated (they are plain arrays, not on the tape).
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise DimensionError(f"batch_norm channel mismatch: x{x.shape} gamma{gamma.shape}")
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean) * inv
        out = (xhat * gamma.data + beta.data).astype(xd.dtype, copy=False)

        def bw_eval(g):
            return (g * gamma.data * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return _make(out, (x, gamma, beta), bw_eval, "batch_norm_eval")

    n = xd.size // c
    mu = xd.mean(axis=axes)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(xd.dtype, copy=False)
    unbiased = var * (n / max(n - 1, 1))
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def bw(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=axes) - xhat * (gh * xhat).mean(axis=axes))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out, (x, gamma, beta), bw, "batch_norm")


# -- convolution and resampling ---------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None) -> Tensor:
    """Channel-last cross-correlation. ``x``: [..., H, W, Cin]; ``weight``: [k, k, Cin, Cout]."""
    x = as_tensor(x)
    kh, kw, cin, cout = weight.shape
    if (kh, kw) not in ((1, 1), (3, 3)):
        raise ConfigurationError(f"unsupported kernel size {kh}x{kw}; use 1x1 or 3x3")
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d input channels {x.shape[-1]} != weight Cin {cin}")
    pad = (kh // 2) if padding is None else padding
    xd = x.data
    lead = xd.shape[:-3]
    h, w = xd.shape[-3:-1]
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if pad:
        widths = [(0, 0)] * len(lead) + [(pad, pad), (pad, pad), (0, 0)]
        xp = np.pad(xd, widths)
    else:
        xp = xd
    taps = [(dy, dx) for dy in range(kh) for dx in range(kw)]
    if kh == 1 and stride == 1:
        cols = xp
    else:
        cols = np.concatenate(
            [xp[..., dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride, :]
             for dy, dx in taps], axis=-1)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, kh * kw * cin).T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g @ wmat.T
            if kh == 1 and stride == 1:
                gxp = gcols
            else:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for t, (dy, dx) in enumerate(taps):
                    gxp[..., dy:dy + stride * (ho - 1) + 1:stride,
                        dx:dx + stride * (wo - 1) + 1:stride, :] += gcols[..., t * cin:(t + 1) * cin]
            gx = gxp[..., pad:pad + h, pad:pad + w, :] if pad else gxp
            gx = np.ascontiguousarray(gx)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bw, f"conv{kh}x{kw}")


def linear_resample(x: Tensor, matrix, out_hw: tuple[int, int]) -> Tensor:
    """Apply a fixed (sparse) spatial resampling matrix to [..., H, W, C].

    ``matrix`` has shape (Ho*Wo, H*W); the map is linear in ``x`` so the
    backward pass is the transposed matrix.
    """
    x = as_tensor(x)
    xd = x.data
    lead = xd.shape[:-3]
    h, w, c = xd.shape[-3:]
    if matrix.shape[1] != h * w:
        raise DimensionError(f"resample matrix expects {matrix.shape[1]} pixels, got {h}x{w}")
    ho, wo = out_hw
    b = int(np.prod(lead)) if lead else 1
    flat = xd.reshape(b, h * w, c).transpose(1, 0, 2).reshape(h * w, b * c)
    res = np.asarray(matrix @ flat, dtype=xd.dtype)
    out = res.reshape(ho * wo, b, c).transpose(1, 0, 2).reshape(lead + (ho, wo, c))
    mt = matrix.T.tocsr() if hasattr(matrix, "tocsr") else matrix.T

    def bw(g):
        gf = g.reshape(b, ho * wo, c).transpose(1, 0, 2).reshape(ho * wo, b * c)
        gx = np.asarray(mt @ gf, dtype=g.dtype)
        return (gx.reshape(h * w, b, c).transpose(1, 0, 2).reshape(xd.shape),)

    return _make(np.ascontiguousarray(out), (x,), bw, "resample")


def _upsample_axis(n: int) -> np.ndarray:
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


_UPSAMPLE_CACHE: dict[tuple[int, int], object] = {}


def upsample2x_matrix(h: int, w: int):
    """Sparse (4HW, HW) matrix of align-corners-false bilinear 2x upsampling."""
    import scipy.sparse as sp

    key = (h, w)
    if key not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[key] = sp.kron(sp.csr_matrix(_upsample_axis(h)),
                                       sp.csr_matrix(_upsample_axis(w))).tocsr()
    return _UPSAMPLE_CACHE[key]


def bilinear_upsample2x(x: Tensor) -> Tensor:
    h, w = x.shape[-3:-1]
    return linear_resample(x, upsample2x_matrix(h, w), (2 * h, 2 * w))


# -- losses ------------------------------------------------------------------

def _check_targets(target: np.ndarray, k: int) -> np.ndarray:
    target = np.asarray(target)
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"class ids must lie in [0, {k}), got range [{target.min()}, {target.max()}]")
    return target.astype(np.int64)


def weighted_cross_entropy(logits: Tensor, target, weights, mask=None) -> Tensor:
    """Mean over (masked) pixels of ``-w[t] * log softmax(logits)[t]``."""
    logits = as_tensor(logits)
    k = logits.shape[-1]
    target = _check_targets(target, k)
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"target shape {target.shape} does not match logits {logits.shape}")
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=logits.dtype)
    m = np.ones(target.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = max(float(m.sum()), 1.0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    lp_t = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    coef = w[target] * m
    loss = np.asarray(-(coef * lp_t).sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
        return ((p - onehot) * (coef / count)[..., None] * g,)

    return _make(loss, (logits,), bw, "weighted_ce")


def focal_loss(logits: Tensor, target, gamma: float = 2.0, mask=None) -> Tensor:
    """Mean over (masked) pixels of ``-(1 - p_t)^gamma log p_t``."""
    if gamma < 0:
        raise ValueError("focal gamma must be >= 0")
    logits = as_tensor(logits)
    k = logits.shape[-1]
    target = _check_targets(target, k)
    m = np.ones(target.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    count = max(float(m.sum()), 1.0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    lp_t = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    p_t = np.exp(lp_t)
    one_m = np.clip(1.0 - p_t, 0.0, None)
    mod = one_m ** gamma
    loss = np.asarray(-(m * mod * lp_t).sum() / count, dtype=logits.dtype)

    def bw(g):
        # dL/dp_t * p_t, with dp_t/dz = p_t (onehot - p)
        if gamma == 0:
            dmod = np.zeros_like(one_m)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                dmod = np.where(one_m > 0, gamma * one_m ** (gamma - 1), 0.0)
        scale_t = dmod * lp_t * p_t - mod
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
        dz = scale_t[..., None] * (onehot - p)
        return (dz * (m / count)[..., None] * g,)

    return _make(loss, (logits,), bw, "focal")


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, as_tensor(np.asarray(target, dtype=pred.dtype)))
    return mean_all(mul(diff, diff))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
