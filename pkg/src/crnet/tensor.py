"""Dense N-d tensors with reverse-mode automatic differentiation.

Every differentiable primitive the network is built from lives here:
convolution, pooling, bilinear upsampling, elementwise math, softmax,
matmul, and concatenation. Tensors record their provenance when any
input requires a gradient; calling ``backward()`` on a scalar result
walks the graph in reverse topological order and accumulates gradients
additively into every reachable tensor that asked for them.

Two float precisions are supported: float32 for ordinary training and
inference, float64 for gradient verification. All tensors participating
in one graph must share a single dtype; mixing is rejected.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array plus optional gradient slot and graph linkage.

    data is contiguous row-major; image tensors use [B, C, H, W] with
    width innermost. ``grad`` stays ``None`` until a backward pass
    deposits something, and a tensor created with requires_grad=False
    never accumulates gradient.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad: bool = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, "
            f"requires_grad={self.requires_grad})"
        )

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, cut loose from the graph, no gradient tracking."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph mechanics ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root.

        Gradients accumulate additively across fan-out, so a tensor used
        twice receives twice the gradient of a single use.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.shape}")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        if not self.requires_grad:
            self.grad = np.ones_like(self.data)
        for node in order:
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)


def _toposort(root: Tensor) -> list:
    """Reverse topological order (root first), iterative to survive deep graphs."""
    order: list = []
    visited: set = set()
    emitted: set = set()
    stack = [root]
    while stack:
        node = stack[-1]
        nid = id(node)
        if nid in visited:
            stack.pop()
            if nid not in emitted:
                emitted.add(nid)
                order.append(node)
            continue
        visited.add(nid)
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append(parent)
    order.reverse()
    return order


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(
            f"tensors in one graph must share one dtype, got {sorted(str(d) for d in dtypes)}"
        )


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_same_dtype(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_same_dtype(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b)
    b = _wrap(b, a)
    _check_same_dtype(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**p for a scalar exponent.

    Non-integer exponents require non-negative input (negative-base guard).
    """
    p = float(exponent)
    if p != round(p) and np.any(x.data < 0):
        raise ValueError(f"power: fractional exponent {p} on negative values")
    data = x.data**p

    def backward(g):
        x._accumulate(g * p * x.data ** (p - 1.0))

    return _node(data, (x,), backward)


def tlog(x: Tensor) -> Tensor:
    """Natural logarithm; input must be strictly positive."""
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return _node(data, (x,), backward)


def tabs(x: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at exactly zero."""
    data = np.abs(x.data)

    def backward(g):
        x._accumulate(g * np.sign(x.data))

    return _node(data, (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient flows only where x > floor."""
    data = np.maximum(x.data, x.data.dtype.type(floor))

    def backward(g):
        x._accumulate(g * (x.data > floor))

    return _node(data, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    data = x.data.sum()

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(np.asarray(data), (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = x.data.mean()

    def backward(g):
        x._accumulate(np.broadcast_to(g / n, x.shape))

    return _node(np.asarray(data), (x,), backward)


# -- activations -----------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation.

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3))).
    The constants are fixed so outputs are bit-stable across platforms.
    """
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        local = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t**2) * du
        x._accumulate(g * local)

    return _node(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    s = s.astype(d.dtype)

    def backward(g):
        x._accumulate(g * s * (1.0 - s))

    return _node(s, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        x._accumulate(s * (g - dot))

    return _node(s, (x,), backward)


# -- shape manipulation ----------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(data, (x,), backward)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def backward(g):
        x._accumulate(g.transpose(inverse))

    return _node(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    _check_same_dtype(*tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ValueError(f"concat: rank mismatch {t.shape} vs {ref}")
        for ax in range(t.ndim):
            if ax != axis % t.ndim and t.shape[ax] != ref[ax]:
                raise ValueError(
                    f"concat: axis {ax} mismatch, {t.shape[ax]} vs {ref[ax]}"
                )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            t._accumulate(g[tuple(index)])

    return _node(data, tensors, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [..., M, K] @ [..., K, N]; leading dims must match."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: need at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading dims differ, {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner axis mismatch, {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(data, (a, b), backward)


# -- convolution -----------------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-d cross-correlation over [B, Cin, H, W] with grouped kernels.

    weight is [Cout, Cin/groups, kh, kw]; groups == Cin gives the
    depthwise case. Output extent follows
    H' = (H + 2*padding - kh) // stride + 1. Implemented as im2col plus
    one batched matmul per call; single-threaded deterministic.
    """
    parents = [x, weight] + ([bias] if bias is not None else [])
    _check_same_dtype(*parents)
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-d [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-d, got {weight.shape}")
    batch, cin, height, width = x.shape
    cout, cg, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if cin % groups != 0 or cout % groups != 0:
        raise ValueError(
            f"conv2d: channel axes not divisible by groups={groups} (Cin={cin}, Cout={cout})"
        )
    if cg != cin // groups:
        raise ValueError(
            f"conv2d: weight channel axis is {cg}, expected Cin/groups = {cin // groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias axis must be ({cout},), got {bias.shape}")
    out_h = (height + 2 * padding - kh) // stride + 1
    out_w = (width + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} with padding {padding} exceeds input {height}x{width}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(batch, cin, kh, kw, out_h, out_w),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    # [B, G, Cg*kh*kw, out_h*out_w]
    cols = windows.reshape(batch, groups, cg * kh * kw, out_h * out_w)
    w2 = weight.data.reshape(groups, cout // groups, cg * kh * kw)
    out = np.matmul(w2[None], cols).reshape(batch, cout, out_h, out_w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g4 = g.reshape(batch, groups, cout // groups, out_h * out_w)
        dw = np.matmul(g4, cols.transpose(0, 1, 3, 2)).sum(axis=0)
        weight._accumulate(dw.reshape(weight.shape))
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w2.transpose(0, 2, 1)[None], g4)
            dwin = dcols.reshape(batch, cin, kh, kw, out_h, out_w)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                row = slice(i, i + (out_h - 1) * stride + 1, stride)
                for j in range(kw):
                    col = slice(j, j + (out_w - 1) * stride + 1, stride)
                    dxp[:, :, row, col] += dwin[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    return _node(out, parents, backward)


# -- pooling ---------------------------------------------------------------


def _check_pool_args(x: Tensor, k: int, stride: int):
    if x.ndim != 4:
        raise ValueError(f"pool: input must be 4-d [B,C,H,W], got {x.shape}")
    if k != stride:
        raise ValueError(f"pool: only k == stride windows are supported, got k={k} stride={stride}")
    _, _, height, width = x.shape
    if height % stride != 0 or width % stride != 0:
        raise ValueError(
            f"pool: spatial extents {height}x{width} not divisible by stride {stride}"
        )


def avg_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping mean pooling; differentiable everywhere."""
    _check_pool_args(x, k, stride)
    batch, channels, height, width = x.shape
    oh, ow = height // k, width // k
    xr = x.data.reshape(batch, channels, oh, k, ow, k)
    out = xr.mean(axis=(3, 5))

    def backward(g):
        spread = np.broadcast_to(
            g[:, :, :, None, :, None] / (k * k), (batch, channels, oh, k, ow, k)
        )
        x._accumulate(spread.reshape(x.shape))

    return _node(out, (x,), backward)


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    The gradient routes to the window's argmax; ties break to the first
    element in row-major window order, so gradients are deterministic.
    """
    _check_pool_args(x, k, stride)
    batch, channels, height, width = x.shape
    oh, ow = height // k, width // k
    # [B, C, oh, ow, k*k] with the window flattened row-major
    flat = x.data.reshape(batch, channels, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    flat = flat.reshape(batch, channels, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(batch, channels, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
        x._accumulate(dx.reshape(x.shape))

    return _node(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C, 1, 1] spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: input must be 4-d, got {x.shape}")
    _, _, height, width = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        x._accumulate(np.broadcast_to(g / (height * width), x.shape))

    return _node(out, (x,), backward)


# -- bilinear upsampling ----------------------------------------------------


def _interp_axis(n_out: int, n_in: int):
    """Neighbour indices and fractions for align-corners=false sampling.

    Sample centers sit at (i + 0.5) * n_in / n_out - 0.5, clamped to the
    valid range so edges replicate.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    mat = np.zeros((n_out, n_in), dtype=dtype)
    lo, hi, frac = _interp_axis(n_out, n_in)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), (1.0 - frac).astype(dtype))
    np.add.at(mat, (rows, hi), frac.astype(dtype))
    return mat


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of [B, C, H, W] to (out_h, out_w).

    Uses the align-corners=false convention with edge clamping. The
    forward pass is lerp-form (lo + frac * (hi - lo)) so constant inputs
    come back bit-exact; the backward pass is the transposed linear map
    applied as two small matmuls.
    """
    if x.ndim != 4:
        raise ValueError(f"bilinear_upsample: input must be 4-d, got {x.shape}")
    _, _, height, width = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"bilinear_upsample: target {out_h}x{out_w} must be positive")
    if out_h < height or out_w < width:
        raise ValueError(
            f"bilinear_upsample: target {out_h}x{out_w} smaller than input {height}x{width}"
        )
    dtype = x.data.dtype
    lo_r, hi_r, frac_r = _interp_axis(out_h, height)
    lo_c, hi_c, frac_c = _interp_axis(out_w, width)
    wr = frac_r.astype(dtype)[None, None, :, None]
    wc = frac_c.astype(dtype)[None, None, None, :]
    low = x.data[:, :, lo_r, :]
    rows = low + wr * (x.data[:, :, hi_r, :] - low)
    left = rows[:, :, :, lo_c]
    out = left + wc * (rows[:, :, :, hi_c] - left)

    def backward(g):
        row_mat = _interp_matrix(out_h, height, dtype)
        col_mat = _interp_matrix(out_w, width, dtype)
        x._accumulate(np.matmul(np.matmul(row_mat.T, g), col_mat))

    return _node(out, (x,), backward)
