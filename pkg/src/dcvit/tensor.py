"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed graph engine: every op returns a new Tensor that
remembers its parents and a closure propagating the output gradient back
to them. ``Tensor.backward()`` on a scalar walks the graph in reverse
topological order. Gradients accumulate across repeated backward calls;
call ``zero_grad`` explicitly between optimization steps.

Convolution follows the cross-correlation convention (no kernel flip).
float64 is used for gradient-checking / oracle work, float32 for training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Conv2dSpec",
    "conv2d",
    "conv2d_output_hw",
    "linear",
    "layer_norm",
    "softmax",
    "gelu",
    "dropout",
    "concat",
    "finite_diff_grad",
]

ArrayLike = Union[np.ndarray, float, int, list, tuple]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense n-d array with an optional gradient buffer.

    ``data`` is always a contiguous numpy array (float32 or float64).
    ``grad`` stays None until backward reaches this tensor; it then has
    the same shape and dtype as ``data`` and accumulates across calls.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return (f"Tensor(shape={self.shape}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ------------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Only valid on scalars (size-1 tensors). Repeated calls accumulate.
        """
        if self.size != 1:
            raise ValueError(
                f"backward() requires a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        # seed with dLoss/dLoss = 1 and walk in reverse topological order
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad and parent._backward is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] += pg
                else:
                    grads[id(parent)] = pg

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def sqrt(self) -> "Tensor":
        return power(self, 0.5)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple:
    """Coerce mixed Tensor/array operands, casting scalars to the tensor dtype."""
    if isinstance(a, Tensor):
        return a, _as_tensor(b, like=a)
    if isinstance(b, Tensor):
        return _as_tensor(a, like=b), b
    return _as_tensor(a), _as_tensor(b)


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Optional[Callable]) -> Tensor:
    out = Tensor(data)
    # prune the graph when nothing upstream needs gradients
    if any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(g, b.shape)))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data - b.data

    def backward(g):
        return ((a, _sum_to_shape(g, a.shape)), (b, _sum_to_shape(-g, b.shape)))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        return ((a, _sum_to_shape(g * b.data, a.shape)),
                (b, _sum_to_shape(g * a.data, b.shape)))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        return ((a, _sum_to_shape(g / b.data, a.shape)),
                (b, _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)))

    return _make(out_data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data ** p

    def backward(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        return ((a, g * out_data),)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        return ((a, g / a.data),)

    return _make(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _pair(a, b)
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _make(out_data, (a, b), backward)


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    old_shape = a.shape
    out_data = a.data.reshape(shape)

    def backward(g):
        return ((a, g.reshape(old_shape)),)

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes: Optional[tuple]) -> Tensor:
    a = _as_tensor(a)
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def backward(g):
        return ((a, np.transpose(g, inv)),)

    return _make(out_data, (a,), backward)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out_data = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def backward(g):
        return ((a, _sum_to_shape(g, a.shape)),)

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return tuple(pieces)

    return _make(out_data, tuple(tensors), backward)


def getitem(a: Tensor, idx) -> Tensor:
    a = _as_tensor(a)
    out_data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        return ((a, buf),)

    return _make(out_data, (a,), backward)


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape) / count),)

    return _make(out_data, (a,), backward)


# -- neural ops ---------------------------------------------------------------

@dataclass(frozen=True)
class Conv2dSpec:
    """Geometry of a (possibly grouped) 2-D cross-correlation."""

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0 or self.groups <= 0:
            raise ValueError("channel/group counts must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels="
                f"{self.in_channels} and out_channels={self.out_channels}")
        for name in ("kernel", "stride"):
            kh, kw = getattr(self, name)
            if kh <= 0 or kw <= 0:
                raise ValueError(f"{name} entries must be positive")
        ph, pw = self.padding
        if ph < 0 or pw < 0:
            raise ValueError("padding must be nonnegative")

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels

    def output_hw(self, h: int, w: int) -> tuple:
        return conv2d_output_hw((h, w), self.kernel, self.stride, self.padding)


def conv2d_output_hw(hw: tuple, kernel: tuple, stride: tuple,
                     padding: tuple) -> tuple:
    """Closed-form output size: floor((N + 2p - k) / s) + 1 per axis."""
    out = []
    for n, k, s, p in zip(hw, kernel, stride, padding):
        o = (n + 2 * p - k) // s + 1
        if o < 1:
            raise ValueError(
                f"non-positive conv output size {o} for input {n}, "
                f"kernel {k}, stride {s}, padding {p}")
        out.append(o)
    return tuple(out)


def _conv_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                  hout: int, wout: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, srow, scol = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, hout, wout, kh, kw),
        strides=(sb, sc, srow * sh, scol * sw, srow, scol),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor],
           spec: Conv2dSpec) -> Tensor:
    """Grouped 2-D cross-correlation over [B, Cin, H, W] input.

    ``weight`` is [Cout, Cin/groups, kh, kw]; gradient flows to input,
    weight and bias.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d, got shape {x.shape}")
    b, cin, h, w = x.shape
    kh, kw = spec.kernel
    sh, sw = spec.stride
    ph, pw = spec.padding
    g = spec.groups
    cin_g = spec.in_channels // g
    cout_g = spec.out_channels // g
    if cin != spec.in_channels:
        raise ValueError(
            f"input has {cin} channels, spec expects {spec.in_channels}")
    if weight.shape != (spec.out_channels, cin_g, kh, kw):
        raise ValueError(
            f"weight shape {weight.shape} does not match spec "
            f"{(spec.out_channels, cin_g, kh, kw)}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    hout, wout = conv2d_output_hw((h, w), spec.kernel, spec.stride, spec.padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = _conv_windows(xp, kh, kw, sh, sw, hout, wout)
    wg = windows.reshape(b, g, cin_g, hout, wout, kh, kw)
    kern = weight.data.reshape(g, cout_g, cin_g, kh, kw)
    out_data = np.einsum("bgihwkl,goikl->bgohw", wg, kern, optimize=True)
    out_data = np.ascontiguousarray(out_data.reshape(b, spec.out_channels, hout, wout))
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    def backward(grad):
        gout = grad.reshape(b, g, cout_g, hout, wout)
        grads = []
        if x.requires_grad or x._backward is not None:
            gxp = np.zeros_like(xp)
            gxp_g = gxp.reshape(b, g, cin_g, *gxp.shape[2:])
            for ki in range(kh):
                row_stop = ki + sh * (hout - 1) + 1
                for kj in range(kw):
                    col_stop = kj + sw * (wout - 1) + 1
                    contrib = np.einsum("bgohw,goi->bgihw", gout,
                                        kern[:, :, :, ki, kj], optimize=True)
                    gxp_g[:, :, :, ki:row_stop:sh, kj:col_stop:sw] += contrib
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
            grads.append((x, np.ascontiguousarray(gx)))
        if weight.requires_grad or weight._backward is not None:
            gw = np.einsum("bgihwkl,bgohw->goikl", wg, gout, optimize=True)
            grads.append((weight, gw.reshape(weight.shape)))
        if bias is not None and (bias.requires_grad or bias._backward is not None):
            grads.append((bias, grad.sum(axis=(0, 2, 3))))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x @ weight.T + bias.

    ``weight`` is [Dout, Din]; leading dims of ``x`` are preserved.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear: input last dim {x.shape[-1]} != weight Din {weight.shape[1]}")
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to mean 0 / variance 1, then affine."""
    x = _as_tensor(x)
    gain = _as_tensor(gain)
    offset = _as_tensor(offset)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if d == 0:
        raise ValueError("zero-length normalization axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_sigma
    out_data = xhat * gain.data + offset.data

    def backward(g):
        grads = []
        if x.requires_grad or x._backward is not None:
            gxhat = g * gain.data
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            grads.append((x, inv_sigma * (gxhat - m1 - xhat * m2)))
        if gain.requires_grad or gain._backward is not None:
            axes = tuple(range(g.ndim - 1))
            grads.append((gain, _sum_to_shape((g * xhat).sum(axis=axes), gain.shape)))
        if offset.requires_grad or offset._backward is not None:
            axes = tuple(range(g.ndim - 1))
            grads.append((offset, _sum_to_shape(g.sum(axis=axes), offset.shape)))
        return tuple(grads)

    return _make(out_data, (x, gain, offset), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax; output sums to 1 along ``axis``."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((x, out_data * (g - dot)),)

    return _make(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return ((x, g * (cdf + x.data * pdf)),)

    return _make(out_data, (x,), backward)


def dropout(x: Tensor, p: float, training: bool,
            seed: Union[int, np.random.Generator, None] = None) -> Tensor:
    """Inverted dropout: train-time survivors scale by 1/(1-p), eval is identity.

    The mask is a pure function of the seed (or supplied generator state).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * scale
    out_data = x.data * mask

    def backward(g):
        return ((x, g * mask),)

    return _make(out_data, (x,), backward)


# -- gradient oracle ----------------------------------------------------------

def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f / d x, elementwise.

    ``f`` must return a finite scalar at every probe point x +/- h*e_i.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = x.data.copy()
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base.copy())))
        flat[i] = orig - h
        fm = float(f(Tensor(base.copy())))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(
                f"non-finite objective at probe index {i}: f+={fp} f-={fm}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return out
