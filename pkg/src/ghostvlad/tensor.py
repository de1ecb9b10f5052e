"""Dense tensors with reverse-mode gradients.

A small autograd core: a Tensor wraps a numpy array, ops build a graph of
backward closures, and ``Tensor.backward`` replays them in reverse
topological order. Only the operations the pipeline needs are provided
(convolution with stride/padding/dilation/groups, batch normalization,
ReLU, pooling, softmax, L2 normalization, and a handful of structural
ops), each with an analytic backward that ``grad_check`` can verify
against central finite differences in double precision.

Convolution is cross-correlation (no kernel flip), the usual deep
learning convention. Production paths run in single precision; gradient
checks run the same code in double precision.

Tensors are treated as immutable once an op has produced them; gradient
accumulation writes only to ``.grad`` and optimizers update leaf
parameters in place under single-writer discipline.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "ConvSpec",
    "BatchNormState",
    "conv2d",
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm2d",
    "relu",
    "hard_sigmoid",
    "global_avg_pool",
    "softmax_rows",
    "l2_normalize",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "tsum",
    "tmean",
    "amin_first",
    "grad_check",
]

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus an optional gradient buffer and graph links."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate gradients of this tensor into every graph leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.data.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}")

        topo = []
        seen = set()
        stack_ = [self]
        while stack_:
            node = stack_[-1]
            if id(node) in seen:
                stack_.pop()
                continue
            pending = [p for p in node._parents if id(p) not in seen]
            if pending:
                stack_.extend(pending)
            else:
                seen.add(id(node))
                topo.append(node)
                stack_.pop()

        _accum(self, grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return _add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return _add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return _add(self, _neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return _add(_wrap(other, self.dtype), _neg(self))

    def __neg__(self):
        return _neg(self)

    def __mul__(self, other):
        return _mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return _mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return _div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return _div(_wrap(other, self.dtype), self)

    def __pow__(self, p):
        return _pow(self, p)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))

    def __getitem__(self, key):
        return _getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _make(data, parents, backward):
    """Build an op result, attaching the graph only when grad is live."""
    track = _grad_enabled and any(p.requires_grad or p._parents for p in parents)
    if track:
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a: Tensor, b: Tensor, out: np.ndarray, da: Callable, db: Callable) -> Tensor:
    def backward(g):
        if a.requires_grad or a._parents:
            _accum(a, _unbroadcast(da(g), a.data.shape))
        if b.requires_grad or b._parents:
            _accum(b, _unbroadcast(db(g), b.data.shape))

    return _make(out, (a, b), backward)


def _add(a, b):
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def _mul(a, b):
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def _div(a, b):
    out = a.data / b.data
    return _binary(a, b, out, lambda g: g / b.data, lambda g: -g * out / b.data)


def _neg(a):
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def _pow(a, p):
    p = float(p)
    out = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _make(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy stacking semantics (inputs of rank >= 2)."""
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: _accum(a, g.reshape(a.data.shape)))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = a.data.transpose(axes)
    if axes is None:
        inverse = None
    else:
        inverse = tuple(np.argsort(axes))
    return _make(out, (a,), lambda g: _accum(a, g.transpose(inverse)))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accum(t, g[tuple(index)])

    return _make(out, tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        slabs = np.moveaxis(g, axis, 0)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad or t._parents:
                _accum(t, np.asarray(slab))

    return _make(out, tuple(tensors), backward)


def _getitem(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        _accum(a, ga)

    return _make(out, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True))
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=True))

    return _make(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def amin_first(a: Tensor, axis=None) -> Tensor:
    """Minimum whose subgradient flows to the first attaining element.

    Ties resolve to the lowest flat (or along-axis) index, which keeps
    reductions deterministic.
    """
    if axis is None:
        idx = int(np.argmin(a.data))
        out = a.data.reshape(-1)[idx]

        def backward(g):
            ga = np.zeros_like(a.data)
            ga.reshape(-1)[idx] = g
            _accum(a, ga)

        return _make(np.asarray(out), (a,), backward)

    idx = np.argmin(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        _accum(a, ga)

    return _make(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); backward passes upstream only where x > 0."""
    mask = a.data > 0
    out = np.where(mask, a.data, 0)
    return _make(out, (a,), lambda g: _accum(a, g * mask))


def hard_sigmoid(a: Tensor) -> Tensor:
    """clip(x/6 + 0.5, 0, 1) with the straight-through slope 1/6 inside the clip."""
    out = np.clip(a.data / 6.0 + 0.5, 0.0, 1.0)
    mask = (a.data > -3.0) & (a.data < 3.0)

    def backward(g):
        _accum(a, g * mask / 6.0)

    return _make(out.astype(a.data.dtype), (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """Per-channel spatial mean of an (N, C, H, W) tensor, kept as (N, C, 1, 1)."""
    if a.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-D tensor, got shape {a.shape}")
    n, c, h, w = a.shape
    out = a.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        _accum(a, np.broadcast_to(g / (h * w), a.data.shape).astype(a.data.dtype, copy=True))

    return _make(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax along the last axis with max subtraction for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, out * (g - dot))

    return _make(out, (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along ``axis``.

    The epsilon guard makes near-zero slices map smoothly to (almost)
    zero instead of dividing by zero; its backward is the plain 1/eps
    scaling on guarded slices, so gradients stay finite everywhere.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom
    guarded = norm < eps

    def backward(g):
        dot = (g * a.data).sum(axis=axis, keepdims=True)
        free = g / denom - a.data * dot / (denom * denom * denom)
        ga = np.where(guarded, g / eps, free)
        _accum(a, ga.astype(a.data.dtype, copy=False))

    return _make(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvSpec:
    """Geometry of a 2-D convolution.

    kernel/stride/padding/dilation accept a single int or an (h, w) pair;
    they are normalized to pairs. Validation enforces channel/group
    divisibility and positive output sizes via ``out_shape``.
    """

    in_channels: int
    out_channels: int
    kernel: tuple = (1, 1)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)
    groups: int = 1

    def __post_init__(self):
        self.kernel = _pair(self.kernel)
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        self.dilation = _pair(self.dilation)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError("kernel, stride and dilation must be >= 1")
        if min(self.padding) < 0:
            raise ValueError("padding must be >= 0")

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def out_shape(self, h: int, w: int):
        """Output spatial size; raises if any extent would be < 1."""
        oh = (h + 2 * self.padding[0] - self.dilation[0] * (self.kernel[0] - 1) - 1) // self.stride[0] + 1
        ow = (w + 2 * self.padding[1] - self.dilation[1] * (self.kernel[1] - 1) - 1) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"non-positive output size {oh}x{ow} for input {h}x{w} with {self}")
        return oh, ow


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an (h, w) pair, got {v!r}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


def _pad_input(x: np.ndarray, padding) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _windows(xp: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided (N, C, Ho, Wo, kh, kw) view over the padded input."""
    kh, kw = spec.kernel
    rh, rw = spec.dilation
    sh, sw = spec.stride
    eh = (kh - 1) * rh + 1
    ew = (kw - 1) * rw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (eh, ew), axis=(2, 3))
    return win[:, :, ::sh, ::sw, ::rh, ::rw]


def _group_cols(win: np.ndarray, groups: int) -> np.ndarray:
    """Reorder windows to (groups, N*Ho*Wo, (C/g)*kh*kw) matmul layout."""
    n, c, ho, wo, kh, kw = win.shape
    cg = c // groups
    win = win.reshape(n, groups, cg, ho, wo, kh, kw)
    win = win.transpose(1, 0, 3, 4, 2, 5, 6)
    return win.reshape(groups, n * ho * wo, cg * kh * kw)


def _check_conv_args(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec):
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ValueError(f"weight shape {w.shape} does not match spec {spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {b.shape} must be ({spec.out_channels},)")
    spec.out_shape(x.shape[2], x.shape[3])


def conv2d_forward(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec) -> np.ndarray:
    """Grouped, strided, dilated cross-correlation on plain arrays.

    Shapes: x (N, C, H, W), w (out, C/groups, kh, kw), b (out,) or None.
    Returns (N, out, Ho, Wo) with Ho, Wo from ``spec.out_shape``.
    """
    _check_conv_args(x, w, b, spec)
    n = x.shape[0]
    ho, wo = spec.out_shape(x.shape[2], x.shape[3])
    g = spec.groups
    og = spec.out_channels // g

    xp = _pad_input(x, spec.padding)
    cols = _group_cols(_windows(xp, spec), g)
    wmat = w.reshape(g, og, -1)
    out = cols @ wmat.transpose(0, 2, 1)
    out = out.reshape(g, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, spec.out_channels, ho, wo)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(upstream: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec, with_bias: bool = True):
    """Exact gradients of ``conv2d_forward``.

    Returns (grad_x, grad_w, grad_b); grad_b is None when with_bias is
    False. ``upstream`` must have the forward output's shape.
    """
    _check_conv_args(x, w, None, spec)
    n, c = x.shape[0], x.shape[1]
    h, wid = x.shape[2], x.shape[3]
    ho, wo = spec.out_shape(h, wid)
    if upstream.shape != (n, spec.out_channels, ho, wo):
        raise ValueError(f"upstream shape {upstream.shape} does not match output {(n, spec.out_channels, ho, wo)}")
    g = spec.groups
    og = spec.out_channels // g
    cg = c // g
    kh, kw = spec.kernel
    rh, rw = spec.dilation
    sh, sw = spec.stride
    ph, pw = spec.padding

    xp = _pad_input(x, spec.padding)
    cols = _group_cols(_windows(xp, spec), g)
    up = upstream.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)

    grad_w = (up.transpose(0, 2, 1) @ cols).reshape(g * og, cg, kh, kw)

    gxp = np.zeros_like(xp)
    wtap = w.reshape(g, og, cg, kh, kw)
    for i in range(kh):
        for j in range(kw):
            t = up @ wtap[:, :, :, i, j]
            t = t.reshape(g, n, ho, wo, cg).transpose(1, 0, 4, 2, 3).reshape(n, c, ho, wo)
            hs = i * rh
            ws = j * rw
            gxp[:, :, hs : hs + (ho - 1) * sh + 1 : sh, ws : ws + (wo - 1) * sw + 1 : sw] += t
    grad_x = gxp[:, :, ph : ph + h, pw : pw + wid] if (ph or pw) else gxp
    grad_b = upstream.sum(axis=(0, 2, 3)) if with_bias else None
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def conv2d(x: Tensor, weight: Tensor, bias, spec: ConvSpec) -> Tensor:
    """Autograd convolution wrapping the forward/backward array pair."""
    b = bias.data if bias is not None else None
    out = conv2d_forward(x.data, weight.data, b, spec)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        need_x = x.requires_grad or x._parents
        gx, gw, gb = conv2d_backward(g, x.data, weight.data, spec, with_bias=bias is not None)
        if need_x:
            _accum(x, gx)
        if weight.requires_grad or weight._parents:
            _accum(weight, gw)
        if bias is not None and (bias.requires_grad or bias._parents):
            _accum(bias, gb)

    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")

    @classmethod
    def create(cls, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.data.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over (N, H, W) per channel, with affine transform.

    Training mode normalizes with biased batch statistics and folds them
    into the running estimates; inference mode normalizes with the
    running estimates alone.
    """
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d expects a 4-D tensor, got shape {x.shape}")
    if x.shape[1] != state.channels:
        raise ValueError(f"input has {x.shape[1]} channels, state has {state.channels}")
    gamma, beta = state.gamma, state.beta
    gshaped = gamma.data.reshape(1, -1, 1, 1)

    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = ((1 - state.momentum) * state.running_mean + state.momentum * mean).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1 - state.momentum) * state.running_var + state.momentum * var).astype(
            state.running_var.dtype
        )
        ivar = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean.reshape(1, -1, 1, 1)) * ivar.reshape(1, -1, 1, 1)
        out = gshaped * xhat + beta.data.reshape(1, -1, 1, 1)

        def backward(g):
            gxhat = g * gshaped
            if x.requires_grad or x._parents:
                sum_gxhat = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                sum_gxhat_xhat = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (gxhat - sum_gxhat / m - xhat * sum_gxhat_xhat / m) * ivar.reshape(1, -1, 1, 1)
                _accum(x, gx.astype(x.data.dtype, copy=False))
            if gamma.requires_grad or gamma._parents:
                _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad or beta._parents:
                _accum(beta, g.sum(axis=(0, 2, 3)))

        return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward)

    ivar = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(1, -1, 1, 1)) * ivar.reshape(1, -1, 1, 1)
    out = gshaped * xhat + beta.data.reshape(1, -1, 1, 1)

    def backward_eval(g):
        if x.requires_grad or x._parents:
            _accum(x, (g * gshaped * ivar.reshape(1, -1, 1, 1)).astype(x.data.dtype, copy=False))
        if gamma.requires_grad or gamma._parents:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad or beta._parents:
            _accum(beta, g.sum(axis=(0, 2, 3)))

    return _make(out.astype(x.data.dtype, copy=False), (x, gamma, beta), backward_eval)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn: Callable[..., Tensor], inputs: Iterable, eps: float = 1e-4, seed: int = 0) -> float:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to a Tensor; its output is reduced to a scalar by
    a fixed random projection so one backward pass covers all outputs.
    Inputs are promoted to float64. Returns the maximum relative error
    over all input elements, where an element's error is
    |a - n| / max(|a|, |n|). Entries with both magnitudes below 1e-5
    count as zero: a central difference at this step size carries about
    1e-9 of absolute noise, so gradients that small cannot be resolved
    to any useful relative precision.
    """
    tensors = [Tensor(np.array(getattr(a, "data", a), dtype=np.float64), requires_grad=True) for a in inputs]
    out = fn(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    scalar = (out * Tensor(proj)).sum()
    scalar.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def evaluate() -> float:
        with no_grad():
            return float((fn(*tensors).data * proj).sum())

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = ana.reshape(-1)[i]
            if abs(a) < 1e-5 and abs(num) < 1e-5:
                continue
            worst = max(worst, abs(a - num) / max(abs(a), abs(num)))
    return worst
