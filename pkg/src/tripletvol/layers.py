"""Differentiable layers: 3D convolution, instance norm, PReLU, dense, sigmoid.

The functional kernels (``conv3d``, ``instance_norm`` ...) each record a
single fused node on the tape. The ``Module`` classes below own parameters
and compose the kernels into the conv-block and residual-block units used by
the networks in :mod:`tripletvol.model`.
"""

from __future__ import annotations

import itertools
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, _result


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ShapeError(f"expected an int or 3 values, got {v!r}")
    return t  # type: ignore[return-value]


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


# ----------------------------------------------------------------------
# functional kernels


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlate ``x [b, c, D, H, W]`` with ``weight [o, c, kd, kh, kw]``."""
    if x.ndim != 5 or weight.ndim != 5:
        raise ShapeError(f"conv3d expects 5-D input and weight, got {x.shape} and {weight.shape}")
    s = _triple(stride)
    p = _triple(padding)
    if min(s) < 1 or min(p) < 0:
        raise ShapeError(f"invalid stride {s} or padding {p}")
    b, c = x.shape[:2]
    o, ci = weight.shape[:2]
    k = weight.shape[2:]
    if ci != c:
        raise ShapeError(f"conv3d channel mismatch: input has {c}, weight expects {ci}")
    out_ext = tuple(conv_output_extent(x.shape[2 + a], k[a], s[a], p[a]) for a in range(3))
    if min(out_ext) < 1:
        raise ShapeError(f"conv3d output extent {out_ext} is not positive for input {x.shape[2:]}")

    xp = x.data
    if any(p):
        xp = np.pad(xp, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))
    win = sliding_window_view(xp, k, axis=(2, 3, 4))
    win = win[:, :, :: s[0], :: s[1], :: s[2]][:, :, : out_ext[0], : out_ext[1], : out_ext[2]]
    out = np.tensordot(win, weight.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1, 1)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        gx = None
        if x.requires_grad:
            # cols: [b, c, kd, kh, kw, Do, Ho, Wo]
            cols = np.tensordot(weight.data, g, axes=([0], [1])).transpose(4, 0, 1, 2, 3, 5, 6, 7)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span = [s[a] * (out_ext[a] - 1) + 1 for a in range(3)]
            for i, j, l in itertools.product(range(k[0]), range(k[1]), range(k[2])):
                gxp[:, :, i : i + span[0] : s[0], j : j + span[1] : s[1], l : l + span[2] : s[2]] += cols[:, :, i, j, l]
            D, H, W = x.shape[2:]
            gx = gxp[:, :, p[0] : p[0] + D, p[1] : p[1] + H, p[2] : p[2] + W]
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn, "conv3d")


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise every (sample, channel) over its spatial voxels, then scale/shift."""
    if eps <= 0:
        raise ContractError("instance_norm epsilon must be positive")
    if x.ndim < 3:
        raise ShapeError(f"instance_norm expects [b, c, ...spatial], got {x.shape}")
    axes = tuple(range(2, x.ndim))
    n = int(np.prod(x.shape[2:]))
    if n < 2:
        raise ContractError(f"instance_norm needs at least 2 spatial voxels, got spatial shape {x.shape[2:]}")
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std
    gm = gamma.data.reshape(bshape)
    out = gm * xhat + beta.data.reshape(bshape)

    def grad_fn(g):
        red = (0,) + axes
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gx = None
        if x.requires_grad:
            dxhat = g * gm
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        return (gx, ggamma, gbeta)

    return _result(out, (x, gamma, beta), grad_fn, "instance_norm")


def prelu(x: Tensor, slope) -> Tensor:
    """``x`` where non-negative, ``slope[channel] * x`` elsewhere (channel axis 1)."""
    slope_t = slope if isinstance(slope, Tensor) else Tensor(np.asarray(slope, dtype=x.dtype))
    bshape = (1, -1) + (1,) * (x.ndim - 2) if x.ndim > 1 else (-1,)
    a = slope_t.data.reshape(bshape)
    neg = x.data < 0
    out = np.where(neg, a * x.data, x.data)

    def grad_fn(g):
        gx = np.where(neg, a * g, g)
        red = tuple(i for i in range(x.ndim) if i != (1 if x.ndim > 1 else 0))
        gs = (g * x.data * neg).sum(axis=red).reshape(slope_t.shape)
        return (gx, gs)

    return _result(out, (x, slope_t), grad_fn, "prelu")


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x [b, in]`` and ``weight [out, in]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: cannot apply weight {weight.shape} to input {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return (gx, g.T @ x.data, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, grad_fn, "dense")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large ``|x|``."""
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ----------------------------------------------------------------------
# parameter containers


class Parameter(Tensor):
    """A trainable leaf tensor. Frozen parameters stop requiring grad."""

    __slots__ = ("frozen",)

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)
        self.frozen = False


class Module:
    """Minimal parameter-owning callable.

    Parameters are discovered from instance attributes: ``Parameter`` values,
    nested ``Module`` values, and lists of modules, in assignment order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.frozen = False
            p.requires_grad = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv3d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride=1, padding=None,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        k = _triple(kernel)
        if min(k) < 1:
            raise ShapeError("kernel size must be at least 1")
        self.stride = _triple(stride)
        self.padding = _triple(padding if padding is not None else tuple(kk // 2 for kk in k))
        fan_in = in_ch * k[0] * k[1] * k[2]
        self.weight = Parameter(_uniform(rng, (out_ch, in_ch) + k, fan_in, dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        k = self.weight.shape[2:]
        return tuple(conv_output_extent(spatial[a], k[a], self.stride[a], self.padding[a]) for a in range(3))  # type: ignore[return-value]


class InstanceNorm3d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, self.eps)


class PReLU(Module):
    """Per-channel leaky rectifier; ``learnable=False`` keeps the slope constant."""

    def __init__(self, channels: int, init: float = 0.25, learnable: bool = True, dtype=np.float32):
        slope = np.full(channels, init, dtype=dtype)
        if learnable:
            self.slope = Parameter(slope)
        else:
            self.fixed_slope = slope

    def forward(self, x: Tensor) -> Tensor:
        slope = getattr(self, "slope", None)
        return prelu(x, slope if slope is not None else self.fixed_slope)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv3d -> instance norm -> PReLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.conv = Conv3d(in_ch, out_ch, 3, stride, 1, rng=rng, dtype=dtype)
        self.norm = InstanceNorm3d(out_ch, dtype=dtype)
        self.act = PReLU(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(Module):
    """Three conv blocks on the main path plus a 1x1x1 projection on the skip path.

    Downsampling (``stride``) happens in the first conv block and in the
    projection, so both paths land on the same grid.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 2,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        self.stride = stride
        self.main = [
            ConvBlock(in_ch, out_ch, stride, rng=rng, dtype=dtype),
            ConvBlock(out_ch, out_ch, 1, rng=rng, dtype=dtype),
            ConvBlock(out_ch, out_ch, 1, rng=rng, dtype=dtype),
        ]
        self.skip = Conv3d(in_ch, out_ch, 1, stride, 0, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for block in self.main:
            h = block(h)
        s = self.skip(x)
        if h.shape != s.shape:
            raise ConfigError(f"residual paths disagree: main {h.shape} vs skip {s.shape}")
        return h + s

    def output_spatial(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        return self.skip.output_shape(spatial)


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    return block(x)
