"""Parameterised layers built on :mod:`denseswin.tensor`.

Convolution is cross-correlation (no kernel flip) with zero padding. Heavy
layers (conv, linear, the norms) are fused ops with hand-written backward
rules; everything else is composed from tensor ops.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor, make_op

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5


class Parameter(Tensor):
    """A trainable leaf tensor. Its buffer is mutated only by optimizers."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.data.flags.writeable = True

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=self.dtype)
        if values.shape != self.shape:
            raise DimensionError(f"assign: {values.shape} into parameter of shape {self.shape}")
        self.data[...] = values


class ParamRegistry(OrderedDict):
    """Ordered ``dotted.name -> Parameter`` map with unique names."""

    def __setitem__(self, key, value):
        if key in self:
            raise ContractError(f"duplicate parameter name {key!r}")
        super().__setitem__(key, value)

    def count(self) -> int:
        return int(sum(p.size for p in self.values()))


# ---------------------------------------------------------------------------
# initialisers
# ---------------------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def he_normal(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# ---------------------------------------------------------------------------
# Module plumbing
# ---------------------------------------------------------------------------


class Module:
    """Minimal container: parameters, buffers and child modules by attribute.

    Attribute insertion order defines registry order, so parameter names and
    their iteration order depend only on how a model is constructed.
    """

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if name == "buffers" and isinstance(value, dict):
                for bname, arr in value.items():
                    yield f"{prefix}{bname}", arr
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def registry(self) -> ParamRegistry:
        reg = ParamRegistry()
        for name, p in self.named_parameters():
            reg[name] = p
        return reg

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def to_dtype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used for float64 checks)."""
        dtype = np.dtype(dtype)
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, Parameter):
                    setattr(m, name, Parameter(value.data.astype(dtype)))
                elif isinstance(value, list):
                    for i, item in enumerate(value):
                        if isinstance(item, Parameter):
                            value[i] = Parameter(item.data.astype(dtype))
                elif name == "buffers" and isinstance(value, dict):
                    for k in value:
                        value[k] = value[k].astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, ho, wo) -> np.ndarray:
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``x[B, C, H, W]`` with ``weight[O, C/groups, kH, kW]``."""
    T._same_dtype(x, weight, *([bias] if bias is not None else []))
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise DimensionError(f"conv2d: channels {c}->{o} not divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"conv2d: weight expects {cg * groups} input channels, got {c}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    og = o // groups
    depthwise = cg == 1 and og == 1

    if depthwise:
        out = np.zeros((b, c, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += wd[None, :, 0, i, j, None, None] * xp[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ]
        cols = None
    else:
        cols = _im2col(xp, kh, kw, stride, ho, wo).reshape(b, groups, cg * kh * kw, ho * wo)
        wm = wd.reshape(groups, og, cg * kh * kw)
        out = np.matmul(wm[None], cols).reshape(b, o, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = gw = None
        if depthwise:
            if weight.requires_grad:
                gw = np.empty_like(wd)
                for i in range(kh):
                    for j in range(kw):
                        sl = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                        gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, sl)
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            g * wd[None, :, 0, i, j, None, None]
                        )
                gx = gxp
        else:
            gm = g.reshape(b, groups, og, ho * wo)
            if weight.requires_grad:
                gw = np.matmul(gm, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                wm_ = wd.reshape(groups, og, cg * kh * kw)
                gcols = np.matmul(np.swapaxes(wm_, -1, -2)[None], gm)
                gcols = gcols.reshape(b, c, kh, kw, ho, wo)
                gx = _col2im(gcols, xp.shape, kh, kw, stride, ho, wo)
        if gx is not None and padding:
            gx = gx[:, :, padding : padding + h, padding : padding + w]
        if gx is not None:
            gx = np.ascontiguousarray(gx)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, inputs, bw)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=True, rng=None):
        if in_ch % groups or out_ch % groups:
            raise DimensionError(f"Conv2d: {in_ch}->{out_ch} not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch // groups, kernel, kernel)), dtype=np.float32)
        self.bias = Parameter(np.zeros(out_ch), dtype=np.float32) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def out_shape(self, shape):
        b, c, h, w = shape
        if c != self.in_ch:
            raise DimensionError(f"Conv2d expects {self.in_ch} channels, got {c}")
        return (
            b,
            self.out_ch,
            conv_output_size(h, self.kernel, self.stride, self.padding),
            conv_output_size(w, self.kernel, self.stride, self.padding),
        )

    def macs(self, shape) -> int:
        b, o, ho, wo = self.out_shape(shape)
        return b * o * ho * wo * (self.in_ch // self.groups) * self.kernel * self.kernel


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x[..., in]``."""
    T._same_dtype(x, weight, *([bias] if bias is not None else []))
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, wd.shape[0])

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, inputs, bw)


class Linear(Module):
    def __init__(self, in_f, out_f, bias=True, rng=None, std=0.02):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_f, self.out_f = in_f, out_f
        self.weight = Parameter(trunc_normal(rng, (out_f, in_f), std), dtype=np.float32)
        self.bias = Parameter(np.zeros(out_f), dtype=np.float32) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def macs(self, n_rows: int) -> int:
        return n_rows * self.in_f * self.out_f


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then ``gamma * x_hat + beta``."""
    T._same_dtype(x, gamma, beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: last axis {c} vs gamma {gamma.shape}")
    xd = x.data
    # statistics in float64 so near-constant float32 rows keep a zero mean
    xc = xd.astype(np.float64)
    xc -= xc.mean(axis=-1, keepdims=True)
    inv64 = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = (xc * inv64).astype(xd.dtype)
    inv = inv64.astype(xd.dtype)
    out = xhat * gamma.data + beta.data

    def bw(g):
        red = tuple(range(xd.ndim - 1))
        gg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gbeta

    return make_op(out, (x, gamma, beta), bw)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LN_EPS):
        self.dim, self.eps = dim, eps
        self.weight = Parameter(np.ones(dim), dtype=np.float32)
        self.bias = Parameter(np.zeros(dim), dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


def layer_norm_channels(x: Tensor, norm: LayerNorm) -> Tensor:
    """LayerNorm over the channel axis of ``[B, C, H, W]`` at every location."""
    y = norm(T.transpose(x, (0, 2, 3, 1)))
    return T.transpose(y, (0, 3, 1, 2))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch norm over ``(B, H, W)`` of ``x[B, C, H, W]``.

    In training mode the running statistics are updated in place:
    ``r <- (1 - momentum) r + momentum * batch_stat`` (unbiased variance).
    """
    T._same_dtype(x, gamma, beta)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    if b == 0:
        raise ContractError("batch_norm on an empty batch")
    if gamma.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels vs gamma {gamma.shape}")
    xd = x.data
    dt = xd.dtype.type
    if training:
        n = b * h * w
        mu = xd.mean(axis=(0, 2, 3))
        xc = xd - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        unbiased = var * n / max(n - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
        xc = xd - mu[None, :, None, None]
    inv = (1.0 / np.sqrt(var + dt(eps))).astype(xd.dtype)
    xhat = xc * inv[None, :, None, None]
    gd, bd = gamma.data, beta.data
    out = xhat * gd[None, :, None, None] + bd[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd[None, :, None, None]
            if training:
                gx = inv[None, :, None, None] * (
                    gh
                    - gh.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gh * inv[None, :, None, None]
        return gx, gg, gbeta

    return make_op(out, (x, gamma, beta), bw)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.weight = Parameter(np.ones(channels), dtype=np.float32)
        self.bias = Parameter(np.zeros(channels), dtype=np.float32)
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=np.float32),
            "running_var": np.ones(channels, dtype=np.float32),
        }

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.weight,
            self.bias,
            self.buffers["running_mean"],
            self.buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )


# ---------------------------------------------------------------------------
# pooling, dropout, gating
# ---------------------------------------------------------------------------


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    if stride != k:
        raise ContractError("avg_pool2d supports only kernel == stride")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    if k == 1:
        return make_op(x.data.copy(), (x,), lambda g: (g,))
    out = x.data.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (k * k))

    def bw(g):
        ge = np.broadcast_to(g[:, :, :, None, :, None] * inv, (b, c, h // k, k, w // k, k))
        return (ge.reshape(b, c, h, w).copy(),)

    return make_op(out, (x,), bw)


def _adaptive_bins(n: int, g: int) -> list[tuple[int, int]]:
    return [((i * n) // g, -((-(i + 1) * n) // g)) for i in range(g)]


def adaptive_avg_pool2d(x: Tensor, out_size: int) -> Tensor:
    """Average over ``floor(i n / g) .. ceil((i + 1) n / g)`` bins per axis."""
    b, c, h, w = x.shape
    if out_size < 1:
        raise DimensionError("adaptive_avg_pool2d: output size must be positive")
    if h == w and h % out_size == 0:
        return avg_pool2d(x, h // out_size)
    return _adaptive_general(x, out_size)


def _adaptive_general(x: Tensor, g: int) -> Tensor:
    b, c, h, w = x.shape
    rows, cols = _adaptive_bins(h, g), _adaptive_bins(w, g)
    xd = x.data
    out = np.empty((b, c, g, g), dtype=xd.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = xd[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(gr):
        gx = np.zeros_like(xd)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                gx[:, :, r0:r1, c0:c1] += gr[:, :, i, j, None, None] / ((r1 - r0) * (c1 - c0))
        return (gx,)

    return make_op(out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of ``[B, C, H, W]`` -> ``[B, C]``."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [B, C, H, W], got {x.shape}")
    return T.mean(x, axis=(2, 3))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return T.mul(x, Tensor._wrap(keep))


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    """Multiply every ``x[b, c, :, :]`` by ``gate[b, c]``."""
    T._same_dtype(x, gate)
    if x.ndim != 4 or gate.shape != x.shape[:2]:
        raise DimensionError(f"channel_scale: gate {gate.shape} vs input {x.shape}")
    xd, gd = x.data, gate.data
    out = xd * gd[:, :, None, None]

    def bw(g):
        return g * gd[:, :, None, None], (g * xd).sum(axis=(2, 3))

    return make_op(out, (x, gate), bw)
