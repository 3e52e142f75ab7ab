"""Multi-scale attention refinement, channel squeeze and two-branch fusion.

The refinement block applied to each branch is::

    N1 = LN(X)
    X  = X + lam1 * f3(MLKA(f1(N1)) * f2(N1))
    N2 = LN(X)
    X  = X + lam2 * f6(GSAU(f4(N2), f5(N2)))

with every ``f_i`` a channel-preserving 1x1 convolution and LN taken over
channels at each spatial location. ``lam1`` and ``lam2`` start at zero, so a
fresh block is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import (
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    adaptive_avg_pool2d,
    channel_scale,
    dropout,
    global_avg_pool,
    layer_norm_channels,
)
from .tensor import Tensor


@dataclass
class FusionConfig:
    grid: int = 2
    fused_channels: int = 64
    dropout: float = 0.3
    num_classes: int = 5
    squeeze_ratio: int = 4
    lambda_init: float = 0.0
    mlka_kernels: list[int] = field(default_factory=lambda: [3, 5, 7])

    def validate(self) -> None:
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"fusion.dropout must be in [0, 1), got {self.dropout}")
        if self.grid < 1 or self.fused_channels < 1 or self.num_classes < 2:
            raise ConfigError("fusion: grid, fused_channels must be >= 1 and num_classes >= 2")
        if self.squeeze_ratio < 1:
            raise ConfigError("fusion.squeeze_ratio must be >= 1")
        if any(k % 2 == 0 for k in self.mlka_kernels):
            raise ConfigError("fusion.mlka_kernels must be odd for same padding")


def _pointwise(c: int, rng) -> Conv2d:
    return Conv2d(c, c, 1, rng=rng)


class MLKA(Module):
    """Depthwise convs at several kernel sizes, each multiplied by a 1x1 gate,
    summed into an attention map that multiplies a 1x1 projection of the input."""

    def __init__(self, dim: int, kernels=(3, 5, 7), rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.kernels = list(kernels)
        self.spatial = [Conv2d(dim, dim, k, padding=k // 2, groups=dim, rng=rng) for k in self.kernels]
        self.gates = [_pointwise(dim, rng) for _ in self.kernels]
        self.proj = _pointwise(dim, rng)

    def attention_map(self, x: Tensor) -> Tensor:
        attn = None
        for conv, gate in zip(self.spatial, self.gates):
            term = T.mul(conv(x), gate(x))
            attn = term if attn is None else T.add(attn, term)
        return attn

    def forward(self, x: Tensor) -> Tensor:
        return T.mul(self.attention_map(x), self.proj(x))


def mlka(x: Tensor, params: MLKA) -> Tensor:
    return params(x)


class GSAU(Module):
    """``out = conv1x1(depthwise3x3(a) * b)``."""

    def __init__(self, dim: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spatial = Conv2d(dim, dim, 3, padding=1, groups=dim, rng=rng)
        self.out = _pointwise(dim, rng)

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise DimensionError(f"GSAU inputs differ in shape: {a.shape} vs {b.shape}")
        return self.out(T.mul(self.spatial(a), b))


def gsau(a: Tensor, b: Tensor, params: GSAU) -> Tensor:
    return params(a, b)


class MAB(Module):
    """Two-residual multi-scale attention block on ``[B, C, H, W]`` maps."""

    def __init__(self, dim: int, kernels=(3, 5, 7), lambda_init: float = 0.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.norm1 = LayerNorm(dim)
        self.f1, self.f2, self.f3 = (_pointwise(dim, rng) for _ in range(3))
        self.mlka = MLKA(dim, kernels, rng)
        self.norm2 = LayerNorm(dim)
        self.f4, self.f5, self.f6 = (_pointwise(dim, rng) for _ in range(3))
        self.gsau = GSAU(dim, rng)
        self.lambda1 = Parameter(np.full(1, lambda_init), dtype=np.float32)
        self.lambda2 = Parameter(np.full(1, lambda_init), dtype=np.float32)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.dim:
            raise DimensionError(f"MAB expects [B, {self.dim}, H, W], got {x.shape}")
        n1 = layer_norm_channels(x, self.norm1)
        y = self.f3(T.mul(self.mlka(self.f1(n1)), self.f2(n1)))
        x = T.add(x, T.scale(y, self.lambda1))
        n2 = layer_norm_channels(x, self.norm2)
        y = self.f6(self.gsau(self.f4(n2), self.f5(n2)))
        return T.add(x, T.scale(y, self.lambda2))


def mab(x: Tensor, params: MAB) -> Tensor:
    return params(x)


def refine_branches(f_d: Tensor, f_t: Tensor, mab_d: MAB, mab_t: MAB) -> tuple[Tensor, Tensor]:
    """Refine each branch's map with its own block."""
    return mab_d(f_d), mab_t(f_t)


class ChannelSqueeze(Module):
    """Squeeze-and-excitation gate: ``x * sigmoid(W2 relu(W1 GAP(x)))`` per channel."""

    def __init__(self, channels: int, ratio: int = 4, rng=None):
        if channels % ratio:
            raise ConfigError(f"channel squeeze: {channels} channels not divisible by ratio {ratio}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.ratio = channels, ratio
        self.fc1 = Linear(channels, channels // ratio, rng=rng)
        self.fc2 = Linear(channels // ratio, channels, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.fc2(T.relu(self.fc1(global_avg_pool(x)))))

    def forward(self, x: Tensor) -> Tensor:
        return channel_scale(x, self.gate(x))


def channel_squeeze(x: Tensor, params: ChannelSqueeze) -> Tensor:
    return params(x)


class FusionHead(Module):
    """Squeeze each branch, pool to a shared grid, concat, project, classify.

    ``dense_channels=None`` builds a head for the transformer branch alone.
    """

    def __init__(self, dense_channels: int | None, swin_channels: int, cfg: FusionConfig, squeeze: bool = True, rng=None):
        cfg.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.use_squeeze = squeeze
        self.dense_channels, self.swin_channels = dense_channels, swin_channels
        self.squeeze_d = ChannelSqueeze(dense_channels, cfg.squeeze_ratio, rng) if squeeze and dense_channels else None
        self.squeeze_t = ChannelSqueeze(swin_channels, cfg.squeeze_ratio, rng) if squeeze else None
        total = swin_channels + (dense_channels or 0)
        self.proj = Conv2d(total, cfg.fused_channels, 1, rng=rng)
        self.classifier = Linear(cfg.fused_channels, cfg.num_classes, rng=rng)

    def features(self, f_d: Tensor | None, f_t: Tensor) -> Tensor:
        """Fused ``[B, F]`` vector (the penultimate representation)."""
        maps = []
        if f_d is not None:
            if self.dense_channels is None:
                raise DimensionError("fusion head was built without a dense branch")
            if self.squeeze_d is not None:
                f_d = self.squeeze_d(f_d)
            maps.append(adaptive_avg_pool2d(f_d, self.cfg.grid))
        if self.squeeze_t is not None:
            f_t = self.squeeze_t(f_t)
        maps.append(adaptive_avg_pool2d(f_t, self.cfg.grid))
        fused = maps[0] if len(maps) == 1 else T.concat(maps, axis=1)
        return global_avg_pool(self.proj(fused))

    def classify(self, feats: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.classifier(dropout(feats, self.cfg.dropout, self.training, rng))

    def forward(self, f_d, f_t, rng=None) -> Tensor:
        return self.classify(self.features(f_d, f_t), rng)


def fuse_and_classify(f_d: Tensor, f_t: Tensor, head: FusionHead, rng=None) -> Tensor:
    return head(f_d, f_t, rng)
