"""Densely connected convolutional branch.

Layer ``l`` of a block sees the block input plus the outputs of every
earlier layer, concatenated on the channel axis, so it receives
``k0 + k (l - 1)`` channels and contributes ``k`` new ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module, avg_pool2d, conv_output_size
from .tensor import Tensor


@dataclass
class DenseBlockConfig:
    k0: int
    k: int
    L: int
    bottleneck: bool = False

    @property
    def out_channels(self) -> int:
        return self.k0 + self.k * self.L

    def layer_inputs(self) -> list[int]:
        return [self.k0 + self.k * (l - 1) for l in range(1, self.L + 1)]


@dataclass
class TransitionConfig:
    compression: float = 0.5

    def out_channels(self, c: int) -> int:
        return int(np.floor(self.compression * c))


@dataclass
class DenseBranchConfig:
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False
    growth_rate: int = 8
    block_layers: list[int] = field(default_factory=lambda: [4, 4])
    compression: float = 0.5
    bottleneck: bool = False

    def validate(self, image_size: int) -> None:
        if not 0 < self.compression <= 1:
            raise ConfigError(f"dense.compression must be in (0, 1], got {self.compression}")
        if not self.block_layers or min(self.block_layers) < 1:
            raise ConfigError("dense.block_layers: every block needs at least one layer")
        if self.growth_rate < 1 or self.stem_channels < 1:
            raise ConfigError("dense: growth_rate and stem_channels must be positive")
        res = self.stem_resolution(image_size)
        for i in range(len(self.block_layers) - 1):
            if res % 2:
                raise ConfigError(f"dense: map {res} before transition {i + 1} is odd")
            res //= 2

    def stem_resolution(self, image_size: int) -> int:
        res = conv_output_size(image_size, self.stem_kernel, self.stem_stride, self.stem_kernel // 2)
        return res // 2 if self.stem_pool else res

    def plan(self) -> list[tuple[DenseBlockConfig, TransitionConfig | None]]:
        """Block/transition pairs; the last block has no transition."""
        out = []
        c = self.stem_channels
        for i, layers in enumerate(self.block_layers):
            blk = DenseBlockConfig(c, self.growth_rate, layers, self.bottleneck)
            c = blk.out_channels
            tr = None
            if i < len(self.block_layers) - 1:
                tr = TransitionConfig(self.compression)
                c = tr.out_channels(c)
            out.append((blk, tr))
        return out

    def infer_shape(self, image_size: int, batch: int = 1) -> tuple[int, int, int, int]:
        """Output shape computed from the config alone."""
        res = self.stem_resolution(image_size)
        c = self.stem_channels
        for blk, tr in self.plan():
            c = blk.out_channels
            if tr is not None:
                c = tr.out_channels(c)
                res //= 2
        return (batch, c, res, res)


class DenseLayer(Module):
    """BN -> ReLU -> conv3x3 producing ``k`` maps (optionally a 1x1 bottleneck first)."""

    def __init__(self, in_ch: int, k: int, bottleneck: bool, rng):
        self.in_ch, self.k = in_ch, k
        if bottleneck:
            self.norm0 = BatchNorm2d(in_ch)
            self.conv0 = Conv2d(in_ch, 4 * k, 1, bias=False, rng=rng)
            mid = 4 * k
        else:
            self.norm0 = self.conv0 = None
            mid = in_ch
        self.norm = BatchNorm2d(mid)
        self.conv = Conv2d(mid, k, 3, padding=1, bias=False, rng=rng)

    def new_features(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_ch:
            raise DimensionError(f"dense layer expects {self.in_ch} channels, got {x.shape[1]}")
        if self.conv0 is not None:
            x = self.conv0(T.relu(self.norm0(x)))
        return self.conv(T.relu(self.norm(x)))

    def forward(self, x: Tensor) -> Tensor:
        return T.concat([x, self.new_features(x)], axis=1)


def dense_layer(x: Tensor, layer: DenseLayer) -> Tensor:
    return layer(x)


class DenseBlock(Module):
    """``L`` dense layers.

    ``connectivity=False`` is an ablation that chains the layers without
    concatenation; it exists to prove the dense wiring is load-bearing.
    After each forward, ``layer_input_channels`` and ``edges`` hold what the
    concatenations actually consumed.
    """

    def __init__(self, cfg: DenseBlockConfig, rng, connectivity: bool = True):
        self.cfg = cfg
        self.connectivity = connectivity
        if connectivity:
            ins = cfg.layer_inputs()
        else:
            ins = [cfg.k0] + [cfg.k] * (cfg.L - 1)
        self.layers = [DenseLayer(c, cfg.k, cfg.bottleneck, rng) for c in ins]
        self.layer_input_channels: list[int] = []
        self.edges: list[tuple[int, int]] = []

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.k0:
            raise DimensionError(f"dense block expects {self.cfg.k0} channels, got {x.shape[1]}")
        self.layer_input_channels, self.edges = [], []
        if not self.connectivity:
            for l, layer in enumerate(self.layers, start=1):
                self.layer_input_channels.append(x.shape[1])
                self.edges.append((l - 1, l))
                x = layer.new_features(x)
            return x
        # features[j] is the block input (j = 0) or the output of layer j
        features = [x]
        for l, layer in enumerate(self.layers, start=1):
            inp = features[0] if len(features) == 1 else T.concat(features, axis=1)
            self.edges.extend((j, l) for j in range(len(features)))
            self.layer_input_channels.append(inp.shape[1])
            features.append(layer.new_features(inp))
        return T.concat(features, axis=1)


def dense_block(x: Tensor, block: DenseBlock) -> Tensor:
    return block(x)


class Transition(Module):
    """BN -> 1x1 conv to ``floor(theta C)`` channels -> 2x2 average pool."""

    def __init__(self, in_ch: int, cfg: TransitionConfig, rng):
        self.in_ch = in_ch
        self.out_ch = cfg.out_channels(in_ch)
        if self.out_ch < 1:
            raise ConfigError(f"transition compresses {in_ch} channels to zero")
        self.norm = BatchNorm2d(in_ch)
        self.conv = Conv2d(in_ch, self.out_ch, 1, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"transition needs even extents, got {x.shape[2]}x{x.shape[3]}")
        return avg_pool2d(self.conv(self.norm(x)), 2)


def transition(x: Tensor, layer: Transition) -> Tensor:
    return layer(x)


class DenseBranch(Module):
    """Stem, dense blocks with transitions between them, final BN + ReLU."""

    def __init__(self, cfg: DenseBranchConfig, image_size: int, rng=None):
        cfg.validate(image_size)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg, self.image_size = cfg, image_size
        self.stem = Conv2d(3, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel // 2, bias=False, rng=rng)
        self.blocks = []
        self.transitions = []
        for blk_cfg, tr_cfg in cfg.plan():
            self.blocks.append(DenseBlock(blk_cfg, rng))
            if tr_cfg is not None:
                self.transitions.append(Transition(blk_cfg.out_channels, tr_cfg, rng))
        self.norm = BatchNorm2d(cfg.infer_shape(image_size)[1])

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != 3 or x.shape[2] != self.image_size or x.shape[3] != self.image_size:
            raise DimensionError(f"dense branch expects [B, 3, {self.image_size}, {self.image_size}], got {x.shape}")
        y = self.stem(x)
        if self.cfg.stem_pool:
            y = avg_pool2d(y, 2)
        for i, block in enumerate(self.blocks):
            y = block(y)
            if i < len(self.transitions):
                y = self.transitions[i](y)
        return T.relu(self.norm(y))

    def out_shape(self, batch: int = 1) -> tuple[int, int, int, int]:
        return self.cfg.infer_shape(self.image_size, batch)
