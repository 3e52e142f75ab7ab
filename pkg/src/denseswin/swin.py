"""Shifted-window transformer branch.

Token maps are kept channels-last, ``[B, H', W', d]``, between blocks. A
stage whose map is not larger than the window uses the whole map as one
window and never shifts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module, Parameter, linear, trunc_normal
from .tensor import Tensor

MASK_VALUE = -1e9
PATCH = 4


@dataclass
class SwinConfig:
    patch_size: int = PATCH
    embed_dim: int = 16
    depths: list[int] = field(default_factory=lambda: [2, 2, 6, 2])
    heads: list[int] = field(default_factory=lambda: [2, 4, 8, 16])
    window: int = 4
    mlp_ratio: float = 4.0
    rel_pos_bias: bool = True

    def validate(self, image_size: int) -> None:
        if self.patch_size != PATCH:
            raise ConfigError("swin.patch_size: only 4x4 patches are supported")
        if len(self.depths) != len(self.heads):
            raise ConfigError("swin.heads: need one head count per stage")
        for i, depth in enumerate(self.depths):
            if depth < 2 or depth % 2:
                raise ConfigError(f"swin.depths[{i}]: blocks come in W-MSA/SW-MSA pairs, got {depth}")
        down = PATCH * 2 ** (len(self.depths) - 1)
        if image_size % down:
            raise ConfigError(f"swin: image size {image_size} not divisible by {down}")
        for s, (res, heads) in enumerate(zip(self.resolutions(image_size), self.heads)):
            dim = self.embed_dim * 2**s
            if dim % heads:
                raise ConfigError(f"swin.heads[{s}]: dim {dim} not divisible by {heads} heads")
            m, _ = stage_window(res, self.window)
            if res % m:
                raise ConfigError(f"swin.window: stage {s + 1} map {res} not divisible by window {m}")

    def resolutions(self, image_size: int) -> list[int]:
        return [image_size // PATCH // 2**s for s in range(len(self.depths))]


def stage_window(resolution: int, window: int) -> tuple[int, int]:
    """Effective (window, shift) for a square stage map."""
    if resolution <= window:
        return resolution, 0
    return window, window // 2


# ---------------------------------------------------------------------------
# partitions
# ---------------------------------------------------------------------------


def patch_partition(x: Tensor, patch: int = PATCH) -> Tensor:
    """``[B, 3, H, W]`` -> ``[B, (H/p)(W/p), p*p*3]``, patches in row-major order.

    Each token lists its pixels row by row, RGB innermost.
    """
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"patch_partition: {h}x{w} not divisible by {patch}")
    y = T.reshape(x, (b, c, h // patch, patch, w // patch, patch))
    y = T.transpose(y, (0, 2, 4, 3, 5, 1))
    return T.reshape(y, (b, (h // patch) * (w // patch), patch * patch * c))


def patch_unpartition(tokens: Tensor, h: int, w: int, patch: int = PATCH, channels: int = 3) -> Tensor:
    b = tokens.shape[0]
    y = T.reshape(tokens, (b, h // patch, w // patch, patch, patch, channels))
    y = T.transpose(y, (0, 5, 1, 3, 2, 4))
    return T.reshape(y, (b, channels, h, w))


def window_partition(x: Tensor, m: int) -> Tensor:
    """``[B, H, W, d]`` -> ``[B * nW, m*m, d]`` with windows in row-major order."""
    b, h, w, d = x.shape
    if h % m or w % m:
        raise DimensionError(f"window_partition: {h}x{w} not divisible by window {m}")
    y = T.reshape(x, (b, h // m, m, w // m, m, d))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b * (h // m) * (w // m), m * m, d))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    n, t, d = windows.shape
    b = n // ((h // m) * (w // m))
    y = T.reshape(windows, (b, h // m, w // m, m, m, d))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, h, w, d))


def relative_position_index(m: int) -> np.ndarray:
    """``[m*m, m*m]`` indices into a ``(2m-1)^2`` bias table."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (m - 1)
    return rel[0] * (2 * m - 1) + rel[1]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


class AttentionCounter:
    """Counts per-head window attentions and their multiply-accumulates."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.attentions = 0
        self.macs = 0

    def add(self, n_windows: int, heads: int, tokens: int, head_dim: int) -> None:
        self.attentions += n_windows * heads
        # Q K^T and A V, each tokens^2 * head_dim per head
        self.macs += n_windows * heads * 2 * tokens * tokens * head_dim


ATTENTION_COUNTER = AttentionCounter()


class WindowAttention(Module):
    """Multi-head attention parameters for one block.

    Args:
        dim: token width ``d``; must divide by ``heads``.
        heads: number of heads.
        window: window side ``M``; ``None`` disables the relative position bias.
    """

    def __init__(self, dim: int, heads: int, window: int | None, rng=None, rel_pos_bias: bool = True):
        if dim % heads:
            raise DimensionError(f"attention dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.heads, self.window = dim, heads, window
        self.w_q = Linear(dim, dim, bias=False, rng=rng)
        self.w_k = Linear(dim, dim, bias=False, rng=rng)
        self.w_v = Linear(dim, dim, bias=False, rng=rng)
        self.w_o = Linear(dim, dim, bias=True, rng=rng)
        if window is not None and rel_pos_bias:
            self.bias_table = Parameter(trunc_normal(rng, ((2 * window - 1) ** 2, heads)), dtype=np.float32)
            self._index = relative_position_index(window)
        else:
            self.bias_table = None
            self._index = None

    def position_bias(self) -> Tensor | None:
        if self.bias_table is None:
            return None
        t = self.window * self.window
        b = T.take(self.bias_table, self._index.reshape(-1), axis=0)
        return T.transpose(T.reshape(b, (t, t, self.heads)), (2, 0, 1))


def mhsa(
    tokens: Tensor,
    p: WindowAttention,
    mask: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``tokens[N, T, d]``.

    Per head: ``softmax(Q K^T / sqrt(d_k) + bias + mask) V``; heads are
    concatenated and projected by ``W_o``. ``mask`` is ``[nW, T, T]`` and is
    tiled over ``N = B * nW``.
    """
    n, t, d = tokens.shape
    if d != p.dim:
        raise DimensionError(f"mhsa: token width {d} != attention dim {p.dim}")
    h = p.heads
    dk = d // h

    def heads(z: Tensor) -> Tensor:
        return T.transpose(T.reshape(z, (n, t, h, dk)), (0, 2, 1, 3))

    q = heads(p.w_q(tokens))
    k = heads(p.w_k(tokens))
    v = heads(p.w_v(tokens))
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    bias = p.position_bias()
    if bias is not None:
        if t != p.window * p.window:
            raise DimensionError(f"mhsa: {t} tokens but bias built for window {p.window}")
        logits = T.add(logits, T.broadcast_to(bias, (n, h, t, t)))
    if mask is not None:
        nw = mask.shape[0]
        if mask.shape[1:] != (t, t) or n % nw:
            raise DimensionError(f"mhsa: mask {mask.shape} does not fit {n} windows of {t} tokens")
        tiled = np.broadcast_to(mask[None, :, None], (n // nw, nw, h, t, t)).reshape(n, h, t, t)
        logits = T.add(logits, Tensor._wrap(tiled.astype(tokens.dtype)))
    weights = T.softmax(logits, axis=-1)
    ATTENTION_COUNTER.add(n, h, t, dk)
    out = T.matmul(weights, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n, t, d))
    out = p.w_o(out)
    return (out, weights) if return_weights else out


def build_shift_mask(h: int, w: int, m: int, s: int) -> np.ndarray:
    """Additive ``[nW, m*m, m*m]`` mask for attention on a map rolled by ``(-s, -s)``.

    Positions of the rolled map are labelled with the region of the unrolled
    map they came from (3 bands per axis); pairs with different labels get
    ``MASK_VALUE``.
    """
    nw = (h // m) * (w // m)
    if s == 0:
        return np.zeros((nw, m * m, m * m))
    labels = np.zeros((h, w), dtype=np.int64)
    bands = (slice(0, -m), slice(-m, -s), slice(-s, None))
    region = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = region
            region += 1
    win = labels.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3).reshape(nw, m * m)
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, MASK_VALUE)


def w_msa(x: Tensor, p: WindowAttention, m: int, mask: np.ndarray | None = None) -> Tensor:
    """Attention inside each non-overlapping ``m x m`` window of ``x[B, H, W, d]``."""
    b, h, w, d = x.shape
    win = window_partition(x, m)
    out = mhsa(win, p, mask)
    return window_reverse(out, m, h, w)


def sw_msa(x: Tensor, p: WindowAttention, m: int, s: int | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Window attention on a grid offset by ``s`` (default ``m // 2``)."""
    s = m // 2 if s is None else s
    b, h, w, d = x.shape
    if s == 0:
        return w_msa(x, p, m)
    if mask is None:
        mask = build_shift_mask(h, w, m, s)
    shifted = T.cyclic_shift(x, -s, -s)
    out = w_msa(shifted, p, m, mask)
    return T.cyclic_shift(out, s, s)


# ---------------------------------------------------------------------------
# blocks and stages
# ---------------------------------------------------------------------------


class Mlp(Module):
    def __init__(self, dim: int, ratio: float, rng):
        hidden = int(dim * ratio)
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm residual block: ``x + attn(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, dim, heads, resolution, window, shift, mlp_ratio, rng, rel_pos_bias=True):
        self.dim, self.resolution, self.window, self.shift = dim, resolution, window, shift
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, rng, rel_pos_bias)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio, rng)
        self._mask = build_shift_mask(resolution, resolution, window, shift) if shift else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm1(x)
        if self.shift:
            y = sw_msa(y, self.attn, self.window, self.shift, self._mask)
        else:
            y = w_msa(y, self.attn, self.window)
        x = T.add(x, y)
        return T.add(x, self.mlp(self.norm2(x)))


def swin_block_pair(x: Tensor, blocks: tuple[SwinBlock, SwinBlock]) -> Tensor:
    return blocks[1](blocks[0](x))


class PatchMerging(Module):
    """Concatenate 2x2 neighbours (TL, TR, BL, BR) and project ``4d -> 2d``."""

    def __init__(self, dim: int, rng):
        self.dim = dim
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.reduction(merge_neighbours(x))


def merge_neighbours(x: Tensor) -> Tensor:
    b, h, w, d = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch merging needs even extents, got {h}x{w}")
    y = T.reshape(x, (b, h // 2, 2, w // 2, 2, d))
    y = T.transpose(y, (0, 1, 3, 2, 4, 5))
    return T.reshape(y, (b, h // 2, w // 2, 4 * d))


class SwinBranch(Module):
    """Patch partition, linear embedding and hierarchical shifted-window stages.

    Output is channels-first ``[B, 8C, H/32, W/32]`` (for four stages) after a
    final LayerNorm.
    """

    def __init__(self, cfg: SwinConfig, image_size: int, rng=None):
        cfg.validate(image_size)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.image_size = image_size
        self.embed = Linear(PATCH * PATCH * 3, cfg.embed_dim, rng=rng)
        self.stages = []
        self.merges = []
        for s, (depth, heads, res) in enumerate(zip(cfg.depths, cfg.heads, cfg.resolutions(image_size))):
            dim = cfg.embed_dim * 2**s
            if s > 0:
                self.merges.append(PatchMerging(dim // 2, rng))
            m, shift = stage_window(res, cfg.window)
            blocks = [
                SwinBlock(dim, heads, res, m, shift if i % 2 else 0, cfg.mlp_ratio, rng, cfg.rel_pos_bias)
                for i in range(depth)
            ]
            self.stages.append(Stage(blocks))
        self.norm = LayerNorm(cfg.embed_dim * 2 ** (len(cfg.depths) - 1))
        self.stage_shapes: list[tuple[int, ...]] = []

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        if c != 3 or h != self.image_size or w != self.image_size:
            raise DimensionError(f"swin branch expects [B, 3, {self.image_size}, {self.image_size}], got {x.shape}")
        tokens = self.embed(patch_partition(x))
        y = T.reshape(tokens, (b, h // PATCH, w // PATCH, self.cfg.embed_dim))
        self.stage_shapes = []
        for s, stage in enumerate(self.stages):
            if s > 0:
                y = self.merges[s - 1](y)
            y = stage(y)
            self.stage_shapes.append(y.shape)
        y = self.norm(y)
        return T.transpose(y, (0, 3, 1, 2))

    def out_shape(self, batch: int = 1) -> tuple[int, int, int, int]:
        res = self.cfg.resolutions(self.image_size)[-1]
        return (batch, self.cfg.embed_dim * 2 ** (len(self.cfg.depths) - 1), res, res)

    def expected_stage_shapes(self, batch: int = 1) -> list[tuple[int, ...]]:
        return [
            (batch, r, r, self.cfg.embed_dim * 2**s) for s, r in enumerate(self.cfg.resolutions(self.image_size))
        ]


class Stage(Module):
    def __init__(self, blocks: list[SwinBlock]):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for i in range(0, len(self.blocks), 2):
            x = swin_block_pair(x, (self.blocks[i], self.blocks[i + 1]))
        return x
