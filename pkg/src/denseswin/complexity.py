"""Parameter and multiply-accumulate counts from closed forms.

MACs cover convolutions, linear layers and the two attention matmuls;
normalisation, activations, pooling and elementwise products are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import ModelConfig
from .dense import DenseBranch
from .fusion import MAB, FusionHead
from .model import HybridDenseSwin
from .swin import PATCH, SwinBranch


@dataclass
class Complexity:
    params: int
    macs: int
    parts: dict[str, int] = field(default_factory=dict)
    shapes: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)


def attention_macs(n_windows: int, heads: int, tokens: int, head_dim: int) -> int:
    """``Q K^T`` plus ``A V`` for every window and head."""
    return n_windows * heads * 2 * tokens * tokens * head_dim


def dense_macs(branch: DenseBranch, trace: list) -> int:
    shape = (1, 3, branch.image_size, branch.image_size)
    total = branch.stem.macs(shape)
    shape = branch.stem.out_shape(shape)
    if branch.cfg.stem_pool:
        shape = (1, shape[1], shape[2] // 2, shape[3] // 2)
    trace.append(("dense.stem", shape))
    for i, block in enumerate(branch.blocks):
        _, _, h, w = shape
        c = block.cfg.k0
        for layer in block.layers:
            s = (1, c, h, w)
            if layer.conv0 is not None:
                total += layer.conv0.macs(s)
                s = layer.conv0.out_shape(s)
            total += layer.conv.macs(s)
            c += block.cfg.k
        shape = (1, c, h, w)
        trace.append((f"dense.block{i + 1}", shape))
        if i < len(branch.transitions):
            tr = branch.transitions[i]
            total += tr.conv.macs(shape)
            shape = (1, tr.out_ch, h // 2, w // 2)
            trace.append((f"dense.transition{i + 1}", shape))
    return total


def swin_macs(branch: SwinBranch, trace: list) -> int:
    cfg = branch.cfg
    res0 = branch.image_size // PATCH
    total = branch.embed.macs(res0 * res0)
    for s, stage in enumerate(branch.stages):
        res = res0 // 2**s
        n = res * res
        if s > 0:
            total += branch.merges[s - 1].reduction.macs(n)
        for blk in stage.blocks:
            attn = blk.attn
            m = blk.window
            total += attn.w_q.macs(n) + attn.w_k.macs(n) + attn.w_v.macs(n) + attn.w_o.macs(n)
            total += attention_macs(n // (m * m), attn.heads, m * m, attn.dim // attn.heads)
            total += blk.mlp.fc1.macs(n) + blk.mlp.fc2.macs(n)
        trace.append((f"swin.stage{s + 1}", (1, res, res, cfg.embed_dim * 2**s)))
    return total


def mab_macs(block: MAB, h: int, w: int) -> int:
    s = (1, block.dim, h, w)
    convs = [block.f1, block.f2, block.f3, block.f4, block.f5, block.f6, block.mlka.proj, block.gsau.spatial, block.gsau.out]
    convs += block.mlka.spatial + block.mlka.gates
    return sum(c.macs(s) for c in convs)


def head_macs(head: FusionHead) -> int:
    g = head.cfg.grid
    total = head.proj.macs((1, head.proj.in_ch, g, g)) + head.classifier.macs(1)
    for sq in (head.squeeze_d, head.squeeze_t):
        if sq is not None:
            total += sq.fc1.macs(1) + sq.fc2.macs(1)
    return total


def count_params_flops(model_or_cfg: HybridDenseSwin | ModelConfig) -> Complexity:
    """Exact parameter count by registry traversal and a per-image MAC estimate."""
    model = model_or_cfg if isinstance(model_or_cfg, HybridDenseSwin) else HybridDenseSwin(model_or_cfg)
    trace: list = []
    parts = {}
    if model.dense is not None:
        parts["dense"] = dense_macs(model.dense, trace)
    parts["swin"] = swin_macs(model.swin, trace)
    if model.mab_t is not None:
        _, _, h, w = model.swin.out_shape()
        parts["mab"] = mab_macs(model.mab_t, h, w)
        if model.mab_d is not None:
            _, _, h, w = model.dense.out_shape()
            parts["mab"] += mab_macs(model.mab_d, h, w)
    parts["head"] = head_macs(model.head)
    g = model.cfg.fusion.grid
    trace.append(("fusion.pooled", (1, model.head.proj.in_ch, g, g)))
    trace.append(("fusion.features", (1, model.cfg.fusion.fused_channels)))
    trace.append(("logits", (1, model.cfg.fusion.num_classes)))
    return Complexity(model.registry().count(), sum(parts.values()), parts, trace)
