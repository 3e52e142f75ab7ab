"""The full two-branch classifier."""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .dense import DenseBranch
from .errors import DimensionError
from .fusion import MAB, FusionHead
from .nn import Module
from .swin import SwinBranch
from .tensor import Tensor


class HybridDenseSwin(Module):
    """Dense branch and shifted-window branch, refined, squeezed and fused.

    Ablation toggles in ``cfg.ablation`` drop the dense branch, the
    refinement blocks or the channel squeeze; dropped parts own no
    parameters.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ab = cfg.ablation
        kernels = cfg.fusion.mlka_kernels
        lam = cfg.fusion.lambda_init
        self.dense = None if ab.disable_dense_branch else DenseBranch(cfg.dense, cfg.image_size, rng)
        self.swin = SwinBranch(cfg.swin, cfg.image_size, rng)
        d_ch = None if self.dense is None else self.dense.out_shape()[1]
        t_ch = self.swin.out_shape()[1]
        if ab.disable_mab:
            self.mab_d = self.mab_t = None
        else:
            self.mab_d = None if d_ch is None else MAB(d_ch, kernels, lam, rng)
            self.mab_t = MAB(t_ch, kernels, lam, rng)
        self.head = FusionHead(d_ch, t_ch, cfg.fusion, squeeze=not ab.disable_squeeze, rng=rng)

    def branch_maps(self, x: Tensor) -> tuple[Tensor | None, Tensor]:
        if x.ndim != 4 or x.shape[1:] != (3, self.cfg.image_size, self.cfg.image_size):
            s = self.cfg.image_size
            raise DimensionError(f"model expects [B, 3, {s}, {s}] input, got {x.shape}")
        f_d = self.dense(x) if self.dense is not None else None
        f_t = self.swin(x)
        if self.mab_t is not None:
            if f_d is not None:
                f_d = self.mab_d(f_d)
            f_t = self.mab_t(f_t)
        return f_d, f_t

    def forward_with_features(self, x: Tensor, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        f_d, f_t = self.branch_maps(x)
        feats = self.head.features(f_d, f_t)
        return self.head.classify(feats, rng), feats

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward_with_features(x, rng)[0]


def model_forward(x: Tensor, model: HybridDenseSwin, training: bool, rng=None) -> Tensor:
    """Logits ``[B, K]``; sets the train/eval mode of every layer first."""
    model.train(training)
    return model(x, rng)
