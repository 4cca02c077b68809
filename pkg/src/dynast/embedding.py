"""Multi-scale patch embeddings and learnable positional maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from . import numerics as nm
from .config import ModelConfig
from .numerics import Tensor


@dataclass
class ConvParams:
    weight: Tensor
    bias: Optional[Tensor] = None


@dataclass
class MlpParams:
    """Two stacked convolutions with a leaky-relu between them."""
    conv1: ConvParams
    conv2: ConvParams


@dataclass
class EmbeddingParams:
    patch_tgt: list[ConvParams] = field(default_factory=list)   # per scale j
    patch_ref: list[ConvParams] = field(default_factory=list)
    mix_tgt: list[MlpParams] = field(default_factory=list)      # per scale i
    mix_ref: list[MlpParams] = field(default_factory=list)
    pos_base: Optional[Tensor] = None                            # coarsest map
    pos_up: list[Optional[ConvParams]] = field(default_factory=list)  # index i < M-1


@dataclass
class MultiScaleFeatures:
    """Per-scale feature maps, index 0 = finest scale."""
    tgt: list[Tensor]
    ref: list[Tensor]
    pos: list[Tensor]


def patch_embed(image: Tensor, patch_side: int, params: ConvParams, label: str = "input") -> Tensor:
    """Linear map of non-overlapping patches; a stride=kernel convolution."""
    c, h, w = image.data.shape
    if h % patch_side or w % patch_side:
        raise nm.ShapeError(
            f"{label}: spatial dims {h}x{w} not divisible by patch side {patch_side}"
        )
    return nm.conv2d(image, params.weight, params.bias, stride=patch_side, padding=0)


def _mix(x: Tensor, mlp: MlpParams) -> Tensor:
    h = nm.conv2d(x, mlp.conv1.weight, mlp.conv1.bias, padding=1)
    h = nm.leaky_relu(h, 0.2)
    return nm.conv2d(h, mlp.conv2.weight, mlp.conv2.bias, padding=1)


def embed_multiscale(
    s_tgt: Tensor,
    s_ref: Tensor,
    i_ref: Tensor,
    cfg: ModelConfig,
    params: EmbeddingParams,
) -> MultiScaleFeatures:
    """Patch-embed every scale, pool all scales into each level, mix nonlinearly."""
    m = cfg.num_scales
    res = cfg.finest_resolution
    for name, img in (("target map", s_tgt), ("reference map", s_ref), ("reference image", i_ref)):
        if img.data.shape[1:] != (res, res):
            raise nm.ShapeError(
                f"{name} spatial dims {img.data.shape[1:]} != finest resolution {res}x{res}"
            )

    ref_in = nm.channel_concat([s_ref, i_ref])
    e_tgt = [
        patch_embed(s_tgt, 1 << j, params.patch_tgt[j], label=f"scale{j} target")
        for j in range(m)
    ]
    e_ref = [
        patch_embed(ref_in, 1 << j, params.patch_ref[j], label=f"scale{j} reference")
        for j in range(m)
    ]

    # strict reading drops the finest patch embedding from the shared pool
    scales_in = range(1, m) if (cfg.literal_embed_range and m > 1) else range(m)

    tgt_feats: list[Tensor] = []
    ref_feats: list[Tensor] = []
    for i in range(m):
        side = cfg.resolution(i)
        cat_t = nm.channel_concat([nm.bilinear_resize(e_tgt[j], side, side) for j in scales_in])
        cat_r = nm.channel_concat([nm.bilinear_resize(e_ref[j], side, side) for j in scales_in])
        tgt_feats.append(_mix(cat_t, params.mix_tgt[i]))
        ref_feats.append(_mix(cat_r, params.mix_ref[i]))

    pos = build_position_embeddings(cfg, params)
    return MultiScaleFeatures(tgt=tgt_feats, ref=ref_feats, pos=pos)


def build_position_embeddings(cfg: ModelConfig, params: EmbeddingParams) -> list[Tensor]:
    """Coarsest map is learnable; finer maps are upsample-conv-nonlinear chains."""
    m = cfg.num_scales
    pos: list[Optional[Tensor]] = [None] * m
    pos[m - 1] = params.pos_base
    for i in range(m - 2, -1, -1):
        side = cfg.resolution(i)
        up = nm.bilinear_resize(pos[i + 1], side, side)
        conv = params.pos_up[i]
        pos[i] = nm.leaky_relu(nm.conv2d(up, conv.weight, conv.bias, padding=1), 0.2)
    return pos


def attach_position(feat: Tensor, pos: Tensor) -> Tensor:
    """Concatenate the positional channels onto a feature map."""
    if feat.data.shape[1:] != pos.data.shape[1:]:
        raise nm.ShapeError(
            f"attach_position spatial mismatch: {feat.data.shape} vs {pos.data.shape}"
        )
    return nm.channel_concat([feat, pos])
