"""Block assembly and the full multi-scale model.

A block is: attention map -> keep/drop gating -> gated aggregation with a
spatially-adaptive fallback -> residual feed-forward. The coarsest scale runs
dense attention; finer scales run candidate-restricted sparse attention whose
candidates come from the coarser scale (first block) or from neighbour
propagation (later blocks). A lightweight decoder fuses all scales into the
output image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .attention import (
    CandidateSet,
    SparseAttentionMap,
    dense_attention,
    inherit_candidates_interscale,
    propagate_candidates_innerscale,
    sparse_attention,
)
from .config import ModelConfig, ValidationError
from .embedding import (
    ConvParams,
    EmbeddingParams,
    MlpParams,
    attach_position,
    embed_multiscale,
)
from .numerics import ParameterStore, Tensor
from .pruning import PruneHead, apply_prune, frozen_decision, prune_decision, prune_logits


@dataclass
class SpadeParams:
    """Semantic-map conditioned scale/shift generators (conv3x3 -> relu -> conv1x1)."""

    gamma_net: MlpParams
    beta_net: MlpParams


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class BlockParams:
    query_proj: ConvParams
    key_proj: ConvParams
    value_proj: ConvParams
    spade: SpadeParams
    prune: Optional[PruneHead]
    agg_norm: NormParams
    ffn: MlpParams
    ffn_norm: NormParams


@dataclass
class BlockOutput:
    scale: int
    index: int            # 1-based position within the scale
    features: Tensor
    attn: Optional[SparseAttentionMap]


@dataclass
class ModelOutput:
    image: Tensor
    blocks: list[BlockOutput]
    plan: dict = field(default_factory=dict)

    def final_features(self, scale: int) -> Tensor:
        chosen = [b.features for b in self.blocks if b.scale == scale]
        return chosen[-1]


# ---------------------------------------------------------------------------
# block-level operations

def spade_modulate(feat: Tensor, s_tgt: Tensor, sp: SpadeParams) -> Tensor:
    """instance_norm(feat) * (1 + gamma(s)) + beta(s), fields from the semantic map."""
    if feat.data.shape[1:] != s_tgt.data.shape[1:]:
        raise nm.ShapeError(
            f"spade_modulate spatial mismatch: {feat.data.shape} vs {s_tgt.data.shape}"
        )
    normed = nm.instance_norm(feat)
    g_hidden = nm.relu(nm.conv2d(s_tgt, sp.gamma_net.conv1.weight, sp.gamma_net.conv1.bias, padding=1))
    gamma = nm.conv2d(g_hidden, sp.gamma_net.conv2.weight, sp.gamma_net.conv2.bias)
    b_hidden = nm.relu(nm.conv2d(s_tgt, sp.beta_net.conv1.weight, sp.beta_net.conv1.bias, padding=1))
    beta = nm.conv2d(b_hidden, sp.beta_net.conv2.weight, sp.beta_net.conv2.bias)
    return nm.add(nm.mul(normed, nm.add(gamma, 1.0)), beta)


def _flatten_map(x: Tensor) -> Tensor:
    c, h, w = x.data.shape
    return nm.transpose(nm.reshape(x, (c, h * w)), (1, 0))


def _unflatten_map(x: Tensor, h: int, w: int) -> Tensor:
    n, c = x.data.shape
    return nm.reshape(nm.transpose(x), (c, h, w))


def aggregate_features(
    f_prev: Tensor,
    f_ref: Tensor,
    attn: Optional[SparseAttentionMap],
    s_tgt_resized: Tensor,
    value_proj: ConvParams,
    spade: SpadeParams,
    norm: NormParams,
) -> Tensor:
    """Blend attended reference features with the modulated fallback.

    Queries whose kept attention mass is below 1 take up the slack from the
    semantic fallback; fully pruned queries use it entirely.
    """
    c, h, w = f_prev.data.shape
    sp = spade_modulate(f_prev, s_tgt_resized, spade)
    if attn is None:
        return nm.layer_norm(nm.add(sp, f_prev), norm.gain, norm.bias)

    kept = attn.kept_weights
    values = _flatten_map(nm.conv2d(f_ref, value_proj.weight, value_proj.bias))
    if attn.candidates.is_full:
        attended = nm.matmul(kept, values)
    else:
        attended = nm.weighted_gather_sum(kept, values, attn.candidates.idx)
    mass = nm.reshape(nm.reduce_sum(kept, axis=1), (h * w, 1))
    sp_flat = _flatten_map(sp)
    f_out = nm.add(nm.mul(nm.sub(1.0, mass), sp_flat), attended)
    f_out = _unflatten_map(f_out, h, w)
    return nm.layer_norm(nm.add(f_out, f_prev), norm.gain, norm.bias)


def ffn_residual(feat: Tensor, mlp: MlpParams, norm: NormParams) -> Tensor:
    """Width-preserving conv-relu-conv with a residual and layer norm."""
    h = nm.relu(nm.conv2d(feat, mlp.conv1.weight, mlp.conv1.bias, padding=1))
    h = nm.conv2d(h, mlp.conv2.weight, mlp.conv2.bias, padding=1)
    return nm.layer_norm(nm.add(feat, h), norm.gain, norm.bias)


def decode(scale_features: list[Tensor], conv1: ConvParams, conv2: ConvParams) -> Tensor:
    """Fuse per-scale features at the finest resolution into an RGB image in [0, 1]."""
    side = scale_features[0].data.shape[1]
    ups = [nm.bilinear_resize(f, side, side) for f in scale_features]
    h = nm.conv2d(nm.channel_concat(ups), conv1.weight, conv1.bias, padding=1)
    h = nm.leaky_relu(h, 0.2)
    h = nm.conv2d(h, conv2.weight, conv2.bias, padding=1)
    return nm.mul(nm.add(nm.tanh(h), 1.0), 0.5)


# ---------------------------------------------------------------------------
# the model

class DynastModel:
    """Multi-scale sparse-attention generator over a named parameter store."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParameterStore()
        self._rng = nm.make_rng(seed)
        self._build()

    # -- parameter construction -------------------------------------------

    def _conv(self, name: str, cout: int, cin: int, k: int,
              scale: float = 1.0, bias_init: float = 0.0, bias: bool = True) -> ConvParams:
        w = self.store.create(
            f"{name}.weight",
            nm.uniform_init(self._rng, (cout, cin, k, k), fan_in=cin * k * k, scale=scale),
        )
        if not bias:
            return ConvParams(weight=w.tensor, bias=None)
        b = self.store.create(f"{name}.bias", np.full(cout, bias_init, dtype=np.float64))
        return ConvParams(weight=w.tensor, bias=b.tensor)

    def _mlp(self, name: str, cin: int, hidden: int, cout: int, k1: int, k2: int,
             scale: float = 1.0, final_bias: float = 0.0) -> MlpParams:
        return MlpParams(
            conv1=self._conv(f"{name}.conv1", hidden, cin, k1, scale=scale),
            conv2=self._conv(f"{name}.conv2", cout, hidden, k2, scale=scale, bias_init=final_bias),
        )

    def _norm(self, name: str, c: int) -> NormParams:
        gain = self.store.create(f"{name}.gain", np.ones(c, dtype=np.float64))
        bias = self.store.create(f"{name}.bias", np.zeros(c, dtype=np.float64))
        return NormParams(gain=gain.tensor, bias=bias.tensor)

    def _build(self):
        cfg = self.cfg
        m = cfg.num_scales
        s_ch, i_ch = cfg.semantic_channels, cfg.image_channels
        embed = EmbeddingParams()
        pooled = sum(
            cfg.embed_channels[m - 1 - j]
            for j in (range(1, m) if (cfg.literal_embed_range and m > 1) else range(m))
        )
        for j in range(m):
            p = 1 << j
            e = cfg.embed_width(j)
            embed.patch_tgt.append(self._conv(f"embed.tgt{j}", e, s_ch, p))
            embed.patch_ref.append(self._conv(f"embed.ref{j}", e, s_ch + i_ch, p))
        for i in range(m):
            c = cfg.width(i)
            hidden = max(c // 2, 8)
            embed.mix_tgt.append(self._mlp(f"embed.mix_tgt{i}", pooled, hidden, c, 3, 3))
            embed.mix_ref.append(self._mlp(f"embed.mix_ref{i}", pooled, hidden, c, 3, 3))
        coarse = cfg.resolution(m - 1)
        embed.pos_base = self.store.create(
            "pos.base",
            nm.uniform_init(self._rng, (cfg.pos_channels, coarse, coarse), fan_in=cfg.pos_channels),
        ).tensor
        embed.pos_up = [None] * m
        for i in range(m - 1):
            embed.pos_up[i] = self._conv(f"pos.up{i}", cfg.pos_channels, cfg.pos_channels, 3)
        self.embed = embed

        # attention logits are smoothness-scaled; shrink the projections so
        # initial logits stay O(1) instead of saturating the softmax
        attn_scale = 1.0 / np.sqrt(cfg.smoothness)
        self.blocks: dict[tuple[int, int], BlockParams] = {}
        self.shared_prune: dict[int, PruneHead] = {}
        for i in range(m):
            c = cfg.width(i)
            d_pos = c + cfg.pos_channels
            if cfg.share_prune_heads and self._scale_prunes(i):
                self.shared_prune[i] = PruneHead(
                    tgt_mlp=self._mlp(f"scale{i}.prune.tgt", c, c, c, 1, 1,
                                      final_bias=cfg.prune_bias_init),
                    ref_mlp=self._mlp(f"scale{i}.prune.ref", c, c, c, 1, 1,
                                      final_bias=cfg.prune_bias_init),
                )
            for j in range(1, cfg.blocks_at(i) + 1):
                name = f"scale{i}.block{j}"
                # both match-space outputs carry the keep-bias: a one-sided
                # shift leaves the inner product zero-centered and randomly
                # masks a quarter of the links at init, which starves matching
                prune = None
                if self._scale_prunes(i):
                    if cfg.share_prune_heads:
                        prune = self.shared_prune[i]
                    else:
                        prune = PruneHead(
                            tgt_mlp=self._mlp(f"{name}.prune.tgt", c, c, c, 1, 1,
                                              final_bias=cfg.prune_bias_init),
                            ref_mlp=self._mlp(f"{name}.prune.ref", c, c, c, 1, 1,
                                              final_bias=cfg.prune_bias_init),
                        )
                # bias-free projections: a key bias is a per-row constant shift,
                # invisible to the softmax; literal "convolutional kernels"
                sp_hidden = max(c // 2, 8)
                self.blocks[(i, j)] = BlockParams(
                    query_proj=self._conv(f"{name}.query_proj", c, d_pos, 1,
                                          scale=attn_scale, bias=False),
                    key_proj=self._conv(f"{name}.key_proj", c, d_pos, 1,
                                        scale=attn_scale, bias=False),
                    value_proj=self._conv(f"{name}.value_proj", c, c, 1),
                    spade=SpadeParams(
                        gamma_net=self._mlp(f"{name}.spade.gamma", s_ch, sp_hidden, c, 3, 1),
                        beta_net=self._mlp(f"{name}.spade.beta", s_ch, sp_hidden, c, 3, 1),
                    ),
                    prune=prune,
                    agg_norm=self._norm(f"{name}.agg_norm", c),
                    ffn=self._mlp(f"{name}.ffn", c, c, c, 3, 3),
                    ffn_norm=self._norm(f"{name}.ffn_norm", c),
                )

        self.bridge: dict[int, ConvParams] = {}
        for i in range(m - 1):
            self.bridge[i] = self._conv(f"bridge{i}", cfg.width(i), cfg.width(i + 1), 1)
        total = sum(cfg.width(i) for i in range(m))
        dec_hidden = max(cfg.width(0) // 2, 8)
        self.dec_conv1 = self._conv("dec.conv1", dec_hidden, total, 3)
        self.dec_conv2 = self._conv("dec.conv2", cfg.image_channels, dec_hidden, 3)

    def _scale_prunes(self, scale: int) -> bool:
        cfg = self.cfg
        if cfg.disable_pruning or not cfg.matching_enabled(scale):
            return False
        if scale == cfg.num_scales - 1:
            return cfg.prune_dense_blocks
        return True

    # -- forward ------------------------------------------------------------

    def forward(self, s_tgt: Tensor, s_ref: Tensor, i_ref: Tensor,
                frozen: Optional[dict] = None) -> ModelOutput:
        """Full generator pass for one sample; inputs are [C, H, W] in [0, 1].

        frozen: optional {(scale, block): (CandidateSet, gates or None)} that
        pins the discrete structure (candidates and prune gates), making the
        forward a smooth function of the parameters for gradient checking.
        """
        cfg = self.cfg
        self._validate_inputs(s_tgt, s_ref, i_ref)
        feats = embed_multiscale(s_tgt, s_ref, i_ref, cfg, self.embed)

        plan: dict = {}
        outputs: list[BlockOutput] = []
        last_attn: dict[int, SparseAttentionMap] = {}
        s_resized: dict[int, Tensor] = {}
        f: Optional[Tensor] = None
        for scale in range(cfg.num_scales - 1, -1, -1):
            side = cfg.resolution(scale)
            s_resized[scale] = nm.bilinear_resize(s_tgt, side, side)
            if scale == cfg.num_scales - 1:
                f = feats.tgt[scale]
            else:
                up = nm.bilinear_resize(f, side, side)
                bridge = self.bridge[scale]
                f = nm.add(feats.tgt[scale], nm.conv2d(up, bridge.weight, bridge.bias))
            prev_attn: Optional[SparseAttentionMap] = None
            for j in range(1, cfg.blocks_at(scale) + 1):
                f, attn = self._run_block(
                    scale, j, f, feats, s_resized[scale], last_attn, prev_attn, frozen, plan
                )
                prev_attn = attn if attn is not None else prev_attn
                outputs.append(BlockOutput(scale=scale, index=j, features=f, attn=attn))
            if prev_attn is not None:
                last_attn[scale] = prev_attn

        image = decode(
            [outputs_by_scale(outputs, i)[-1].features for i in range(cfg.num_scales)],
            self.dec_conv1,
            self.dec_conv2,
        )
        nm.check_finite(image.data, "generated image")
        return ModelOutput(image=image, blocks=outputs, plan=plan)

    def _run_block(self, scale, j, f, feats, s_res, last_attn, prev_attn, frozen, plan):
        cfg = self.cfg
        params = self.blocks[(scale, j)]
        key = (scale, j)
        attn: Optional[SparseAttentionMap] = None

        if cfg.matching_enabled(scale):
            f_pos = attach_position(f, feats.pos[scale])
            ref_pos = attach_position(feats.ref[scale], feats.pos[scale])
            if scale == cfg.num_scales - 1:
                attn = dense_attention(f_pos, ref_pos, params.query_proj,
                                       params.key_proj, cfg.smoothness)
            else:
                if frozen is not None and key in frozen:
                    cands = frozen[key][0]
                else:
                    side = cfg.resolution(scale)
                    if j == 1 or cfg.replace_inner_with_inter:
                        cands = inherit_candidates_interscale(
                            last_attn[scale + 1], cfg.top_k, (side, side),
                            use_pruned=cfg.topk_on_pruned,
                        )
                    else:
                        cands = propagate_candidates_innerscale(
                            prev_attn, cfg.top_k, (side, side),
                            use_pruned=cfg.topk_on_pruned,
                        )
                attn = sparse_attention(f_pos, ref_pos, cands, params.query_proj,
                                        params.key_proj, cfg.smoothness)

            decisions = None
            if frozen is not None and key in frozen:
                gates = frozen[key][1]
                decisions = frozen_decision(gates) if gates is not None else None
            elif params.prune is not None:
                logits = prune_logits(f, feats.ref[scale], attn.candidates, params.prune)
                decisions = prune_decision(logits)
            attn.decisions = decisions
            attn.pruned = apply_prune(attn.weights, decisions)
            plan[key] = (attn.candidates, decisions.data if decisions is not None else None)

        f2 = aggregate_features(f, feats.ref[scale], attn, s_res,
                                params.value_proj, params.spade, params.agg_norm)
        f3 = ffn_residual(f2, params.ffn, params.ffn_norm)
        return f3, attn

    def _validate_inputs(self, s_tgt, s_ref, i_ref):
        cfg = self.cfg
        res = cfg.finest_resolution
        shapes = {
            "s_tgt": (cfg.semantic_channels, res, res),
            "s_ref": (cfg.semantic_channels, res, res),
            "i_ref": (cfg.image_channels, res, res),
        }
        for name, tensor in (("s_tgt", s_tgt), ("s_ref", s_ref), ("i_ref", i_ref)):
            if tensor.data.shape != shapes[name]:
                raise ValidationError(
                    f"{name} shape {tensor.data.shape}, expected {shapes[name]}"
                )
            if tensor.data.min() < -1e-9 or tensor.data.max() > 1 + 1e-9:
                raise ValidationError(f"{name} values outside [0, 1]")
            nm.check_finite(tensor.data, name)

    # -- state access ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.store}

    def load_state(self, arrays: dict[str, np.ndarray]):
        mine = self.state_arrays()
        missing = set(mine) - set(arrays)
        extra = set(arrays) - set(mine)
        if missing or extra:
            raise ValidationError(
                f"checkpoint/model parameter mismatch: missing={sorted(missing)[:3]} "
                f"extra={sorted(extra)[:3]}"
            )
        for name, arr in arrays.items():
            if mine[name].shape != arr.shape:
                raise ValidationError(
                    f"checkpoint shape mismatch for {name}: {arr.shape} vs {mine[name].shape}"
                )
            self.store[name].tensor.data = np.array(arr, dtype=np.float64)


def outputs_by_scale(outputs: list[BlockOutput], scale: int) -> list[BlockOutput]:
    return [b for b in outputs if b.scale == scale]
