"""Warp construction, matching loss, task losses, and the total objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .attention import SparseAttentionMap
from .blocks import BlockOutput
from .numerics import Tensor

WARP_EPS = 1e-8


@dataclass
class LossReport:
    total: float
    task: float
    matching: float
    per_block_matching: list[tuple[int, int, float]] = field(default_factory=list)
    adversarial: Optional[float] = None
    perceptual: Optional[float] = None


def _flatten_map(x: Tensor) -> Tensor:
    c, h, w = x.data.shape
    return nm.transpose(nm.reshape(x, (c, h * w)), (1, 0))


# ---------------------------------------------------------------------------
# warp matrices

def warp_matrix(attn: SparseAttentionMap, eps: float = WARP_EPS) -> Tensor:
    """Decision-masked, renormalized correlation rows.

    exp is taken in the row-max shifted domain so smoothness-scaled scores
    cannot overflow; the epsilon keeps fully pruned rows at exactly zero.
    Padded slots carry garbage scores, so they are pushed to -inf inside the
    exponent: otherwise exp(garbage) leaks enormous values into the gate
    gradient even though the forward masks them.
    """
    scores = attn.scores
    valid = attn.candidates.valid if not attn.candidates.is_full else None
    data = scores.data
    if valid is not None:
        shifted_src = np.where(valid, data, -np.inf)
    else:
        shifted_src = data
    rowmax = shifted_src.max(axis=1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)

    shifted = nm.sub(scores, rowmax)
    if valid is not None:
        valid_f = valid.astype(data.dtype)
        shifted = nm.sub(nm.mul(shifted, valid_f), 50.0 * (1.0 - valid_f))
    e = nm.exp(shifted)
    gate = None
    if valid is not None:
        gate = valid.astype(data.dtype)
    if attn.decisions is not None:
        gate = attn.decisions if gate is None else nm.mul(attn.decisions, gate)
    masked = e if gate is None else nm.mul(e, gate)
    denom = nm.add(nm.reduce_sum(masked, axis=1, keepdims=True), eps)
    return nm.div(masked, denom)


def warp_reference(w: Tensor, i_ref_resized: Tensor, attn: SparseAttentionMap) -> Tensor:
    """Reconstruct the target as a weighted gather of reference pixels -> [Nq, C]."""
    ref_flat = _flatten_map(i_ref_resized)
    if attn.candidates.is_full:
        return nm.matmul(w, ref_flat)
    return nm.weighted_gather_sum(w, ref_flat, attn.candidates.idx)


def warp_image(w: Tensor, i_ref_resized: Tensor, attn: SparseAttentionMap) -> Tensor:
    """Warp and reshape back to [C, h, w] at the block's grid."""
    h, wid = attn.candidates.ref_hw
    flat = warp_reference(w, i_ref_resized, attn)
    return nm.reshape(nm.transpose(flat), (flat.data.shape[1], h, wid))


def matching_loss(
    blocks: list[BlockOutput], i_ref: Tensor, i_tgt: Tensor
) -> tuple[Tensor, list[tuple[int, int, float]]]:
    """Sum over blocks of the MSE between warp-reconstructed and true targets."""
    terms: list[tuple[int, int, float]] = []
    total: Optional[Tensor] = None
    resized: dict[int, tuple[Tensor, Tensor]] = {}
    for block in blocks:
        if block.attn is None:
            continue
        h, w = block.attn.candidates.ref_hw
        if h not in resized:
            resized[h] = (
                nm.bilinear_resize(i_ref, h, w),
                nm.bilinear_resize(i_tgt, h, w),
            )
        ref_r, tgt_r = resized[h]
        wmat = warp_matrix(block.attn)
        warped = warp_reference(wmat, ref_r, block.attn)
        term = nm.reduce_mean(nm.square(nm.sub(warped, _flatten_map(tgt_r))))
        terms.append((block.scale, block.index, float(term.data)))
        total = term if total is None else nm.add(total, term)
    if total is None:
        raise ValueError("matching_loss: no block carries an attention map")
    return total, terms


# ---------------------------------------------------------------------------
# fixed feature extractor (pretrained-backbone stand-in)

class FeatureExtractor:
    """Frozen seeded conv pyramid with four taps at strides 1, 2, 4, 8.

    Weights are deterministic in the seed and never trained; gradients still
    flow through to the input image. Any object with a compatible ``taps``
    method can stand in (e.g. one backed by a real pretrained network).
    """

    WIDTHS = (8, 16, 32, 64)

    def __init__(self, in_channels: int = 3, seed: int = 12345):
        rng = nm.make_rng(seed)
        self.filters: list[Tensor] = []
        self.biases: list[Tensor] = []
        cin = in_channels
        for width in self.WIDTHS:
            fan = cin * 9
            self.filters.append(Tensor(nm.uniform_init(rng, (width, cin, 3, 3), fan_in=fan)))
            self.biases.append(Tensor(rng.uniform(-0.1, 0.1, size=width)))
            cin = width

    def taps(self, img: Tensor) -> list[Tensor]:
        out = []
        h = img
        for stage, (w, b) in enumerate(zip(self.filters, self.biases)):
            stride = 1 if stage == 0 else 2
            h = nm.relu(nm.conv2d(h, w, b, stride=stride, padding=1))
            out.append(h)
        return out


def channel_stats(feat: Tensor) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and (population) standard deviation."""
    mean = nm.reduce_mean(feat, axis=(1, 2))
    c = feat.data.shape[0]
    centered = nm.sub(feat, nm.reshape(mean, (c, 1, 1)))
    var = nm.reduce_mean(nm.square(centered), axis=(1, 2))
    return mean, nm.sqrt(var)


def perceptual_terms(taps_a: list[Tensor], taps_b: list[Tensor], weights) -> Optional[Tensor]:
    """Weighted MSE over matching feature taps; None when all weights vanish."""
    total: Optional[Tensor] = None
    for w, a, b in zip(weights, taps_a, taps_b):
        if w == 0:
            continue
        term = nm.mul(nm.reduce_mean(nm.square(nm.sub(a, b))), w)
        total = term if total is None else nm.add(total, term)
    return total


def supervised_task_loss(
    gen_img: Tensor,
    target_img: Tensor,
    s_tgt: Tensor,
    extractor,
    perceptual_weights=(1 / 32, 1 / 16, 1 / 8, 1 / 4),
    discriminator=None,
    adv_weight: float = 0.0,
) -> tuple[Tensor, dict]:
    """Pixel MSE + weighted perceptual MSE + optional adversarial term."""
    mse = nm.reduce_mean(nm.square(nm.sub(gen_img, target_img)))
    total = mse
    parts = {"mse": float(mse.data)}
    perc = perceptual_terms(
        extractor.taps(gen_img), extractor.taps(target_img), perceptual_weights
    )
    if perc is not None:
        total = nm.add(total, perc)
        parts["perceptual"] = float(perc.data)
    if adv_weight > 0 and discriminator is not None:
        score = discriminator.forward(s_tgt, gen_img)
        adv = nm.neg(nm.reduce_mean(nm.log(nm.add(score, 1e-8))))
        total = nm.add(total, nm.mul(adv, adv_weight))
        parts["adversarial"] = float(adv.data)
    return total, parts


def style_task_loss(
    i_cs: Tensor, i_c: Tensor, i_s: Tensor, extractor, style_weight: float = 3.0
) -> tuple[Tensor, dict]:
    """Content match on the deepest tap plus channel-statistics style match."""
    taps_cs = extractor.taps(i_cs)
    taps_c = extractor.taps(i_c)
    taps_s = extractor.taps(i_s)
    content = nm.reduce_mean(nm.square(nm.sub(taps_cs[-1], taps_c[-1])))
    style: Optional[Tensor] = None
    for a, b in zip(taps_cs, taps_s):
        mu_a, sd_a = channel_stats(a)
        mu_b, sd_b = channel_stats(b)
        term = nm.add(
            nm.reduce_mean(nm.square(nm.sub(mu_a, mu_b))),
            nm.reduce_mean(nm.square(nm.sub(sd_a, sd_b))),
        )
        style = term if style is None else nm.add(style, term)
    total = nm.add(content, nm.mul(style, style_weight))
    return total, {"content": float(content.data), "style": float(style.data)}


# ---------------------------------------------------------------------------
# total objective

def total_loss(
    task: Tensor,
    matching: Optional[Tensor],
    match_weight: float,
    per_block: Optional[list[tuple[int, int, float]]] = None,
    task_parts: Optional[dict] = None,
) -> tuple[Tensor, LossReport]:
    if matching is not None and match_weight != 0:
        total = nm.add(task, nm.mul(matching, match_weight))
        match_val = float(matching.data)
    else:
        total = task
        match_val = float(matching.data) if matching is not None else 0.0
    parts = task_parts or {}
    report = LossReport(
        total=float(total.data),
        task=float(task.data),
        matching=match_val,
        per_block_matching=list(per_block or []),
        adversarial=parts.get("adversarial"),
        perceptual=parts.get("perceptual"),
    )
    return total, report


# ---------------------------------------------------------------------------
# patch discriminator (alternating adversarial training, off by default)

class PatchDiscriminator:
    """Three-layer conv classifier over [semantic, image] channel stacks."""

    def __init__(self, semantic_channels: int = 1, image_channels: int = 3, seed: int = 777):
        rng = nm.make_rng(seed)
        self.store = nm.ParameterStore()
        cin = semantic_channels + image_channels
        spec = [(16, 3, 2), (32, 3, 2), (1, 1, 1)]
        self.layers = []
        for li, (cout, k, stride) in enumerate(spec):
            w = self.store.create(
                f"disc.conv{li}.weight",
                nm.uniform_init(rng, (cout, cin, k, k), fan_in=cin * k * k),
            )
            b = self.store.create(f"disc.conv{li}.bias", np.zeros(cout))
            self.layers.append((w.tensor, b.tensor, stride, k))
            cin = cout

    def forward(self, s_tgt: Tensor, img: Tensor) -> Tensor:
        h = nm.channel_concat([s_tgt, img])
        for li, (w, b, stride, k) in enumerate(self.layers):
            pad = 1 if k == 3 else 0
            h = nm.conv2d(h, w, b, stride=stride, padding=pad)
            if li < len(self.layers) - 1:
                h = nm.leaky_relu(h, 0.2)
        return nm.sigmoid(h)


def discriminator_loss(real_score: Tensor, fake_score: Tensor) -> Tensor:
    real = nm.neg(nm.reduce_mean(nm.log(nm.add(real_score, 1e-8))))
    fake = nm.neg(nm.reduce_mean(nm.log(nm.add(nm.sub(1.0, fake_score), 1e-8))))
    return nm.add(real, fake)
