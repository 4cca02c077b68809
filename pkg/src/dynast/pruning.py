"""Learned binary keep/drop gates over attention links.

The forward gate is a hard sign threshold; the backward pass substitutes the
sigmoid derivative so the gate stays trainable (straight-through estimator).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .attention import CandidateSet
from .embedding import MlpParams
from .numerics import Tensor


@dataclass
class PruneHead:
    """Two pointwise MLPs projecting target/reference features to match space."""

    tgt_mlp: MlpParams
    ref_mlp: MlpParams


def _mlp_1x1(x: Tensor, mlp: MlpParams) -> Tensor:
    h = nm.relu(nm.conv2d(x, mlp.conv1.weight, mlp.conv1.bias))
    return nm.conv2d(h, mlp.conv2.weight, mlp.conv2.bias)


def _flatten(x: Tensor) -> Tensor:
    c, h, w = x.data.shape
    return nm.transpose(nm.reshape(x, (c, h * w)), (1, 0))


def prune_logits(
    f_tgt: Tensor, f_ref: Tensor, candidates: CandidateSet, head: PruneHead
) -> Tensor:
    """Match-space inner products, computed only on candidate slots.

    Consumes the plain feature maps, not the position-concatenated ones.
    """
    t = _flatten(_mlp_1x1(f_tgt, head.tgt_mlp))
    r = _flatten(_mlp_1x1(f_ref, head.ref_mlp))
    if candidates.is_full:
        return nm.matmul(t, nm.transpose(r))
    gathered = nm.gather_rows(r, candidates.idx)
    return nm.rows_dot(t, gathered)


def sigmoid_surrogate_grad(p: np.ndarray) -> np.ndarray:
    """d(gate)/d(logit) used in the backward pass: exp(-p) / (1 + exp(-p))^2."""
    s = 1.0 / (1.0 + np.exp(-np.asarray(p, dtype=np.float64)))
    return s * (1.0 - s)


def prune_decision(p: Tensor, straight_through: bool = True) -> Tensor:
    """Hard gate: 1 where the logit is strictly positive, else 0.

    With straight_through, gradients flow to the logits via the sigmoid
    derivative; otherwise the gate is a constant.
    """
    gate = (p.data > 0).astype(p.data.dtype)
    if not straight_through:
        return Tensor(gate)
    surrogate = sigmoid_surrogate_grad(p.data).astype(p.data.dtype)

    def bw(g):
        nm._accumulate(p, g * surrogate)

    return nm.make_node(gate, (p,), bw)


def prune_backward(p: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient wrt the logits given the gradient wrt the gate values."""
    return np.asarray(upstream) * sigmoid_surrogate_grad(p)


def frozen_decision(gate_data: np.ndarray) -> Tensor:
    """Constant gate used when checking gradients with the discrete part fixed."""
    return Tensor(gate_data)


def apply_prune(weights: Tensor, decisions: Optional[Tensor]) -> Tensor:
    """Mask attention weights with the gate; None means keep everything."""
    if decisions is None:
        return weights
    if decisions.data.shape != weights.data.shape:
        raise nm.ShapeError(
            f"apply_prune shape mismatch: {decisions.data.shape} vs {weights.data.shape}"
        )
    return nm.mul(decisions, weights)
