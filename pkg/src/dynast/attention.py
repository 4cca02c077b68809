"""Dense and candidate-restricted sparse attention with cross-scale propagation.

Finer scales never score every reference position: candidates are inherited
from the coarser scale's top-k matches (each coarse point owning four fine
children) or propagated from neighbours under a shared-offset assumption.
All selection is deterministic; ties break toward the smallest reference
index so golden tests are stable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .embedding import ConvParams
from .numerics import Tensor


class WorkCounters:
    """Instrumentation for complexity claims: exact MACs and candidate storage."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.attention_macs = 0
        self.peak_candidate_storage = 0

    def count_attention(self, score_slots: int, depth: int):
        self.attention_macs += score_slots * (depth + 1)

    def note_candidate_storage(self, n_indices: int):
        self.peak_candidate_storage = max(self.peak_candidate_storage, n_indices)


counters = WorkCounters()


@dataclass
class CandidateSet:
    """Per-query reference indices, padded rectangular for cache-linear gathers.

    idx is None for the dense (all positions) case.
    """

    idx: Optional[np.ndarray]    # [Nq, cap] int64
    valid: Optional[np.ndarray]  # [Nq, cap] bool
    ref_hw: tuple[int, int]
    n_queries: int

    @property
    def is_full(self) -> bool:
        return self.idx is None

    @property
    def n_ref(self) -> int:
        return self.ref_hw[0] * self.ref_hw[1]

    @property
    def capacity(self) -> int:
        return self.n_ref if self.idx is None else self.idx.shape[1]

    def counts(self) -> np.ndarray:
        if self.idx is None:
            return np.full(self.n_queries, self.n_ref, dtype=np.int64)
        return self.valid.sum(axis=1)

    def storage_indices(self) -> int:
        return self.n_queries * self.capacity

    @staticmethod
    def full(n_queries: int, ref_hw: tuple[int, int]) -> "CandidateSet":
        cs = CandidateSet(idx=None, valid=None, ref_hw=ref_hw, n_queries=n_queries)
        counters.note_candidate_storage(0)
        return cs

    @staticmethod
    def full_materialized(n_queries: int, ref_hw: tuple[int, int]) -> "CandidateSet":
        """Explicit index array covering every reference position (test oracle)."""
        n_ref = ref_hw[0] * ref_hw[1]
        idx = np.tile(np.arange(n_ref, dtype=np.int64), (n_queries, 1))
        valid = np.ones((n_queries, n_ref), dtype=bool)
        return CandidateSet(idx=idx, valid=valid, ref_hw=ref_hw, n_queries=n_queries)


@dataclass
class SparseAttentionMap:
    """Attention state of one block: candidates, raw scores, weights, gates."""

    candidates: CandidateSet
    scores: Tensor                    # pre-softmax, smoothness-scaled
    weights: Tensor                   # post-softmax
    decisions: Optional[Tensor] = None  # binary keep gates; None = all kept
    pruned: Optional[Tensor] = None     # decisions * weights

    @property
    def kept_weights(self) -> Tensor:
        return self.pruned if self.pruned is not None else self.weights


@dataclass
class TopKResult:
    idx: np.ndarray      # [Nq, k] reference indices, padded with 0
    valid: np.ndarray    # [Nq, k]
    short: bool          # some query had fewer than k candidates


def attention_to_dense(attn: SparseAttentionMap) -> np.ndarray:
    """Scatter the kept weights into a dense [Nq, Nref] array (for dumps)."""
    kept = attn.kept_weights.data
    cs = attn.candidates
    if cs.is_full:
        return np.array(kept)
    out = np.zeros((cs.n_queries, cs.n_ref), dtype=kept.dtype)
    rows = np.repeat(np.arange(cs.n_queries), cs.capacity).reshape(cs.idx.shape)
    np.add.at(out, (rows[cs.valid], cs.idx[cs.valid]), kept[cs.valid])
    return out


def save_attention_map(path, attn: SparseAttentionMap):
    """Dump the dense scatter of the kept weights as one tensor record."""
    from .numerics import save_tensor_file
    save_tensor_file(path, attention_to_dense(attn))


def _flatten_map(x: Tensor) -> Tensor:
    """[C, H, W] -> [H*W, C]."""
    c, h, w = x.data.shape
    return nm.transpose(nm.reshape(x, (c, h * w)), (1, 0))


def _project(feat_pos: Tensor, proj: ConvParams) -> Tensor:
    """Instance-normalize then 1x1-project, flattened to [N, d]."""
    return _flatten_map(nm.conv2d(nm.instance_norm(feat_pos), proj.weight, proj.bias))


def dense_attention(
    f_tgt_pos: Tensor,
    f_ref_pos: Tensor,
    query_proj: ConvParams,
    key_proj: ConvParams,
    smoothness: float,
) -> SparseAttentionMap:
    """Every query scores every reference position (coarsest scale only)."""
    if f_tgt_pos.data.shape[0] != f_ref_pos.data.shape[0]:
        raise nm.ShapeError(
            f"dense_attention channel mismatch: {f_tgt_pos.data.shape} vs {f_ref_pos.data.shape}"
        )
    q = _project(f_tgt_pos, query_proj)
    k = _project(f_ref_pos, key_proj)
    scores = nm.mul(nm.matmul(q, nm.transpose(k)), smoothness)
    weights = nm.softmax_rows(scores)
    n_q, n_ref = scores.data.shape
    counters.count_attention(n_q * n_ref, q.data.shape[1])
    cands = CandidateSet.full(n_q, (f_ref_pos.data.shape[1], f_ref_pos.data.shape[2]))
    return SparseAttentionMap(candidates=cands, scores=scores, weights=weights)


def sparse_attention(
    f_tgt_pos: Tensor,
    f_ref_pos: Tensor,
    candidates: CandidateSet,
    query_proj: ConvParams,
    key_proj: ConvParams,
    smoothness: float,
) -> SparseAttentionMap:
    """Score only the candidate slots of each query."""
    if candidates.is_full:
        out = dense_attention(f_tgt_pos, f_ref_pos, query_proj, key_proj, smoothness)
        out.candidates = candidates
        return out
    h, w = f_ref_pos.data.shape[1], f_ref_pos.data.shape[2]
    if (h, w) != candidates.ref_hw:
        raise nm.ShapeError(
            f"candidate grid {candidates.ref_hw} vs reference map {(h, w)}"
        )
    if candidates.idx.max(initial=0) >= candidates.n_ref:
        raise nm.ShapeError("candidate index out of range")
    q = _project(f_tgt_pos, query_proj)
    k = _project(f_ref_pos, key_proj)
    gathered = nm.gather_rows(k, candidates.idx)
    scores = nm.mul(nm.rows_dot(q, gathered), smoothness)
    weights = nm.softmax_rows(scores, mask=candidates.valid)
    counters.count_attention(int(candidates.valid.sum()), q.data.shape[1])
    counters.note_candidate_storage(candidates.storage_indices())
    return SparseAttentionMap(candidates=candidates, scores=scores, weights=weights)


# ---------------------------------------------------------------------------
# top-k selection

def topk_select(attn: SparseAttentionMap, k: int, use_pruned: bool = False) -> TopKResult:
    """Reference indices of the k largest weights per query.

    Deterministic: ties break toward the smallest reference index. Queries
    with fewer than k valid candidates return a short, flagged list.
    """
    values = (attn.pruned if use_pruned and attn.pruned is not None else attn.weights).data
    cs = attn.candidates
    if cs.is_full:
        order = np.argsort(-values, axis=1, kind="stable")[:, :k]
        n_avail = values.shape[1]
        if n_avail >= k:
            return TopKResult(idx=order.astype(np.int64), valid=np.ones(order.shape, bool), short=False)
        pad = np.zeros((values.shape[0], k), dtype=np.int64)
        pad[:, :n_avail] = order
        valid = np.zeros((values.shape[0], k), dtype=bool)
        valid[:, :n_avail] = True
        return TopKResult(idx=pad, valid=valid, short=True)

    big = cs.n_ref
    ref_idx = np.where(cs.valid, cs.idx, big)
    # order slots by reference index first, then stable-sort by descending
    # weight: equal weights keep ascending index order
    ord_by_idx = np.argsort(ref_idx, axis=1, kind="stable")
    vals_sorted = np.take_along_axis(np.where(cs.valid, values, -np.inf), ord_by_idx, axis=1)
    idx_sorted = np.take_along_axis(ref_idx, ord_by_idx, axis=1)
    ord_by_val = np.argsort(-vals_sorted, axis=1, kind="stable")[:, :k]
    top_idx = np.take_along_axis(idx_sorted, ord_by_val, axis=1)
    top_valid = top_idx < big
    counts = cs.counts()
    short = bool(np.any(counts < k))
    top_idx = np.where(top_valid, top_idx, 0)
    return TopKResult(idx=top_idx.astype(np.int64), valid=top_valid, short=short)


# ---------------------------------------------------------------------------
# index arithmetic across scales

def upscale_index(coarse_index: int, coarse_w: int) -> tuple[int, int, int, int]:
    """The four fine-grid children of one coarse flat index (fine side = 2x)."""
    if coarse_index < 0:
        raise nm.ShapeError(f"negative coarse index {coarse_index}")
    r, c = divmod(coarse_index, coarse_w)
    fine_w = 2 * coarse_w
    base = 2 * r * fine_w + 2 * c
    return (base, base + 1, base + fine_w, base + fine_w + 1)


def _upscale_indices(idx: np.ndarray, coarse_w: int) -> np.ndarray:
    """Vectorized children expansion: [...,] -> [..., 4]."""
    r, c = np.divmod(idx, coarse_w)
    fine_w = 2 * coarse_w
    base = 2 * r * fine_w + 2 * c
    return np.stack([base, base + 1, base + fine_w, base + fine_w + 1], axis=-1)


def _dedup_pad(idx: np.ndarray, valid: np.ndarray, n_ref: int):
    """Drop duplicate indices per row, keeping first occurrence order."""
    big = n_ref
    work = np.where(valid, idx, big)
    order = np.argsort(work, axis=1, kind="stable")
    sorted_vals = np.take_along_axis(work, order, axis=1)
    first = np.ones_like(valid)
    first[:, 1:] = sorted_vals[:, 1:] != sorted_vals[:, :-1]
    keep_sorted = first & (sorted_vals < big)
    keep = np.zeros_like(valid)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    compact = np.argsort(~keep, axis=1, kind="stable")
    new_idx = np.take_along_axis(np.where(keep, idx, 0), compact, axis=1)
    new_valid = np.take_along_axis(keep, compact, axis=1)
    return new_idx.astype(np.int64), new_valid


def inherit_candidates_interscale(
    prev_attn: SparseAttentionMap,
    k: int,
    fine_hw: tuple[int, int],
    use_pruned: bool = False,
) -> CandidateSet:
    """Fine-scale candidates: children of the parent query's top-k matches."""
    coarse_h, coarse_w = prev_attn.candidates.ref_hw
    fine_h, fine_w = fine_hw
    if (fine_h, fine_w) != (2 * coarse_h, 2 * coarse_w):
        raise nm.ShapeError(f"fine grid {fine_hw} is not 2x coarse grid {(coarse_h, coarse_w)}")
    top = topk_select(prev_attn, k, use_pruned=use_pruned)

    rows = np.arange(fine_h)[:, None] // 2
    cols = np.arange(fine_w)[None, :] // 2
    parent = (rows * coarse_w + cols).reshape(-1)  # [Nq_fine]

    parent_top = top.idx[parent]        # [Nq_fine, k]
    parent_valid = top.valid[parent]
    children = _upscale_indices(parent_top, coarse_w).reshape(parent.shape[0], -1)
    valid = np.repeat(parent_valid, 4, axis=1)
    idx, valid = _dedup_pad(children, valid, fine_h * fine_w)
    cs = CandidateSet(idx=idx, valid=valid, ref_hw=fine_hw, n_queries=parent.shape[0])
    counters.note_candidate_storage(cs.storage_indices())
    return cs


_NEIGHBOR_OFFSETS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))  # self, up, down, left, right


def propagate_candidates_innerscale(
    prev_attn: SparseAttentionMap,
    k: int,
    hw: tuple[int, int],
    use_pruned: bool = False,
) -> CandidateSet:
    """Same-scale candidates: neighbours' matches shifted by the shared offset.

    For query p and in-bounds neighbour n = p + o, each of n's top-k matches m
    proposes m - o (the point with the same matching offset); out-of-bounds
    proposals are dropped.
    """
    h, w = hw
    if prev_attn.candidates.n_queries != h * w:
        raise nm.ShapeError(
            f"previous attention has {prev_attn.candidates.n_queries} queries, grid {hw}"
        )
    top = topk_select(prev_attn, k, use_pruned=use_pruned)
    kk = top.idx.shape[1]
    ref_h, ref_w = prev_attn.candidates.ref_hw
    m_r = (top.idx // ref_w).reshape(h, w, kk)
    m_c = (top.idx % ref_w).reshape(h, w, kk)
    m_ok = top.valid.reshape(h, w, kk)

    groups_idx = []
    groups_valid = []
    for dr, dc in _NEIGHBOR_OFFSETS:
        pr = np.arange(h)[:, None, None] + dr
        pc = np.arange(w)[None, :, None] + dc
        inb = (pr >= 0) & (pr < h) & (pc >= 0) & (pc < w)
        nr = np.clip(pr, 0, h - 1)
        nc = np.clip(pc, 0, w - 1)
        prop_r = m_r[nr, nc, np.arange(kk)[None, None, :]] - dr
        prop_c = m_c[nr, nc, np.arange(kk)[None, None, :]] - dc
        ok = inb & m_ok[nr, nc, np.arange(kk)[None, None, :]]
        ok &= (prop_r >= 0) & (prop_r < ref_h) & (prop_c >= 0) & (prop_c < ref_w)
        flat = np.clip(prop_r, 0, ref_h - 1) * ref_w + np.clip(prop_c, 0, ref_w - 1)
        groups_idx.append(flat.reshape(h * w, kk))
        groups_valid.append(ok.reshape(h * w, kk))

    idx = np.concatenate(groups_idx, axis=1)
    valid = np.concatenate(groups_valid, axis=1)
    idx, valid = _dedup_pad(idx, valid, ref_h * ref_w)
    if not valid.any(axis=1).all():
        raise AssertionError("query with no candidate proposals; self neighbour must contribute")
    cs = CandidateSet(idx=idx, valid=valid, ref_hw=(ref_h, ref_w), n_queries=h * w)
    counters.note_candidate_storage(cs.storage_indices())
    return cs
