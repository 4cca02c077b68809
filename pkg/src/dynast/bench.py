"""Complexity benchmark: dense vs sparse attention cost over token counts."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import (
    CandidateSet,
    SparseAttentionMap,
    counters,
    dense_attention,
    propagate_candidates_innerscale,
    sparse_attention,
)
from .config import ValidationError
from .embedding import ConvParams
from .numerics import Tensor


@dataclass
class BenchEntry:
    kind: str            # "dense" | "sparse"
    n_tokens: int
    seconds: float
    macs: int
    candidate_storage: int


@dataclass
class BenchReport:
    k: int
    depth: int
    entries: list[BenchEntry] = field(default_factory=list)
    slope_dense: float = 0.0
    slope_sparse: float = 0.0

    def of_kind(self, kind: str) -> list[BenchEntry]:
        return sorted((e for e in self.entries if e.kind == kind), key=lambda e: e.n_tokens)


def dense_mac_formula(n_tokens: int, depth: int) -> int:
    """Closed-form score work for full attention: every pair costs depth+1."""
    return n_tokens * n_tokens * (depth + 1)


def sparse_mac_bound(n_tokens: int, k: int, depth: int) -> int:
    return n_tokens * 5 * k * (depth + 1)


def _grid_side(n_tokens: int) -> int:
    side = int(round(np.sqrt(n_tokens)))
    if side * side != n_tokens:
        raise ValidationError(f"token count {n_tokens} is not a square grid")
    return side


def _setup(n_tokens: int, depth: int, k: int, seed: int, dtype):
    rng = nm.make_rng(seed)
    side = _grid_side(n_tokens)
    feat = lambda: Tensor(rng.uniform(-1, 1, size=(depth, side, side)).astype(dtype))
    proj = lambda: ConvParams(
        weight=Tensor((rng.uniform(-1, 1, size=(depth, depth, 1, 1)) / np.sqrt(depth)).astype(dtype)),
        bias=Tensor(np.zeros(depth, dtype=dtype)),
    )
    tgt, ref = feat(), feat()
    qp, kp = proj(), proj()
    # steady-state previous attention: random sparse map to propagate from
    cap = 5 * k
    idx = rng.integers(0, n_tokens, size=(n_tokens, cap)).astype(np.int64)
    prev = SparseAttentionMap(
        candidates=CandidateSet(idx=idx, valid=np.ones((n_tokens, cap), bool),
                                ref_hw=(side, side), n_queries=n_tokens),
        scores=Tensor(rng.uniform(-1, 1, size=(n_tokens, cap)).astype(dtype)),
        weights=Tensor(rng.uniform(0, 1, size=(n_tokens, cap)).astype(dtype)),
    )
    return side, tgt, ref, qp, kp, prev


def bench_attention(n_list, k: int = 4, trials: int = 3, depth: int = 32,
                    seed: int = 0, dtype=np.float32) -> BenchReport:
    """Time dense attention vs the sparse path (candidates + restricted scores).

    Runs under a single BLAS thread for stable, comparable timings.
    """
    with nm.single_thread_blas():
        return _bench_attention(n_list, k, trials, depth, seed, dtype)


def _bench_attention(n_list, k, trials, depth, seed, dtype) -> BenchReport:
    report = BenchReport(k=k, depth=depth)
    for n in sorted(n_list):
        side, tgt, ref, qp, kp, prev = _setup(n, depth, k, seed, dtype)

        best = np.inf
        for _ in range(max(1, trials)):
            counters.reset()
            t0 = time.perf_counter()
            dense_attention(tgt, ref, qp, kp, smoothness=10.0)
            best = min(best, time.perf_counter() - t0)
        dense_macs = counters.attention_macs
        report.entries.append(BenchEntry("dense", n, best, dense_macs, 0))

        best = np.inf
        for _ in range(max(1, trials)):
            counters.reset()
            t0 = time.perf_counter()
            cands = propagate_candidates_innerscale(prev, k, (side, side))
            sparse_attention(tgt, ref, cands, qp, kp, smoothness=10.0)
            best = min(best, time.perf_counter() - t0)
        report.entries.append(
            BenchEntry("sparse", n, best, counters.attention_macs,
                       counters.peak_candidate_storage)
        )

    report.slope_dense = fit_loglog_slope(report.of_kind("dense"))
    report.slope_sparse = fit_loglog_slope(report.of_kind("sparse"))
    return report


def fit_loglog_slope(entries: list[BenchEntry]) -> float:
    if len(entries) < 2:
        return 0.0
    xs = np.log([e.n_tokens for e in entries])
    ys = np.log([max(e.seconds, 1e-9) for e in entries])
    return float(np.polyfit(xs, ys, 1)[0])


def write_report_csv(report: BenchReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "n_tokens", "seconds", "macs", "candidate_storage"])
        for e in sorted(report.entries, key=lambda e: (e.kind, e.n_tokens)):
            writer.writerow([e.kind, e.n_tokens, f"{e.seconds:.6e}", e.macs, e.candidate_storage])
        writer.writerow(["slope_dense", "", f"{report.slope_dense:.4f}", "", ""])
        writer.writerow(["slope_sparse", "", f"{report.slope_sparse:.4f}", "", ""])


def render_report_figure(report: BenchReport, path):
    """Log-log scaling plot written next to the delimited report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for kind, marker in (("dense", "o"), ("sparse", "s")):
        entries = report.of_kind(kind)
        if not entries:
            continue
        xs = [e.n_tokens for e in entries]
        ys = [e.seconds for e in entries]
        slope = report.slope_dense if kind == "dense" else report.slope_sparse
        ax.loglog(xs, ys, marker=marker, label=f"{kind} (slope {slope:.2f})")
    ax.set_xlabel("tokens")
    ax.set_ylabel("seconds per pass")
    ax.set_title(f"attention cost scaling, k={report.k}, depth={report.depth}")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
