"""Finite-difference validation of every registered differentiable path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .attention import CandidateSet, dense_attention, sparse_attention
from .blocks import DynastModel, NormParams, SpadeParams, aggregate_features, ffn_residual, spade_modulate
from .config import Config, ModelConfig, TrainSettings, ValidationError
from .data import gen_toy_dataset
from .embedding import ConvParams, MlpParams
from .losses import FeatureExtractor, matching_loss, supervised_task_loss, total_loss, warp_matrix
from .numerics import Tensor
from .pruning import PruneHead, prune_backward, prune_logits, sigmoid_surrogate_grad

GRAD_TOL = 1e-4


@dataclass
class CheckRow:
    name: str
    max_rel_err: float
    passed: bool
    note: str = ""


def _row(name, err, tol=GRAD_TOL, note=""):
    return CheckRow(name=name, max_rel_err=err, passed=err <= tol, note=note)


def _fd_vs_reverse(name, f, x: Tensor, rows: list[CheckRow], step: float = 1e-5):
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    numeric = nm.finite_difference_grad(f, x, step=step)
    rows.append(_row(name, nm.relative_error(analytic, numeric)))


def _rand(shape, seed, lo=-1.0, hi=1.0):
    return nm.make_rng(seed).uniform(lo, hi, size=shape)


def _conv_params(cout, cin, k, seed, scale=1.0):
    return ConvParams(
        weight=Tensor(_rand((cout, cin, k, k), seed) * scale / np.sqrt(cin * k * k),
                      requires_grad=True),
        bias=Tensor(_rand((cout,), seed + 1) * 0.1, requires_grad=True),
    )


def _mlp_params(cin, hidden, cout, k1, k2, seed):
    return MlpParams(conv1=_conv_params(hidden, cin, k1, seed),
                     conv2=_conv_params(cout, hidden, k2, seed + 10))


# ---------------------------------------------------------------------------
# scope: op

def check_ops(seed: int = 0) -> list[CheckRow]:
    rows: list[CheckRow] = []
    x = Tensor(_rand((3, 4), seed), requires_grad=True)
    r = Tensor(_rand((3, 4), seed + 1, lo=0.5, hi=1.5))
    for name, op in [
        ("relu", nm.relu), ("leaky_relu", lambda t: nm.leaky_relu(t, 0.2)),
        ("sigmoid", nm.sigmoid), ("tanh", nm.tanh), ("exp", nm.exp),
        ("square", nm.square), ("neg", nm.neg),
    ]:
        _fd_vs_reverse(name, lambda t, op=op: nm.reduce_sum(nm.mul(r, nm.square(op(t)))), x, rows)
    xp = Tensor(_rand((3, 4), seed + 2, lo=0.5, hi=2.0), requires_grad=True)
    _fd_vs_reverse("log", lambda t: nm.reduce_sum(nm.log(t)), xp, rows)
    _fd_vs_reverse("sqrt", lambda t: nm.reduce_sum(nm.sqrt(t)), xp, rows)

    a = Tensor(_rand((3, 4), seed + 3), requires_grad=True)
    b = Tensor(_rand((4, 2), seed + 4), requires_grad=True)
    _fd_vs_reverse("matmul.lhs", lambda t: nm.reduce_sum(nm.square(nm.matmul(t, b))), a, rows)
    _fd_vs_reverse("matmul.rhs", lambda t: nm.reduce_sum(nm.square(nm.matmul(a, t))), b, rows)

    for kind, (k, stride, pad) in {
        "conv2d.1x1": (1, 1, 0), "conv2d.3x3": (3, 1, 1),
        "conv2d.3x3s2": (3, 2, 1), "conv2d.patch": (2, 2, 0),
    }.items():
        xi = Tensor(_rand((2, 6, 6), seed + 5), requires_grad=True)
        wi = Tensor(_rand((3, 2, k, k), seed + 6), requires_grad=True)
        bi = Tensor(_rand((3,), seed + 7), requires_grad=True)
        _fd_vs_reverse(f"{kind}.input",
                       lambda t: nm.reduce_sum(nm.square(nm.conv2d(t, wi, bi, stride=stride, padding=pad))),
                       xi, rows)
        _fd_vs_reverse(f"{kind}.weight",
                       lambda t: nm.reduce_sum(nm.square(nm.conv2d(xi, t, bi, stride=stride, padding=pad))),
                       wi, rows)
        _fd_vs_reverse(f"{kind}.bias",
                       lambda t: nm.reduce_sum(nm.square(nm.conv2d(xi, wi, t, stride=stride, padding=pad))),
                       bi, rows)

    xn = Tensor(_rand((2, 3, 4), seed + 8), requires_grad=True)
    rn = Tensor(_rand((2, 3, 4), seed + 9, lo=0.5, hi=1.5))
    _fd_vs_reverse("instance_norm",
                   lambda t: nm.reduce_sum(nm.square(nm.mul(rn, nm.instance_norm(t)))), xn, rows)
    gain = Tensor(_rand((2,), seed + 10, lo=0.5, hi=1.5), requires_grad=True)
    bias = Tensor(_rand((2,), seed + 11), requires_grad=True)
    _fd_vs_reverse("layer_norm.input",
                   lambda t: nm.reduce_sum(nm.square(nm.layer_norm(t, gain, bias))), xn, rows)
    _fd_vs_reverse("layer_norm.gain",
                   lambda t: nm.reduce_sum(nm.square(nm.layer_norm(xn, t, bias))), gain, rows)

    z = Tensor(_rand((4, 5), seed + 12, lo=-3, hi=3), requires_grad=True)
    _fd_vs_reverse("softmax_rows",
                   lambda t: nm.reduce_sum(nm.square(nm.softmax_rows(t))), z, rows)
    mask = _rand((4, 5), seed + 13) > -0.2
    mask[:, 0] = True
    _fd_vs_reverse("softmax_rows.masked",
                   lambda t: nm.reduce_sum(nm.square(nm.softmax_rows(t, mask=mask))), z, rows)

    xr = Tensor(_rand((2, 4, 4), seed + 14), requires_grad=True)
    _fd_vs_reverse("bilinear_resize.up",
                   lambda t: nm.reduce_sum(nm.square(nm.bilinear_resize(t, 7, 6))), xr, rows)
    _fd_vs_reverse("bilinear_resize.down",
                   lambda t: nm.reduce_sum(nm.square(nm.bilinear_resize(t, 3, 2))), xr, rows)

    mat = Tensor(_rand((6, 3), seed + 15), requires_grad=True)
    idx = nm.make_rng(seed + 16).integers(0, 6, size=(4, 5))
    _fd_vs_reverse("gather_rows",
                   lambda t: nm.reduce_sum(nm.square(nm.gather_rows(t, idx))), mat, rows)
    q = Tensor(_rand((4, 3), seed + 17), requires_grad=True)
    kk = Tensor(_rand((4, 5, 3), seed + 18), requires_grad=True)
    _fd_vs_reverse("rows_dot.q", lambda t: nm.reduce_sum(nm.square(nm.rows_dot(t, kk))), q, rows)
    _fd_vs_reverse("rows_dot.k", lambda t: nm.reduce_sum(nm.square(nm.rows_dot(q, t))), kk, rows)
    wts = Tensor(_rand((4, 5), seed + 19), requires_grad=True)
    _fd_vs_reverse("weighted_gather_sum.w",
                   lambda t: nm.reduce_sum(nm.square(nm.weighted_gather_sum(t, mat, idx))), wts, rows)
    _fd_vs_reverse("weighted_gather_sum.mat",
                   lambda t: nm.reduce_sum(nm.square(nm.weighted_gather_sum(wts, t, idx))), mat, rows)

    # hard gate: checked against the defined surrogate, not finite differences
    p = _rand((3, 4), seed + 20, lo=-2, hi=2)
    upstream = _rand((3, 4), seed + 21)
    expect = upstream * sigmoid_surrogate_grad(p)
    got = prune_backward(p, upstream)
    rows.append(_row("prune_gate.surrogate", nm.relative_error(got, expect),
                     note="surrogate identity"))
    rows.append(_row("prune_gate.at_zero",
                     abs(sigmoid_surrogate_grad(np.zeros(1))[0] - 0.25)))
    return rows


# ---------------------------------------------------------------------------
# scope: block

def check_blocks(seed: int = 0) -> list[CheckRow]:
    rows: list[CheckRow] = []
    c, h, w = 3, 4, 4
    s_ch = 1
    feat = Tensor(_rand((c, h, w), seed), requires_grad=True)
    s_map = Tensor(_rand((s_ch, h, w), seed + 1, lo=0, hi=1))
    spade = SpadeParams(gamma_net=_mlp_params(s_ch, c, c, 3, 1, seed + 2),
                        beta_net=_mlp_params(s_ch, c, c, 3, 1, seed + 4))
    _fd_vs_reverse("spade_modulate.feat",
                   lambda t: nm.reduce_sum(nm.square(spade_modulate(t, s_map, spade))), feat, rows)
    _fd_vs_reverse("spade_modulate.gamma",
                   lambda t: nm.reduce_sum(nm.square(spade_modulate(feat, s_map, spade))),
                   spade.gamma_net.conv2.weight, rows)

    ffn = _mlp_params(c, c, c, 3, 3, seed + 6)
    norm = NormParams(gain=Tensor(np.ones(c), requires_grad=True),
                      bias=Tensor(np.zeros(c), requires_grad=True))
    _fd_vs_reverse("ffn_residual.feat",
                   lambda t: nm.reduce_sum(nm.square(ffn_residual(t, ffn, norm))), feat, rows)
    _fd_vs_reverse("ffn_residual.conv1",
                   lambda t: nm.reduce_sum(nm.square(ffn_residual(feat, ffn, norm))),
                   ffn.conv1.weight, rows)

    pos = 2
    qp = _conv_params(c, c + pos, 1, seed + 8, scale=0.3)
    kp = _conv_params(c, c + pos, 1, seed + 9, scale=0.3)
    tgt_pos = Tensor(_rand((c + pos, h, w), seed + 10), requires_grad=True)
    ref_pos = Tensor(_rand((c + pos, h, w), seed + 11), requires_grad=True)

    def dense_loss(t):
        attn = dense_attention(t, ref_pos, qp, kp, smoothness=3.0)
        return nm.reduce_sum(nm.square(attn.weights))

    _fd_vs_reverse("dense_attention.tgt", dense_loss, tgt_pos, rows)
    _fd_vs_reverse("dense_attention.query_proj",
                   lambda t: dense_loss(tgt_pos), qp.weight, rows)

    cands = CandidateSet(
        idx=nm.make_rng(seed + 12).integers(0, h * w, size=(h * w, 5)).astype(np.int64),
        valid=np.ones((h * w, 5), dtype=bool), ref_hw=(h, w), n_queries=h * w,
    )

    def sparse_loss(t):
        attn = sparse_attention(tgt_pos, t, cands, qp, kp, smoothness=3.0)
        return nm.reduce_sum(nm.square(attn.weights))

    _fd_vs_reverse("sparse_attention.ref", sparse_loss, ref_pos, rows)

    head = PruneHead(tgt_mlp=_mlp_params(c, c, c, 1, 1, seed + 13),
                     ref_mlp=_mlp_params(c, c, c, 1, 1, seed + 15))
    f_tgt = Tensor(_rand((c, h, w), seed + 17), requires_grad=True)
    f_ref = Tensor(_rand((c, h, w), seed + 18), requires_grad=True)
    _fd_vs_reverse("prune_logits.tgt",
                   lambda t: nm.reduce_sum(nm.square(prune_logits(t, f_ref, cands, head))),
                   f_tgt, rows)
    _fd_vs_reverse("prune_logits.head",
                   lambda t: nm.reduce_sum(nm.square(prune_logits(f_tgt, f_ref, cands, head))),
                   head.ref_mlp.conv1.weight, rows)

    # aggregation with a frozen gate so the path is smooth
    from .attention import SparseAttentionMap
    from .pruning import apply_prune, frozen_decision

    def agg_loss(t):
        attn = sparse_attention(t, ref_pos, cands, qp, kp, smoothness=3.0)
        attn.decisions = frozen_decision(np.ones((h * w, 5)))
        attn.pruned = apply_prune(attn.weights, attn.decisions)
        vp = _conv_params(c, c, 1, seed + 19)
        out = aggregate_features(f_tgt, f_ref, attn, s_map, vp, spade, norm)
        return nm.reduce_sum(nm.square(out))

    # composite losses are larger; a coarser step keeps FD cancellation noise
    # well under the tolerance (truncation still ~1e-9 relative)
    _fd_vs_reverse("aggregate_features.tgt_pos", agg_loss, tgt_pos, rows, step=3e-5)

    def warp_loss(t):
        attn = sparse_attention(t, ref_pos, cands, qp, kp, smoothness=3.0)
        attn.decisions = frozen_decision((_rand((h * w, 5), seed + 20) > 0).astype(float))
        attn.pruned = apply_prune(attn.weights, attn.decisions)
        return nm.reduce_sum(nm.square(warp_matrix(attn)))

    _fd_vs_reverse("warp_matrix.tgt_pos", warp_loss, tgt_pos, rows)
    return rows


# ---------------------------------------------------------------------------
# scope: model

def tiny_config() -> Config:
    model = ModelConfig(
        num_scales=2,
        resolutions=(4, 8),
        channels=(16, 12),
        embed_channels=(8, 6),
        pos_channels=4,
        top_k=2,
        smoothness=100.0,
        dense_blocks=2,
        inner_blocks=1,
    )
    return Config(model=model, train=TrainSettings(seed=0))


def check_model(samples_per_param: int = 6, seed: int = 0,
                full: bool = False) -> list[CheckRow]:
    """End-to-end loss gradient for every parameter of a tiny model.

    The discrete structure (candidate sets, prune gates) is frozen from a
    reference forward so both reverse-mode and the finite-difference oracle
    see the same smooth function.
    """
    cfg = tiny_config()
    model = DynastModel(cfg.model, seed=seed)
    sample = gen_toy_dataset(1, cfg.model.finest_resolution, "translate:2,1", seed=seed)[0]
    s_tgt, s_ref = Tensor(sample.s_tgt), Tensor(sample.s_ref)
    i_ref, i_tgt = Tensor(sample.i_ref), Tensor(sample.i_tgt)
    extractor = FeatureExtractor(seed=cfg.train.extractor_seed)

    plan = model.forward(s_tgt, s_ref, i_ref).plan

    def loss() -> Tensor:
        out = model.forward(s_tgt, s_ref, i_ref, frozen=plan)
        task, parts = supervised_task_loss(out.image, i_tgt, s_tgt, extractor,
                                           perceptual_weights=cfg.model.perceptual_weights)
        match, per_block = matching_loss(out.blocks, i_ref, i_tgt)
        graph, _ = total_loss(task, match, cfg.model.match_loss_weight, per_block, parts)
        return graph

    # Gradients only exist away from activation kinks: zero-init biases plus
    # binary inputs park whole regions exactly at relu corners, and any
    # pre-activation within the FD step of a corner corrupts the oracle.
    # Nudge all parameters until the evaluation point has clearance.
    base = {p.name: p.data.copy() for p in model.store}
    for attempt in range(50):
        nudge = nm.make_rng(seed + 4242 + attempt)
        for p in model.store:
            p.tensor.data = base[p.name] + nudge.uniform(-0.01, 0.01, size=p.data.shape)
        margins: list = []
        nm.track_kink_margins(margins)
        try:
            plan = model.forward(s_tgt, s_ref, i_ref).plan
            loss()
        finally:
            nm.stop_kink_tracking()
        if min(margins) > 3e-5:
            break

    model.store.zero_grad()
    loss().backward()
    analytic = {p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in model.store}

    rows: list[CheckRow] = []
    pick_rng = nm.make_rng(seed + 999)
    # multi-step oracle: the smallest step avoids activation-kink crossings,
    # larger steps beat f64 cancellation noise on tiny-gradient elements;
    # agreement at any valid step validates the element
    steps = (1e-6, 1e-5, 1e-4)
    for p in model.store:
        flat = p.data.reshape(-1)
        n = flat.size
        if full or n <= samples_per_param:
            chosen = np.arange(n)
        else:
            chosen = pick_rng.choice(n, size=samples_per_param, replace=False)
        worst = 0.0
        for i in chosen:
            ref = np.array([analytic[p.name].reshape(-1)[i]])
            best = np.inf
            for step in steps:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(loss().data)
                flat[i] = orig - step
                fm = float(loss().data)
                flat[i] = orig
                fd = (fp - fm) / (2 * step)
                best = min(best, nm.relative_error(ref, np.array([fd])))
                if best <= GRAD_TOL / 4:
                    break
            worst = max(worst, best)
        note = "all elements" if (full or n <= samples_per_param) else f"{len(chosen)}/{n} elements"
        rows.append(_row(p.name, worst, note=note))
    return rows


def run_scope(scope: str, samples_per_param: int = 6, seed: int = 0,
              full: bool = False) -> list[CheckRow]:
    with nm.single_thread_blas():
        if scope == "op":
            return check_ops(seed)
        if scope == "block":
            return check_blocks(seed)
        if scope == "model":
            return check_model(samples_per_param=samples_per_param, seed=seed, full=full)
    raise ValidationError(f"unknown gradcheck scope {scope!r} (want op|block|model)")


def format_rows(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'path':<{width}}  {'max_rel_err':>12}  status  note"]
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {r.max_rel_err:>12.3e}  {status:>6}  {r.note}")
    return "\n".join(lines)
