"""Warp matrices, matching loss, task losses, and the total objective."""

import numpy as np
import pytest

from dynast import numerics as nm
from dynast.attention import CandidateSet, SparseAttentionMap
from dynast.blocks import DynastModel
from dynast.config import ModelConfig
from dynast.data import gen_toy_dataset
from dynast.losses import (
    WARP_EPS,
    FeatureExtractor,
    LossReport,
    PatchDiscriminator,
    channel_stats,
    discriminator_loss,
    matching_loss,
    style_task_loss,
    supervised_task_loss,
    total_loss,
    warp_image,
    warp_matrix,
    warp_reference,
)
from dynast.numerics import Tensor
from dynast.pruning import apply_prune


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def make_attn(scores, ref_hw, idx=None, decisions=None):
    n_q = scores.shape[0]
    if idx is None:
        cands = CandidateSet.full(n_q, ref_hw)
    else:
        cands = CandidateSet(idx=idx.astype(np.int64), valid=np.ones(idx.shape, bool),
                             ref_hw=ref_hw, n_queries=n_q)
    weights = nm.softmax_rows(Tensor(scores))
    attn = SparseAttentionMap(candidates=cands, scores=Tensor(scores), weights=weights)
    attn.decisions = decisions
    attn.pruned = apply_prune(weights, decisions)
    return attn


class TestWarpMatrix:
    def test_uniform_four_slots(self):
        attn = make_attn(np.zeros((2, 4)), (2, 2), decisions=Tensor(np.ones((2, 4))))
        w = warp_matrix(attn)
        np.testing.assert_allclose(w.data, 1.0 / (4.0 + WARP_EPS), rtol=1e-12)

    def test_fully_pruned_row_is_zero(self):
        attn = make_attn(rng(1).uniform(-2, 2, size=(3, 4)), (2, 2),
                         decisions=Tensor(np.zeros((3, 4))))
        w = warp_matrix(attn)
        np.testing.assert_allclose(w.data, 0.0)

    def test_all_kept_matches_softmax(self):
        scores = rng(2).uniform(-5, 5, size=(4, 6)) * 100.0  # smoothness-scaled scale
        attn = make_attn(scores, (2, 3), decisions=Tensor(np.ones((4, 6))))
        w = warp_matrix(attn)
        oracle = nm.softmax_rows(Tensor(scores)).data
        np.testing.assert_allclose(w.data, oracle, rtol=1e-7)

    def test_no_overflow_at_high_smoothness(self):
        scores = rng(3).uniform(-1, 1, size=(3, 5)) * 1000.0
        attn = make_attn(scores, (1, 5))
        w = warp_matrix(attn)
        assert np.all(np.isfinite(w.data))

    def test_rows_strictly_substochastic(self):
        for seed in range(10):
            scores = rng(seed).uniform(-3, 3, size=(5, 7))
            gates = Tensor((rng(seed + 100).random((5, 7)) > 0.3).astype(float))
            attn = make_attn(scores, (5, 7) if False else (1, 7), decisions=gates)
            sums = warp_matrix(attn).data.sum(axis=1)
            assert np.all(sums >= 0.0) and np.all(sums < 1.0)

    def test_masked_slots_are_zero(self):
        idx = np.array([[0, 1, 0], [2, 3, 0]])
        valid = np.array([[True, True, False], [True, True, False]])
        cands = CandidateSet(idx=idx.astype(np.int64), valid=valid, ref_hw=(2, 2), n_queries=2)
        scores = Tensor(rng(5).uniform(-1, 1, size=(2, 3)))
        attn = SparseAttentionMap(candidates=cands, scores=scores,
                                  weights=nm.softmax_rows(scores, mask=valid))
        w = warp_matrix(attn)
        assert np.all(w.data[~valid] == 0.0)


class TestWarpReference:
    def test_identity_matching_reproduces_reference(self):
        h, wdt = 2, 3
        n = h * wdt
        i_ref = Tensor(rng(6).random((3, h, wdt)))
        scores = np.full((n, n), -1e4)
        scores[np.arange(n), np.arange(n)] = 1e4
        attn = make_attn(scores, (h, wdt), decisions=Tensor(np.ones((n, n))))
        w = warp_matrix(attn)
        out = warp_reference(w, i_ref, attn)
        expect = i_ref.data.reshape(3, n).T
        np.testing.assert_allclose(out.data, expect, atol=1e-9)

    def test_zero_row_gives_black_pixel(self):
        attn = make_attn(np.zeros((4, 4)), (2, 2), decisions=Tensor(np.zeros((4, 4))))
        w = warp_matrix(attn)
        out = warp_reference(w, Tensor(rng(7).random((3, 2, 2))), attn)
        np.testing.assert_allclose(out.data, 0.0)

    def test_uniform_row_averages_pixels(self):
        i_ref = Tensor(rng(8).random((3, 2, 2)))
        attn = make_attn(np.zeros((4, 4)), (2, 2), decisions=Tensor(np.ones((4, 4))))
        w = warp_matrix(attn)
        out = warp_reference(w, i_ref, attn)
        mean = i_ref.data.reshape(3, 4).mean(axis=1)
        for q in range(4):
            np.testing.assert_allclose(out.data[q], mean, rtol=1e-6)

    def test_warped_values_stay_in_unit_range(self):
        for seed in range(10):
            i_ref = Tensor(rng(seed + 200).random((3, 4, 4)))
            scores = rng(seed + 300).uniform(-2, 2, size=(16, 16)) * 50
            gates = Tensor((rng(seed + 400).random((16, 16)) > 0.4).astype(float))
            attn = make_attn(scores, (4, 4), decisions=gates)
            out = warp_reference(warp_matrix(attn), i_ref, attn)
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_warp_image_shape(self):
        attn = make_attn(np.zeros((4, 4)), (2, 2))
        img = warp_image(warp_matrix(attn), Tensor(rng(9).random((3, 2, 2))), attn)
        assert img.data.shape == (3, 2, 2)


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(num_scales=2, resolutions=(4, 8), channels=(16, 12),
                      embed_channels=(8, 6), pos_channels=4, top_k=2, **kw)
    return cfg, DynastModel(cfg, seed=seed)


class TestMatchingLoss:
    def test_zero_when_warps_are_perfect(self):
        # identity matching everywhere and i_ref == i_tgt
        h = wdt = 2
        n = h * wdt
        scores = np.full((n, n), -1e4)
        scores[np.arange(n), np.arange(n)] = 1e4
        img = rng(10).random((3, h, wdt))
        from dynast.blocks import BlockOutput
        block = BlockOutput(scale=0, index=1, features=Tensor(img),
                            attn=make_attn(scores, (h, wdt), decisions=Tensor(np.ones((n, n)))))
        loss, terms = matching_loss([block], Tensor(img), Tensor(img))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_zero_warp_all_ones_target(self):
        h = wdt = 2
        n = h * wdt
        from dynast.blocks import BlockOutput
        blocks = []
        for b in range(3):
            attn = make_attn(np.zeros((n, n)), (h, wdt), decisions=Tensor(np.zeros((n, n))))
            blocks.append(BlockOutput(scale=0, index=b + 1, features=Tensor(np.zeros((3, h, wdt))),
                                      attn=attn))
        ones = Tensor(np.ones((3, h, wdt)))
        zeros_ref = Tensor(np.zeros((3, h, wdt)))
        loss, terms = matching_loss(blocks, zeros_ref, ones)
        assert float(loss.data) == pytest.approx(3.0, abs=1e-9)  # 1.0 per block
        assert len(terms) == 3

    def test_gradients_reach_attention_and_prune_heads(self):
        cfg, model = tiny_model(seed=11)
        s = gen_toy_dataset(1, 8, "translate:2,1", seed=11)[0]
        out = model.forward(Tensor(s.s_tgt), Tensor(s.s_ref), Tensor(s.i_ref))
        loss, _ = matching_loss(out.blocks, Tensor(s.i_ref), Tensor(s.i_tgt))
        loss.backward()
        for key in ("query_proj.weight", "key_proj.weight"):
            p = model.store[f"scale0.block1.{key}"]
            assert p.grad is not None and np.abs(p.grad).max() > 0
        for key in ("prune.tgt.conv1.weight", "prune.ref.conv1.weight"):
            p = model.store[f"scale0.block1.{key}"]
            assert p.grad is not None and np.abs(p.grad).max() > 0

    def test_requires_some_attention(self):
        from dynast.blocks import BlockOutput
        block = BlockOutput(scale=0, index=1, features=Tensor(np.zeros((3, 2, 2))), attn=None)
        with pytest.raises(ValueError):
            matching_loss([block], Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((3, 2, 2))))


class TestFeatureExtractor:
    def test_deterministic_by_seed(self):
        a = FeatureExtractor(seed=5)
        b = FeatureExtractor(seed=5)
        for wa, wb in zip(a.filters, b.filters):
            assert np.array_equal(wa.data, wb.data)

    def test_four_taps_with_strides(self):
        ext = FeatureExtractor(seed=6)
        taps = ext.taps(Tensor(rng(12).random((3, 32, 32))))
        assert [t.data.shape[1] for t in taps] == [32, 16, 8, 4]
        assert len(taps) == 4

    def test_frozen_but_differentiable_through(self):
        ext = FeatureExtractor(seed=7)
        img = Tensor(rng(13).random((3, 16, 16)), requires_grad=True)
        nm.reduce_sum(nm.square(ext.taps(img)[-1])).backward()
        assert img.grad is not None
        assert all(not w.requires_grad for w in ext.filters)


class TestSupervisedTaskLoss:
    def test_zero_at_identity(self):
        img = Tensor(rng(14).random((3, 16, 16)))
        ext = FeatureExtractor(seed=8)
        loss, parts = supervised_task_loss(img, img, Tensor(np.zeros((1, 16, 16))), ext)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-15)

    def test_plain_mse_when_weights_zero(self):
        a = Tensor(rng(15).random((3, 8, 8)))
        b = Tensor(rng(16).random((3, 8, 8)))
        ext = FeatureExtractor(seed=9)
        loss, parts = supervised_task_loss(a, b, Tensor(np.zeros((1, 8, 8))), ext,
                                           perceptual_weights=(0, 0, 0, 0))
        np.testing.assert_allclose(float(loss.data), np.mean((a.data - b.data) ** 2), rtol=1e-12)
        assert "perceptual" not in parts

    def test_perceptual_nonnegative_zero_only_at_match(self):
        ext = FeatureExtractor(seed=10)
        a = Tensor(rng(17).random((3, 8, 8)))
        b = Tensor(rng(18).random((3, 8, 8)))
        loss_ab, parts_ab = supervised_task_loss(a, b, Tensor(np.zeros((1, 8, 8))), ext)
        loss_aa, parts_aa = supervised_task_loss(a, a, Tensor(np.zeros((1, 8, 8))), ext)
        assert parts_ab["perceptual"] > 0
        assert parts_aa["perceptual"] == pytest.approx(0.0, abs=1e-15)

    def test_adversarial_term_wired(self):
        ext = FeatureExtractor(seed=11)
        disc = PatchDiscriminator(1, 3, seed=12)
        a = Tensor(rng(19).random((3, 8, 8)))
        b = Tensor(rng(20).random((3, 8, 8)))
        s = Tensor(np.zeros((1, 8, 8)))
        loss, parts = supervised_task_loss(a, b, s, ext, discriminator=disc, adv_weight=10.0)
        assert "adversarial" in parts and np.isfinite(parts["adversarial"])


class TestStyleTaskLoss:
    def test_zero_when_all_equal(self):
        img = Tensor(rng(21).random((3, 16, 16)))
        loss, parts = style_task_loss(img, img, img, FeatureExtractor(seed=13))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-15)

    def test_style_zero_when_cs_is_style(self):
        ext = FeatureExtractor(seed=14)
        i_s = Tensor(rng(22).random((3, 16, 16)))
        i_c = Tensor(rng(23).random((3, 16, 16)))
        loss, parts = style_task_loss(i_s, i_c, i_s, ext)
        assert parts["style"] == pytest.approx(0.0, abs=1e-15)
        assert float(loss.data) == pytest.approx(parts["content"], rel=1e-12)

    def test_channel_stats_constant_channel(self):
        feat = Tensor(np.full((2, 4, 4), 3.5))
        mu, sd = channel_stats(feat)
        np.testing.assert_allclose(mu.data, 3.5)
        np.testing.assert_allclose(sd.data, 0.0)

    def test_default_style_weight_applied(self):
        ext = FeatureExtractor(seed=15)
        cs = Tensor(rng(24).random((3, 16, 16)))
        c = Tensor(rng(25).random((3, 16, 16)))
        s = Tensor(rng(26).random((3, 16, 16)))
        loss, parts = style_task_loss(cs, c, s, ext, style_weight=3.0)
        assert float(loss.data) == pytest.approx(parts["content"] + 3.0 * parts["style"], rel=1e-12)


class TestTotalLoss:
    def test_zero_weight_gives_task(self):
        task = Tensor(np.array(1.5))
        match = Tensor(np.array(2.5))
        total, report = total_loss(task, match, 0.0)
        assert float(total.data) == 1.5
        assert report.total == 1.5

    def test_arithmetic(self):
        total, report = total_loss(Tensor(np.array(1.0)), Tensor(np.array(2.0)), 100.0)
        assert float(total.data) == pytest.approx(201.0)

    def test_report_invariant_exact(self):
        for seed in range(10):
            r = rng(seed + 500)
            task = Tensor(np.array(r.random()))
            match = Tensor(np.array(r.random()))
            lam = float(r.uniform(0.1, 100))
            _, report = total_loss(task, match, lam)
            assert abs(report.total - (report.task + lam * report.matching)) <= 1e-9


class TestDiscriminator:
    def test_outputs_probabilities(self):
        disc = PatchDiscriminator(1, 3, seed=16)
        out = disc.forward(Tensor(rng(27).random((1, 16, 16))), Tensor(rng(28).random((3, 16, 16))))
        assert out.data.min() > 0.0 and out.data.max() < 1.0

    def test_loss_trains_both_sides(self):
        disc = PatchDiscriminator(1, 3, seed=17)
        s = Tensor(rng(29).random((1, 8, 8)))
        real = Tensor(rng(30).random((3, 8, 8)))
        fake = Tensor(rng(31).random((3, 8, 8)))
        loss = discriminator_loss(disc.forward(s, real), disc.forward(s, fake))
        loss.backward()
        for p in disc.store:
            assert p.grad is not None
