"""Multi-scale embedding: patch linear maps, pooling across scales, positions."""

import numpy as np
import pytest

from dynast import numerics as nm
from dynast.blocks import DynastModel
from dynast.config import ModelConfig
from dynast.data import gen_toy_dataset
from dynast.embedding import (
    ConvParams,
    attach_position,
    build_position_embeddings,
    embed_multiscale,
    patch_embed,
)
from dynast.numerics import Tensor


def conv_params(weight, bias=None):
    return ConvParams(weight=Tensor(weight), bias=None if bias is None else Tensor(bias))


class TestPatchEmbed:
    def test_identity_weight_gives_raster_pixels(self):
        img = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        w = np.eye(4).reshape(4, 1, 2, 2)
        out = patch_embed(img, 2, conv_params(w))
        np.testing.assert_allclose(out.data.ravel(), [1.0, 2.0, 3.0, 4.0])

    def test_zero_weight(self):
        img = Tensor(np.random.default_rng(0).random((3, 4, 4)))
        out = patch_embed(img, 2, conv_params(np.zeros((5, 3, 2, 2))))
        np.testing.assert_allclose(out.data, 0.0)
        assert out.data.shape == (5, 2, 2)

    def test_averaging_row_gives_patch_means(self):
        ramp = np.arange(16.0).reshape(1, 4, 4)
        # oracle: mean of each non-overlapping 2x2 block
        expect = np.empty((2, 2))
        for r in range(2):
            for c in range(2):
                expect[r, c] = ramp[0, 2 * r:2 * r + 2, 2 * c:2 * c + 2].mean()
        w = np.full((1, 1, 2, 2), 0.25)
        out = patch_embed(Tensor(ramp), 2, conv_params(w))
        np.testing.assert_allclose(out.data[0], expect)

    def test_indivisible_aborts_with_label(self):
        img = Tensor(np.ones((1, 5, 5)))
        with pytest.raises(nm.ShapeError, match="scale1"):
            patch_embed(img, 2, conv_params(np.zeros((1, 1, 2, 2))), label="scale1 target")


def desk_model():
    cfg = ModelConfig()
    return cfg, DynastModel(cfg, seed=0)


class TestEmbedMultiscale:
    def test_desk_shapes(self):
        cfg, model = desk_model()
        s = gen_toy_dataset(1, 32, "identity", seed=0)[0]
        feats = embed_multiscale(Tensor(s.s_tgt), Tensor(s.s_ref), Tensor(s.i_ref),
                                 cfg, model.embed)
        assert feats.tgt[0].data.shape == (32, 32, 32)
        assert feats.tgt[1].data.shape == (48, 16, 16)
        assert feats.tgt[2].data.shape == (64, 8, 8)
        for i in range(3):
            assert feats.ref[i].data.shape == feats.tgt[i].data.shape

    def test_single_scale_uses_only_its_embedding(self):
        cfg = ModelConfig(num_scales=1, resolutions=(8,), channels=(12,),
                          embed_channels=(6,), pos_channels=4)
        model = DynastModel(cfg, seed=1)
        s = gen_toy_dataset(1, 8, "identity", seed=1)[0]
        feats = embed_multiscale(Tensor(s.s_tgt), Tensor(s.s_ref), Tensor(s.i_ref),
                                 cfg, model.embed)
        assert feats.tgt[0].data.shape == (12, 8, 8)

    def test_zero_inputs_zero_bias_gives_zero_features(self):
        cfg, model = desk_model()
        zero_s = Tensor(np.zeros((1, 32, 32)))
        zero_i = Tensor(np.zeros((3, 32, 32)))
        feats = embed_multiscale(zero_s, zero_s, zero_i, cfg, model.embed)
        for i in range(3):
            np.testing.assert_allclose(feats.tgt[i].data, 0.0, atol=1e-12)
            np.testing.assert_allclose(feats.ref[i].data, 0.0, atol=1e-12)

    def test_bit_reproducible(self):
        cfg, model = desk_model()
        s = gen_toy_dataset(1, 32, "identity", seed=2)[0]
        args = (Tensor(s.s_tgt), Tensor(s.s_ref), Tensor(s.i_ref))
        a = embed_multiscale(*args, cfg, model.embed)
        b = embed_multiscale(*args, cfg, model.embed)
        for i in range(3):
            assert np.array_equal(a.tgt[i].data, b.tgt[i].data)

    def test_wrong_input_resolution_aborts(self):
        cfg, model = desk_model()
        bad = Tensor(np.zeros((1, 16, 16)))
        ok3 = Tensor(np.zeros((3, 32, 32)))
        with pytest.raises(nm.ShapeError):
            embed_multiscale(bad, bad, ok3, cfg, model.embed)

    def test_literal_range_drops_finest_embedding(self):
        cfg = ModelConfig(literal_embed_range=True)
        model = DynastModel(cfg, seed=0)
        s = gen_toy_dataset(1, 32, "identity", seed=0)[0]
        feats = embed_multiscale(Tensor(s.s_tgt), Tensor(s.s_ref), Tensor(s.i_ref),
                                 cfg, model.embed)
        assert feats.tgt[0].data.shape == (32, 32, 32)
        # finest patch embedding receives no gradient under the literal reading
        nm.reduce_sum(nm.square(feats.tgt[0])).backward()
        assert model.store["embed.tgt0.weight"].grad is None


class TestPositionEmbeddings:
    def test_desk_shapes(self):
        cfg, model = desk_model()
        pos = build_position_embeddings(cfg, model.embed)
        assert pos[2].data.shape == (16, 8, 8)
        assert pos[1].data.shape == (16, 16, 16)
        assert pos[0].data.shape == (16, 32, 32)

    def test_single_scale_returns_learnable_base(self):
        cfg = ModelConfig(num_scales=1, resolutions=(8,), channels=(12,),
                          embed_channels=(6,), pos_channels=4)
        model = DynastModel(cfg, seed=0)
        pos = build_position_embeddings(cfg, model.embed)
        assert pos[0] is model.embed.pos_base

    def test_zero_conv_weights_give_constant_maps(self):
        cfg, model = desk_model()
        for i in range(2):
            model.embed.pos_up[i].weight.data[:] = 0.0
            model.embed.pos_up[i].bias.data[:] = 0.25
        pos = build_position_embeddings(cfg, model.embed)
        for i in (0, 1):
            np.testing.assert_allclose(pos[i].data, 0.25, atol=1e-12)


class TestAttachPosition:
    def test_concat_order(self):
        f = Tensor(np.array([1.0, 2.0]).reshape(2, 1, 1))
        p = Tensor(np.array([3.0]).reshape(1, 1, 1))
        out = attach_position(f, p)
        np.testing.assert_allclose(out.data.ravel(), [1.0, 2.0, 3.0])

    def test_zero_position_preserves_features(self):
        f = Tensor(np.random.default_rng(3).random((4, 5, 5)))
        out = attach_position(f, Tensor(np.zeros((2, 5, 5))))
        np.testing.assert_allclose(out.data[:4], f.data)
        assert out.data.shape == (6, 5, 5)

    def test_desk_scale1_shapes(self):
        out = attach_position(Tensor(np.zeros((48, 16, 16))), Tensor(np.zeros((16, 16, 16))))
        assert out.data.shape == (64, 16, 16)

    def test_spatial_mismatch_aborts(self):
        with pytest.raises(nm.ShapeError):
            attach_position(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 8, 8))))


class TestGradientFlow:
    def test_every_embedding_parameter_reached(self):
        cfg = ModelConfig(num_scales=2, resolutions=(4, 8), channels=(16, 12),
                          embed_channels=(8, 6), pos_channels=4, top_k=2)
        model = DynastModel(cfg, seed=3)
        s = gen_toy_dataset(1, 8, "translate:1,0", seed=3)[0]
        out = model.forward(Tensor(s.s_tgt), Tensor(s.s_ref), Tensor(s.i_ref))
        from dynast.losses import matching_loss, supervised_task_loss, total_loss, FeatureExtractor
        ext = FeatureExtractor(seed=5)
        task, parts = supervised_task_loss(out.image, Tensor(s.i_tgt), Tensor(s.s_tgt), ext)
        match, pb = matching_loss(out.blocks, Tensor(s.i_ref), Tensor(s.i_tgt))
        loss, _ = total_loss(task, match, 100.0, pb, parts)
        loss.backward()
        for p in model.store:
            if not p.name.startswith(("embed.", "pos.")):
                continue
            assert p.grad is not None, f"no grad for {p.name}"
            assert np.abs(p.grad).max() > 0, f"zero grad for {p.name}"
