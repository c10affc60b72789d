import numpy as np
import pytest

from nodulediag.tensor import ParameterError, Tensor, backward
from nodulediag.vit import ViTConfig, ViTEncoder, attention_map, bilinear_resize_matrix

from gradcheck import finite_difference_grad, max_rel_error

rng = np.random.default_rng(11)


def toy_encoder(seed=0, **overrides):
    cfg = ViTConfig(**{"image_size": 16, "patch_size": 4, "embed_dim": 8,
                       "depth": 2, "num_heads": 2, **overrides})
    return ViTEncoder(cfg, rng=np.random.default_rng(seed))


class TestConfig:
    def test_indivisible_image_rejected(self):
        with pytest.raises(ParameterError):
            ViTConfig(image_size=30, patch_size=16)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ParameterError):
            ViTConfig(embed_dim=10, num_heads=3)

    def test_paper_scale_constructible(self):
        cfg = ViTConfig.paper_scale()
        assert (cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.depth, cfg.num_heads) == \
            (224, 16, 384, 12, 6)
        assert cfg.num_patches == 196


class TestPatchify:
    def test_token_count_224(self):
        cfg = ViTConfig(image_size=224, patch_size=16, embed_dim=8, depth=1, num_heads=1)
        enc = ViTEncoder(cfg, rng=np.random.default_rng(0))
        tokens = enc.patchify(rng.random((1, 224, 224)))
        assert tokens.shape == (1, 197, 8)

    def test_token_count_32(self):
        cfg = ViTConfig(image_size=32, patch_size=16, embed_dim=8, depth=1, num_heads=1)
        enc = ViTEncoder(cfg, rng=np.random.default_rng(0))
        tokens = enc.patchify(rng.random((2, 32, 32)))
        assert tokens.shape == (2, 5, 8)

    def test_deterministic(self):
        enc = toy_encoder()
        img = rng.random((1, 16, 16))
        a = enc.patchify(img.copy()).data
        b = enc.patchify(img.copy()).data
        np.testing.assert_array_equal(a, b)


class TestEncode:
    def test_output_dim(self):
        enc = toy_encoder()
        f = enc.encode(rng.random((3, 16, 16)))
        assert f.shape == (3, 8)

    def test_batch_equivariance(self):
        enc = toy_encoder()
        imgs = rng.random((2, 16, 16))
        fwd = enc.encode(imgs).data
        swapped = enc.encode(imgs[::-1].copy()).data
        np.testing.assert_allclose(fwd, swapped[::-1], atol=1e-12)

    def test_pure_bitwise(self):
        enc = toy_encoder()
        imgs = rng.random((2, 16, 16))
        np.testing.assert_array_equal(enc.encode(imgs).data, enc.encode(imgs).data)

    def test_smaller_view_uses_resampled_positions(self):
        enc = toy_encoder()
        f = enc.encode(rng.random((2, 8, 8)))
        assert f.shape == (2, 8)

    def test_input_gradient_matches_fd(self):
        cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2)
        enc = ViTEncoder(cfg, rng=np.random.default_rng(4))
        w = rng.standard_normal(8)
        img = rng.random((1, 8, 8))

        def probe(x):
            return (enc.encode(x) * w).sum()

        x = Tensor(img.copy(), requires_grad=True)
        backward(probe(x))
        fd = finite_difference_grad(probe, [img], wrt=0)
        assert max_rel_error(x.grad, fd) < 1e-4


class TestAttention:
    def test_rows_stochastic(self):
        enc = toy_encoder()
        records = enc.attention_records(rng.random((2, 16, 16)))
        assert len(records) == 2
        for rec in records:
            assert rec.shape == (2, 2, 17, 17)
            np.testing.assert_allclose(rec.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(rec >= 0) and np.all(rec <= 1)

    def test_map_sums_to_one(self):
        enc = toy_encoder()
        amap = attention_map(enc, rng.random((16, 16)))
        assert amap.shape == (4, 4)
        assert np.all(amap >= 0)
        assert amap.sum() == pytest.approx(1.0, abs=1e-6)

    def test_single_head_degenerate_average(self):
        enc = toy_encoder(num_heads=1)
        img = rng.random((16, 16))
        amap = attention_map(enc, img)
        rec = enc.attention_records(img[None])[-1]
        row = rec[0, 0, 0, 1:]
        np.testing.assert_allclose(amap.reshape(-1), row / row.sum(), atol=1e-12)

    def test_zeroed_projections_give_uniform_map(self):
        enc = toy_encoder()
        for i in range(enc.cfg.depth):
            enc.params[f"blocks.{i}.attn.q.weight"].data[:] = 0
            enc.params[f"blocks.{i}.attn.q.bias"].data[:] = 0
            enc.params[f"blocks.{i}.attn.k.weight"].data[:] = 0
            enc.params[f"blocks.{i}.attn.k.bias"].data[:] = 0
        amap = attention_map(enc, rng.random((16, 16)))
        np.testing.assert_allclose(amap, 1.0 / 16.0, atol=1e-12)

    def test_invalid_layer(self):
        enc = toy_encoder()
        with pytest.raises(ParameterError):
            attention_map(enc, rng.random((16, 16)), layer=5)

    def test_mean_mode(self):
        enc = toy_encoder()
        amap = attention_map(enc, rng.random((16, 16)), layer="mean")
        assert amap.sum() == pytest.approx(1.0, abs=1e-9)


class TestResizeMatrix:
    def test_rows_are_convex_weights(self):
        r = bilinear_resize_matrix(8, 4)
        assert r.shape == (16, 64)
        np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(r >= 0)

    def test_identity_when_same_size(self):
        r = bilinear_resize_matrix(4, 4)
        np.testing.assert_allclose(r, np.eye(16), atol=1e-12)
