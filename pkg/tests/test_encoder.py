import itertools

import numpy as np
import pytest

from evistream import numerics as nx
from evistream.accumulator import AccumulatorConfig, EvidenceModel, stream_loss
from evistream.encoder import (EncoderConfig, InputError, attention, block_shifts, encode_slice,
                               encode_slices, grid_shape, init_encoder_params, msa, pad_images,
                               patch_embed, patch_merge, stage_grids, swin_block, window_partition,
                               window_reverse)
from evistream.gradcheck import check_gradients
from evistream.numerics import ConfigError, DimensionError, Tensor


def softmax_rows(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


class TestConfig:
    def test_full_scale_grid_and_features(self):
        cfg = EncoderConfig.full_scale()
        assert grid_shape(cfg) == (56, 56)
        assert stage_grids(cfg) == [(56, 56), (28, 28), (14, 14), (7, 7)]
        assert cfg.feature_dim == 1024

    def test_toy_feature_dim(self):
        assert EncoderConfig().feature_dim == 128

    def test_heads_must_divide_channels(self):
        with pytest.raises(ConfigError):
            EncoderConfig(embed_dim=16, heads=[3, 2, 4, 8])

    def test_depth_and_heads_lengths(self):
        with pytest.raises(ConfigError):
            EncoderConfig(depths=[2, 2], heads=[1, 2, 4])


class TestPatchEmbed:
    @pytest.mark.parametrize("size, grid", [(224, 56), (32, 8), (30, 8)])
    def test_grid_sizes(self, size, grid):
        cfg = EncoderConfig(input_size=(size, size)) if size != 224 else EncoderConfig.full_scale()
        assert grid_shape(cfg) == (grid, grid)

    def test_padding_is_zero_and_embedding_shape(self, rng):
        cfg = EncoderConfig(input_size=(30, 30))
        img = rng.random((30, 30))
        padded = pad_images(img, cfg)
        assert padded.shape == (1, 32, 32)
        assert not padded[0, 30:].any() and not padded[0, :, 30:].any()
        store = init_encoder_params(nx.ParamStore(), cfg, rng)
        assert patch_embed(img[None], cfg, store).shape == (1, 8, 8, 16)

    def test_patch_projection_matches_manual(self, rng):
        cfg = EncoderConfig()
        store = init_encoder_params(nx.ParamStore(), cfg, rng)
        img = rng.random((32, 32)).astype(np.float32)
        out = patch_embed(img[None], cfg, store).data[0]
        r, c = 2, 5
        patch = (img[4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1) - 0.5) / 0.25
        expected = patch @ store["enc.embed.w"].data + store["enc.embed.b"].data
        np.testing.assert_allclose(out[r, c], expected, rtol=1e-5, atol=1e-6)

    def test_mean_grey_embeds_to_bias(self, rng):
        cfg = EncoderConfig()
        store = init_encoder_params(nx.ParamStore(), cfg, rng)
        store["enc.embed.b"].data[...] = rng.standard_normal(16)
        out = patch_embed(np.full((1, 30, 30), cfg.pixel_mean), cfg, store).data
        np.testing.assert_allclose(out, np.broadcast_to(store["enc.embed.b"].data, out.shape), atol=1e-6)

    def test_nonpositive_pixel_std(self):
        with pytest.raises(ConfigError):
            EncoderConfig(pixel_std=0.0)

    def test_empty_image(self):
        with pytest.raises(InputError):
            pad_images(np.zeros((0, 0)), EncoderConfig())


class TestWindows:
    def test_counts(self):
        g = Tensor(np.zeros((1, 8, 8, 3)))
        assert window_partition(g, 4, 0).shape == (4, 16, 3)
        g = Tensor(np.zeros((1, 56, 56, 2)))
        assert window_partition(g, 7, 0).shape == (64, 49, 2)

    def test_non_dividing_window(self):
        with pytest.raises(ConfigError):
            window_partition(Tensor(np.zeros((1, 6, 6, 1))), 4, 0)

    @pytest.mark.parametrize("window,side", [(w, s) for w in (2, 4) for s in (2, 4, 6, 8) if s % w == 0])
    def test_partition_inverse_exhaustive(self, side, window):
        for rows, cols in itertools.product(range(window, side + 1, window), repeat=2):
            g = np.arange(2 * rows * cols * 3, dtype=np.float64).reshape(2, rows, cols, 3)
            for shift in (0, window // 2):
                w = window_partition(Tensor(g), window, shift)
                back = window_reverse(w, window, rows, cols, shift).data
                np.testing.assert_array_equal(back, g.astype(np.float32))

    def test_windows_hold_contiguous_tokens(self):
        g = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        w = window_partition(Tensor(g), 2, 0).data[..., 0]
        np.testing.assert_array_equal(w[0], [0, 1, 4, 5])
        np.testing.assert_array_equal(w[3], [10, 11, 14, 15])

    def test_shift_is_half_window(self):
        assert block_shifts(4, 8, 8) == (4, 2)
        assert block_shifts(7, 56, 56) == (7, 3)
        assert block_shifts(4, 4, 4) == (4, 0)  # single window, nothing to shift
        assert block_shifts(4, 2, 2) == (2, 0)

    def test_shifted_windows_pair_new_tokens(self):
        for side, window in ((8, 4), (8, 2), (6, 2)):
            ids = np.arange(side * side, dtype=np.float64).reshape(1, side, side, 1)

            def pairs(shift):
                w = window_partition(Tensor(ids), window, shift).data[..., 0].astype(int)
                return {(a, b) for row in w for a in row for b in row if a < b}

            assert pairs(window // 2) - pairs(0)


class TestAttention:
    def test_equal_keys_give_value_mean(self, rng):
        q = rng.standard_normal((3, 4))
        k = np.tile(rng.standard_normal((1, 4)), (5, 1))
        v = rng.standard_normal((5, 2))
        with nx.verification_mode():
            out = attention(q, k, v).data
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-10)

    def test_saturation(self, rng):
        d = 4
        q = np.zeros((1, d))
        q[0, 0] = 1.0
        k = np.zeros((3, d))
        k[1, 0] = 50.0 * np.sqrt(d)
        v = rng.standard_normal((3, 2))
        with nx.verification_mode():
            out = attention(q, k, v).data
        np.testing.assert_allclose(out[0], v[1], atol=1e-6)

    def test_two_step_oracle(self, rng):
        q, k, v = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        scores = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                scores[i, j] = sum(q[i, t] * k[j, t] for t in range(2)) / np.sqrt(2)
        weights = softmax_rows(scores)
        expected = np.array([[sum(weights[i, j] * v[j, c] for j in range(3)) for c in range(2)] for i in range(3)])
        with nx.verification_mode():
            np.testing.assert_allclose(attention(q, k, v).data, expected, atol=1e-6)

    def test_rows_stochastic_and_convex(self, rng):
        for _ in range(20):
            q, k = rng.standard_normal((6, 4)) * 3, rng.standard_normal((7, 4)) * 3
            v = rng.standard_normal((7, 5))
            w = softmax_rows(nx.matmul(q, k.T).data / 2.0)
            assert (w >= 0).all()
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
            out = attention(q, k, v).data
            assert (out >= v.min(axis=0) - 1e-5).all() and (out <= v.max(axis=0) + 1e-5).all()

    def test_dk_mismatch(self):
        with pytest.raises(DimensionError):
            attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 1)))

    def test_permutation_consistency(self, rng):
        x = rng.standard_normal((5, 8))
        ws = [rng.standard_normal((8, 8)) for _ in range(4)]
        perm = rng.permutation(5)
        with nx.verification_mode():
            out = msa(Tensor(x), *map(Tensor, ws), heads=2).data
            out_p = msa(Tensor(x[perm]), *map(Tensor, ws), heads=2).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


class TestMSA:
    def test_single_head_is_plain_attention(self, rng):
        x = rng.standard_normal((5, 6))
        wq, wk, wv, wo = (rng.standard_normal((6, 6)) for _ in range(4))
        with nx.verification_mode():
            got = msa(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv), Tensor(wo), heads=1).data
            ref = nx.matmul(attention(x @ wq, x @ wk, x @ wv), wo).data
        np.testing.assert_allclose(got, ref, atol=1e-10)

    def test_shape(self, rng):
        x = rng.standard_normal((3, 9, 8))
        ws = [Tensor(rng.standard_normal((8, 8))) for _ in range(4)]
        assert msa(Tensor(x), *ws, heads=2).shape == (3, 9, 8)

    def test_per_head_oracle(self, rng):
        n, d, h = 4, 8, 2
        dh = d // h
        x = rng.standard_normal((n, d))
        wq, wk, wv, wo = (rng.standard_normal((d, d)) for _ in range(4))
        heads = []
        for i in range(h):
            cols = slice(i * dh, (i + 1) * dh)
            q, k, v = x @ wq[:, cols], x @ wk[:, cols], x @ wv[:, cols]
            heads.append(softmax_rows(q @ k.T / np.sqrt(dh)) @ v)
        expected = np.concatenate(heads, axis=1) @ wo
        with nx.verification_mode():
            got = msa(Tensor(x), Tensor(wq), Tensor(wk), Tensor(wv), Tensor(wo), heads=h).data
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_indivisible_heads(self, rng):
        ws = [Tensor(np.ones((6, 6))) for _ in range(4)]
        with pytest.raises(ConfigError):
            msa(Tensor(np.ones((2, 6))), *ws, heads=4)


class TestBlocks:
    def test_zero_output_layers_make_identity(self, rng):
        cfg = EncoderConfig()
        store = init_encoder_params(nx.ParamStore(), cfg, rng)
        for u in ("u0", "u1"):
            store[f"enc.s0.{u}.attn.wo"].data[...] = 0
            store[f"enc.s0.{u}.mlp.w2"].data[...] = 0
        x = Tensor(rng.standard_normal((2, 8, 8, 16)))
        out = swin_block(x, store, ("enc.s0.u0", "enc.s0.u1"), 1, 4)
        assert out.shape == x.shape
        np.testing.assert_array_equal(out.data, x.data)

    def test_block_preserves_shape(self, rng):
        cfg = EncoderConfig()
        store = init_encoder_params(nx.ParamStore(), cfg, rng)
        x = Tensor(rng.standard_normal((1, 8, 8, 16)))
        assert swin_block(x, store, ("enc.s0.u0", "enc.s0.u1"), 1, 4).shape == (1, 8, 8, 16)

    def test_patch_merge_shapes(self, rng):
        x = Tensor(rng.standard_normal((1, 8, 8, 4)))
        assert patch_merge(x, Tensor(rng.standard_normal((16, 8)))).shape == (1, 4, 4, 8)

    def test_full_scale_merges(self):
        r, c, d = 56, 56, 128
        for _ in range(3):
            r, c, d = r // 2, c // 2, 2 * d
        assert (r, c, d) == (7, 7, 1024)

    def test_patch_merge_concat_order(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        out = patch_merge(Tensor(x), Tensor(np.eye(4))).data
        np.testing.assert_array_equal(out[0, 0, 0], [0, 4, 1, 5])

    def test_constant_grid_stays_constant(self, rng):
        d = 3
        x = Tensor(np.full((1, 4, 4, d), 0.7))
        w = np.vstack([np.eye(d, 2 * d)] * 4) / 4.0
        out = patch_merge(x, Tensor(w)).data
        assert np.ptp(out.reshape(-1, 2 * d), axis=0).max() == 0

    def test_odd_extent(self):
        with pytest.raises(ConfigError):
            patch_merge(Tensor(np.ones((1, 3, 4, 2))), Tensor(np.ones((8, 4))))


class TestEncodeSlice:
    def test_toy_dimension(self, rng):
        cfg = EncoderConfig()
        store = init_encoder_params(nx.ParamStore(), cfg, rng)
        assert encode_slice(rng.random((32, 32)), cfg, store).shape == (128,)

    def test_deterministic_and_batch_consistent(self, rng):
        cfg = EncoderConfig()
        imgs = rng.random((3, 32, 32))
        feats = []
        for _ in range(2):
            store = init_encoder_params(nx.ParamStore(), cfg, np.random.default_rng(5))
            feats.append(encode_slices(imgs, cfg, store).data)
        np.testing.assert_array_equal(feats[0], feats[1])
        single = encode_slice(imgs[1], cfg, store).data
        np.testing.assert_allclose(single, feats[0][1], rtol=1e-5, atol=1e-5)

    def test_end_to_end_gradcheck(self, tiny_cfg, rng):
        model = EvidenceModel(tiny_cfg, seed=0)
        imgs = rng.random((2, 16, 16))
        acc = AccumulatorConfig(threshold=1e9)
        reports = check_gradients(lambda: stream_loss(model, imgs, 1, acc)[0], model.store.params,
                                  probes=20, step=1e-3)
        worst = max(reports, key=lambda r: r.max_rel_error)
        assert worst.max_rel_error < 1e-2, worst
