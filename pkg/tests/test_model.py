import math
from dataclasses import replace

import numpy as np
import pytest

from oracles import naive_attention, naive_backbone, naive_forecast, naive_input
from conftest import random_window
from wireless_fm.core_series import Granularity, TimeSeriesWindow, series_to_grid
from wireless_fm.model import (
    MASK_SENTINEL,
    ModelConfig,
    attention_head,
    backbone,
    causal_mask,
    check_params,
    compose_input,
    embed_patches,
    forward,
    forward_batch,
    granularity_encoding,
    init_params,
    layer_activations,
    multi_head,
    param_shapes,
    positional_encoding,
    project_output,
    softmax,
    transformer_layer,
)


def _input(params, cfg, patches, g):
    n = patches.shape[0]
    return compose_input(embed_patches(patches, params, cfg), positional_encoding(n, cfg.d_model),
                         granularity_encoding(g, n, params))


class TestConfig:
    def test_derived_dims(self):
        c = ModelConfig(d_model=32, num_heads=4)
        assert (c.d_k, c.d_v, c.ffn_hidden, c.max_history) == (8, 8, 128, 64)

    @pytest.mark.parametrize("kw", [{"d_model": 0}, {"num_layers": 0}, {"patch_len": -1},
                                    {"d_model": 7}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_round_trip_and_unknown_keys(self):
        c = ModelConfig(d_model=16, num_heads=2)
        assert ModelConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"d_model": 16, "colour": "red"})


class TestParams:
    def test_shapes_total(self, tiny_cfg):
        p = init_params(tiny_cfg, np.random.default_rng(0))
        check_params(p, tiny_cfg)
        assert set(p) == set(param_shapes(tiny_cfg))
        assert p["granularity.table"].shape == (3, 8)
        assert p["layers.1.attn.w_o"].shape == (2 * tiny_cfg.d_v, 8)

    def test_init_conventions(self, tiny_cfg):
        p = init_params(tiny_cfg, np.random.default_rng(0))
        assert not p["granularity.table"].any() and not p["embed.in.bias"].any()
        assert np.all(p["final_norm.gain"] == 1)
        assert all(v.dtype == np.float32 for v in p.values())

    def test_check_rejects_missing(self, tiny_cfg):
        p = init_params(tiny_cfg, np.random.default_rng(0))
        del p["head.out.bias"]
        with pytest.raises(ValueError, match="head.out.bias"):
            check_params(p, tiny_cfg)


class TestEncodings:
    def test_embed_zero_and_identical_rows(self, tiny_cfg):
        p = init_params(tiny_cfg, np.random.default_rng(0), dtype=np.float64)
        assert not embed_patches(np.zeros((3, 2)), p, tiny_cfg).any()
        e = embed_patches(np.array([[1.0, 2.0], [1.0, 2.0]]), p, tiny_cfg)
        np.testing.assert_array_equal(e[0], e[1])
        assert embed_patches(np.ones((1, 2)), p, tiny_cfg).shape == (1, 8)
        with pytest.raises(ValueError):
            embed_patches(np.ones((1, 3)), p, tiny_cfg)

    def test_positional_values(self):
        pe = positional_encoding(3, 6)
        assert np.all(pe[0, 0::2] == 0) and np.all(pe[0, 1::2] == 1)
        assert pe[1, 0] == pytest.approx(0.84147, abs=1e-5) and pe[1, 1] == pytest.approx(0.54030, abs=1e-5)
        assert np.all(np.abs(positional_encoding(16, 64)) <= 1)
        with pytest.raises(ValueError):
            positional_encoding(3, 5)

    def test_granularity_lookup(self, tiny_params):
        e = granularity_encoding(Granularity.LOW, 4, tiny_params)
        assert np.all(e == e[0])
        assert not np.array_equal(e, granularity_encoding(Granularity.HIGH, 4, tiny_params))

    def test_compose(self):
        np.testing.assert_array_equal(compose_input([[1, 2]], [[3, 4]], [[5, 6]]), [[9, 12]])
        with pytest.raises(ValueError):
            compose_input(np.ones((1, 2)), np.ones((2, 2)), np.ones((1, 2)))


class TestAttention:
    def test_causal_mask(self):
        m = causal_mask(2)
        assert m[0, 0] == 0 and m[1, 0] == 0 and m[1, 1] == 0 and m[0, 1] == MASK_SENTINEL
        assert causal_mask(1).tolist() == [[0]]
        m5 = causal_mask(5)
        assert [(row == 0).sum() for row in m5] == [1, 2, 3, 4, 5]

    def test_masked_weights_exactly_zero(self):
        rng = np.random.default_rng(0)
        w = softmax(rng.standard_normal((4, 4)) * 5 + causal_mask(4))
        assert np.all(w[np.triu_indices(4, 1)] == 0)
        np.testing.assert_allclose(w.sum(-1), 1, atol=1e-12)

    def test_single_token(self):
        rng = np.random.default_rng(1)
        e, wq, wk, wv = (rng.standard_normal(s) for s in [(1, 3), (3, 2), (3, 2), (3, 2)])
        np.testing.assert_allclose(attention_head(e, wq, wk, wv, causal_mask(1)), e @ wv)

    def test_head_matches_loops(self):
        rng = np.random.default_rng(2)
        e, wq, wk, wv = (rng.standard_normal(s) * 0.5 for s in [(3, 2), (2, 2), (2, 2), (2, 2)])
        out = attention_head(e, wq, wk, wv, causal_mask(3))
        q, k, v = e @ wq, e @ wk, e @ wv
        for i in range(3):
            s = [sum(q[i, a] * k[j, a] for a in range(2)) / math.sqrt(2) for j in range(i + 1)]
            w = [math.exp(x) / sum(math.exp(y) for y in s) for x in s]
            for a in range(2):
                assert out[i, a] == pytest.approx(sum(w[j] * v[j, a] for j in range(i + 1)), abs=1e-9)

    def test_row0_independent_of_future(self):
        rng = np.random.default_rng(3)
        e = rng.standard_normal((4, 3))
        w = [rng.standard_normal((3, 3)) for _ in range(3)]
        a = attention_head(e, *w, causal_mask(4))
        e2 = e.copy()
        e2[1:] += 10
        assert np.array_equal(a[0], attention_head(e2, *w, causal_mask(4))[0])

    def test_single_head_identity_projection(self):
        cfg = ModelConfig(d_model=4, num_heads=1, num_layers=1, patch_len=2)
        p = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
        p["layers.0.attn.w_o"] = np.eye(4)
        e = np.random.default_rng(1).standard_normal((3, 4))
        head = attention_head(e, p["layers.0.attn.w_q"][0], p["layers.0.attn.w_k"][0],
                              p["layers.0.attn.w_v"][0], causal_mask(3))
        np.testing.assert_allclose(multi_head(e, p, 0, causal_mask(3)), head, atol=1e-12)

    def test_duplicated_heads_halved_projection(self):
        one = ModelConfig(d_model=4, num_heads=1, d_k=4, d_v=4, num_layers=1, patch_len=2)
        p1 = init_params(one, np.random.default_rng(0), dtype=np.float64)
        p2 = dict(p1)
        for k in ("w_q", "w_k", "w_v"):
            p2[f"layers.0.attn.{k}"] = np.concatenate([p1[f"layers.0.attn.{k}"]] * 2)
        p2["layers.0.attn.w_o"] = np.concatenate([p1["layers.0.attn.w_o"] / 2] * 2)
        e = np.random.default_rng(4).standard_normal((3, 4))
        np.testing.assert_allclose(multi_head(e, p2, 0, causal_mask(3)), multi_head(e, p1, 0, causal_mask(3)),
                                   atol=1e-12)

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_multi_head_shape(self, heads):
        cfg = ModelConfig(d_model=8, num_heads=heads, num_layers=1, patch_len=2)
        p = init_params(cfg, np.random.default_rng(0))
        assert multi_head(np.ones((5, 8), np.float32), p, 0, causal_mask(5)).shape == (5, 8)

    def test_attention_against_oracle(self, tiny_cfg, tiny_params):
        e = np.random.default_rng(5).standard_normal((4, 8))
        got = multi_head(e, tiny_params, 1, causal_mask(4))
        np.testing.assert_allclose(got, naive_attention(e.tolist(), tiny_params, 1, tiny_cfg), atol=1e-12)


class TestLayer:
    def test_zero_output_weights_identity(self, tiny_cfg, tiny_params):
        p = dict(tiny_params)
        for k in ("attn.w_o", "ffn.w2", "ffn.b2"):
            p[f"layers.0.{k}"] = np.zeros_like(p[f"layers.0.{k}"])
        e = np.random.default_rng(0).standard_normal((3, 8))
        np.testing.assert_array_equal(transformer_layer(e, p, 0, causal_mask(3)), e)

    def test_causality_exact(self, tiny_cfg, tiny_params):
        rng = np.random.default_rng(1)
        e = rng.standard_normal((4, 8))
        base = transformer_layer(e, tiny_params, 0, causal_mask(4))
        for j in range(1, 4):
            e2 = e.copy()
            e2[j] += rng.standard_normal(8)
            out = transformer_layer(e2, tiny_params, 0, causal_mask(4))
            assert np.array_equal(out[:j], base[:j])

    def test_backbone_matches_oracle(self, tiny_cfg, tiny_params):
        e = np.random.default_rng(2).standard_normal((4, 8))
        np.testing.assert_allclose(backbone(e, tiny_params, tiny_cfg), naive_backbone(e.tolist(), tiny_params, tiny_cfg),
                                   atol=1e-9)


class TestHead:
    def test_sole_dependence_on_last_row(self, tiny_cfg, tiny_params):
        z = np.random.default_rng(0).standard_normal((5, 8))
        out = project_output(z, tiny_params, tiny_cfg)
        z2 = z.copy()
        z2[:-1] = 99.0
        assert np.array_equal(project_output(z2, tiny_params, tiny_cfg), out)

    def test_zero_input_zero_biases(self, tiny_cfg):
        p = init_params(tiny_cfg, np.random.default_rng(0), dtype=np.float64)
        assert not project_output(np.zeros((2, 8)), p, tiny_cfg).any()

    def test_horizon_for_all_lengths(self):
        cfg = ModelConfig(d_model=16, num_heads=2, num_layers=1)
        p = init_params(cfg, np.random.default_rng(0))
        for n in range(1, 17):
            assert forward_batch(p, cfg, np.ones((1, n, 4)), np.array([0])).shape == (1, 4)


class TestForward:
    def test_batch_matches_oracle(self, tiny_cfg, tiny_params):
        rng = np.random.default_rng(3)
        patches = rng.standard_normal((2, 3, 2))
        gran = np.array([0, 2])
        got = forward_batch(tiny_params, tiny_cfg, patches, gran)
        for b in range(2):
            np.testing.assert_allclose(got[b], naive_forecast(patches[b], gran[b], tiny_params, tiny_cfg), atol=1e-9)

    def test_oracle_without_encodings(self, tiny_cfg, tiny_params):
        cfg = replace(tiny_cfg, use_positional_encoding=False, use_granularity_encoding=False)
        patches = np.random.default_rng(4).standard_normal((1, 4, 2))
        np.testing.assert_allclose(forward_batch(tiny_params, cfg, patches, np.array([1]))[0],
                                   naive_forecast(patches[0], 1, tiny_params, cfg), atol=1e-9)

    def test_window_shape(self):
        cfg = ModelConfig(d_model=16, num_heads=2, num_layers=1, max_patches=8)
        p = init_params(cfg, np.random.default_rng(0))
        w = random_window(np.random.default_rng(0), m=3, length=32, horizon=4)
        assert forward(w, p, cfg).shape == (3, 4)

    def test_variable_permutation(self, tiny_cfg, tiny_params):
        w = random_window(np.random.default_rng(1), m=3, length=7)
        perm = [2, 0, 1]
        wp = TimeSeriesWindow(w.values[perm], w.future[perm], w.delta_t_seconds)
        np.testing.assert_array_equal(forward(wp, tiny_params, tiny_cfg), forward(w, tiny_params, tiny_cfg)[perm])

    def test_pad_equivalence(self):
        cfg = ModelConfig(patch_len=4, d_model=8, num_heads=2, num_layers=2, max_patches=2)
        p = init_params(cfg, np.random.default_rng(2), dtype=np.float64)
        x = np.random.default_rng(3).standard_normal(5)
        short = forward(TimeSeriesWindow(x[None], None, 1.0), p, cfg)
        # Same five samples behind three explicit zeros, with the first three positions masked.
        grid = series_to_grid(x, 4, Granularity.MEDIUM)
        manual = forward_batch(p, cfg, (grid.patches * grid.mask)[None], np.array([1]))[0]
        manual = manual * grid.stats.std + grid.stats.mean
        np.testing.assert_array_equal(short[0], manual)
        assert grid.patches.shape == (2, 4) and grid.mask[0].tolist() == [0, 0, 0, 1]

    def test_truncation_equals_mask_override(self):
        cfg = ModelConfig(patch_len=4, d_model=8, num_heads=2, num_layers=1, max_patches=3)
        p = init_params(cfg, np.random.default_rng(5), dtype=np.float64)
        x = np.random.default_rng(6).standard_normal(12)
        # Masking positions of an already-normalized grid differs from re-normalizing; the
        # documented contract is truncation == inference on the shorter series.
        short = forward(TimeSeriesWindow(x[None, 3:], None, 1.0), p, cfg)
        grid = series_to_grid(x[3:], 4, Granularity.MEDIUM)
        assert grid.pad_count == 3
        direct = forward_batch(p, cfg, grid.patches[None], np.array([1]))[0] * grid.stats.std + grid.stats.mean
        np.testing.assert_array_equal(short[0], direct)

    @pytest.mark.parametrize("a,b", [(3.0, -2.0), (0.01, 5.0), (250.0, 0.0)])
    def test_scale_equivariance(self, tiny_cfg, tiny_params, a, b):
        w = random_window(np.random.default_rng(7), m=2, length=8)
        w2 = TimeSeriesWindow(a * w.values + b, None, w.delta_t_seconds)
        np.testing.assert_allclose(forward(w2, tiny_params, tiny_cfg), a * forward(w, tiny_params, tiny_cfg) + b,
                                   rtol=1e-5, atol=1e-5 * max(1.0, abs(b)))

    def test_too_long(self, tiny_cfg, tiny_params):
        with pytest.raises(ValueError):
            forward(random_window(np.random.default_rng(0), length=9), tiny_params, tiny_cfg)

    def test_layer_activations(self, tiny_cfg, tiny_params):
        x = np.random.default_rng(8).standard_normal(6)
        acts = layer_activations(x, Granularity.HIGH, tiny_params, tiny_cfg)
        assert acts["E"].shape == (3, 8) and len(acts["layers"]) == 2
        grid = series_to_grid(x, 2, Granularity.HIGH)
        np.testing.assert_allclose(acts["E"], naive_input(grid.patches, 0, tiny_params, tiny_cfg), atol=1e-12)
        assert all(l["Q"].shape == (2, 3, tiny_cfg.d_k) for l in acts["layers"])

    def test_causality_end_to_end(self, tiny_cfg, tiny_params):
        rng = np.random.default_rng(9)
        patches = rng.standard_normal((4, 2))
        e = _input(tiny_params, tiny_cfg, patches, Granularity.MEDIUM)
        z = backbone(e, tiny_params, tiny_cfg)
        e2 = e.copy()
        e2[3] += 1.0
        assert np.array_equal(backbone(e2, tiny_params, tiny_cfg)[:3], z[:3])
