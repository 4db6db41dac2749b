import math
import random

import pytest

from mea_lab import bundle
from mea_lab import tensor as T
from mea_lab.attention import AttnConfig, attend, init_attn_weights
from mea_lab.compress import (
    apply_compressed_attention,
    build_plan,
    compress_layer,
    compress_projection,
    fuse_wkv,
    profile_layers,
    reshape_by_head,
    split_wkv,
    unreshape_by_head,
)
from mea_lab.linalg import svd
from mea_lab.model import ModelConfig, evaluate_ce, init_model
from mea_lab.tensor import ShapeError, Tensor
from mea_lab.variants import recombine_weights


def rand(rng, *shape):
    return Tensor.randn(shape, rng)


class TestReshape:
    def test_single_head_is_flatten(self):
        rng = random.Random(0)
        w = rand(rng, 4, 3)
        r = reshape_by_head(w, 1)
        assert r.shape == (12, 1)
        assert list(r.data) == list(w.data)

    def test_round_trip_bit_exact(self):
        rng = random.Random(1)
        w = rand(rng, 5, 4 * 3)
        r = reshape_by_head(w, 4)
        back = unreshape_by_head(r, 5)
        assert back.data.tobytes() == w.data.tobytes()

    def test_index_formula(self):
        rng = random.Random(2)
        dim, d_k, heads = 4, 2, 3
        w = rand(rng, dim, heads * d_k)
        r = reshape_by_head(w, heads)
        for i in range(dim):
            for j in range(heads):
                for c in range(d_k):
                    assert r.at(i * d_k + c, j) == w.at(i, j * d_k + c)

    def test_divisibility(self):
        with pytest.raises(ShapeError):
            reshape_by_head(Tensor.zeros(4, 7), 3)


class TestCompressProjection:
    def test_full_rank_lossless(self):
        rng = random.Random(3)
        w = rand(rng, 8, 4 * 2)
        basis, lc, disc = compress_projection(w, 4, 4)
        assert disc == []
        assert T.frobenius_norm(T.sub(recombine_weights(lc, basis), w)) < 1e-8

    def test_duplicated_heads_compress_losslessly(self):
        rng = random.Random(4)
        half = rand(rng, 8, 2)
        w = Tensor.zeros(8, 4)
        for i in range(8):
            w.data[i * 4:i * 4 + 2] = half.data[i * 2:(i + 1) * 2]
            w.data[i * 4 + 2:i * 4 + 4] = half.data[i * 2:(i + 1) * 2]
        basis, lc, disc = compress_projection(w, 2, 1)
        assert T.frobenius_norm(T.sub(recombine_weights(lc, basis), w)) < 1e-8

    @pytest.mark.parametrize("h_prime", [1, 2, 3, 4])
    def test_error_equals_discarded_sigma(self, h_prime):
        rng = random.Random(5 + h_prime)
        w = rand(rng, 6, 4 * 2)
        basis, lc, disc = compress_projection(w, 4, h_prime)
        err = T.frobenius_norm(T.sub(recombine_weights(lc, basis), w))
        assert abs(err - math.sqrt(sum(s * s for s in disc))) < 1e-8

    def test_matches_truncated_svd_reconstruction(self):
        rng = random.Random(9)
        w = rand(rng, 6, 4 * 2)
        basis, lc, _ = compress_projection(w, 4, 2)
        res = svd(reshape_by_head(w, 4))
        direct = unreshape_by_head(res.reconstruct(2), 6)
        assert T.max_abs_diff(recombine_weights(lc, basis), direct) < 1e-10

    def test_error_monotone_in_h_prime(self):
        rng = random.Random(10)
        w = rand(rng, 6, 4 * 2)
        errs = []
        for hp in (1, 2, 3, 4):
            basis, lc, _ = compress_projection(w, 4, hp)
            errs.append(T.frobenius_norm(T.sub(recombine_weights(lc, basis), w)))
        assert all(errs[i] >= errs[i + 1] - 1e-12 for i in range(3))


class TestCompressedAttention:
    def _cfg_weights(self, seed, dup=False):
        cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16)
        w = init_attn_weights(cfg, seed=seed)
        if dup:
            span = 8
            for r in range(16):
                for c in range(span):
                    w.wkv.data[r * 32 + span + c] = w.wkv.at(r, c)
                    w.wkv.data[r * 32 + 3 * span + c] = w.wkv.at(r, 2 * span + c)
        return cfg, w

    def test_full_virtual_heads_match_uncompressed(self):
        cfg, w = self._cfg_weights(0)
        comp = compress_layer(w.wkv, 4, 4, 4, 4)
        rng = random.Random(1)
        x = rand(rng, 5, 16)
        assert T.max_abs_diff(apply_compressed_attention(cfg, comp, w, x),
                              attend(cfg, w, x)) < 1e-8

    def test_duplicated_heads_halve_losslessly(self):
        cfg, w = self._cfg_weights(2, dup=True)
        comp = compress_layer(w.wkv, 4, 4, 4, 2)
        rng = random.Random(3)
        x = rand(rng, 5, 16)
        assert T.max_abs_diff(apply_compressed_attention(cfg, comp, w, x),
                              attend(cfg, w, x)) < 1e-8

    def test_matches_folded_weights_oracle(self):
        cfg, w = self._cfg_weights(4)
        comp = compress_layer(w.wkv, 4, 4, 4, 2)
        rng = random.Random(5)
        x = rand(rng, 6, 16)
        got = apply_compressed_attention(cfg, comp, w, x)
        folded = init_attn_weights(cfg, seed=4)
        folded.wkv = fuse_wkv(recombine_weights(comp.k_lc, comp.k_basis),
                              recombine_weights(comp.v_lc, comp.v_basis), 4)
        assert T.max_abs_diff(got, attend(cfg, folded, x)) < 1e-10

    def test_cache_bytes_halve(self, tmp_path):
        # Serialized per-token K/V storage at H' = H/2 is exactly half the
        # baseline payload byte count.
        n, h, d_qk, d_v = 12, 4, 4, 4
        full = Tensor.zeros(n, h, d_qk + d_v)
        half = Tensor.zeros(n, h // 2, d_qk + d_v)
        p_full = str(tmp_path / "full.tb")
        p_half = str(tmp_path / "half.tb")
        bundle.write_bundle(p_full, {"kv_cache": full})
        bundle.write_bundle(p_half, {"kv_cache": half})
        len_full = bundle.read_manifest(p_full)[0]["len"]
        len_half = bundle.read_manifest(p_half)[0]["len"]
        assert len_half * 2 == len_full


class TestSplitFuse:
    def test_round_trip(self):
        rng = random.Random(6)
        wkv = rand(rng, 8, 3 * 6)
        wk, wv = split_wkv(wkv, 3, 4, 2)
        assert fuse_wkv(wk, wv, 3).data.tobytes() == wkv.data.tobytes()

    def test_split_matches_column_layout(self):
        rng = random.Random(7)
        wkv = rand(rng, 4, 2 * 5)
        wk, wv = split_wkv(wkv, 2, 3, 2)
        for r in range(4):
            assert wk.at(r, 0) == wkv.at(r, 0)
            assert wk.at(r, 3) == wkv.at(r, 5)
            assert wv.at(r, 0) == wkv.at(r, 3)
            assert wv.at(r, 2) == wkv.at(r, 8)


class TestProfile:
    def _model(self, seed=0, layers=2):
        acfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16)
        mcfg = ModelConfig(layers=layers, d_model=16, attn=acfg,
                           ffn_hidden=32, vocab=32, max_seq=16)
        return mcfg, init_model(mcfg, seed=seed)

    def test_full_heads_leave_loss_unchanged(self):
        mcfg, params = self._model()
        rng = random.Random(8)
        tokens = [rng.randrange(32) for _ in range(120)]
        profile = profile_layers(mcfg, params, tokens, h_prime=4, seq_len=12)
        assert len(profile.rows) == 2
        for row in profile.rows:
            assert abs(row.delta) < 1e-6

    def test_random_model_rows_and_finite_deltas(self):
        mcfg, params = self._model(seed=3)
        rng = random.Random(9)
        tokens = [rng.randrange(32) for _ in range(120)]
        profile = profile_layers(mcfg, params, tokens, h_prime=2, seq_len=12)
        assert [r.layer for r in profile.rows] == [0, 1]
        for row in profile.rows:
            assert math.isfinite(row.delta)
            assert row.baseline_ce == profile.rows[0].baseline_ce

    def test_deltas_match_folded_weights_evaluation(self):
        mcfg, params = self._model(seed=4)
        rng = random.Random(10)
        tokens = [rng.randrange(32) for _ in range(120)]
        profile = profile_layers(mcfg, params, tokens, h_prime=2, seq_len=12)
        for row in profile.rows:
            comp = compress_layer(params[f"layer{row.layer}.attn.wkv"],
                                  4, 4, 4, 2)
            folded = dict(params)
            folded[f"layer{row.layer}.attn.wkv"] = fuse_wkv(
                recombine_weights(comp.k_lc, comp.k_basis),
                recombine_weights(comp.v_lc, comp.v_basis), 4)
            want = evaluate_ce(mcfg, folded, tokens, seq_len=12)
            assert abs(row.compressed_ce - want) < 1e-6

    def test_build_plan_selects_layers(self):
        mcfg, params = self._model(seed=5)
        plan = build_plan(mcfg, params, h_prime=2, layer_ids=[1])
        assert plan.layer_ids == [1]
        assert plan.layers[1].h_prime == 2
