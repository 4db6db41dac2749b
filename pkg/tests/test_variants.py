import math
import random

import pytest

from mea_lab import tensor as T
from mea_lab.attention import AttnConfig, Variant, attend, init_attn_weights
from mea_lab.compress import fuse_wkv, split_wkv
from mea_lab.tensor import Tensor
from mea_lab.variants import (
    dfa_forward,
    group_norm_heads,
    mea_forward,
    recombine_weights,
    tha_forward,
)

import oracles


def rand(rng, *shape):
    return Tensor.randn(shape, rng)


class TestGroupNormHeads:
    def test_unit_head_unchanged(self):
        c = Tensor.full((3, 1, 4), 1.0)
        gain = Tensor.full((1, 4), 1.0)
        assert T.max_abs_diff(group_norm_heads(c, gain, eps=0.0), c) == 0.0

    def test_per_head_scale_invariance(self):
        rng = random.Random(0)
        c = rand(rng, 4, 3, 5)
        scaled = c.copy()
        for p in range(4):
            for d in range(5):
                scaled.data[(p * 3 + 1) * 5 + d] *= 7.5
        gain = Tensor.full((3, 5), 1.0)
        a = group_norm_heads(c, gain, eps=0.0)
        b = group_norm_heads(scaled, gain, eps=0.0)
        assert T.max_abs_diff(a, b) < 1e-12

    def test_matches_per_slice_rms(self):
        rng = random.Random(1)
        c = rand(rng, 3, 2, 4)
        gain = rand(rng, 2, 4)
        got = group_norm_heads(c, gain, eps=1e-6)
        for i in range(2):
            rows = T.head_select(c, i)
            grow = Tensor((4,), gain.data[i * 4:(i + 1) * 4])
            want = T.rms_norm(rows, grow, eps=1e-6)
            assert T.max_abs_diff(T.head_select(got, i), want) < 1e-12

    def test_unit_rms_property(self):
        rng = random.Random(2)
        c = rand(rng, 5, 3, 4)
        out = group_norm_heads(c, Tensor.full((3, 4), 1.0), eps=0.0)
        for p in range(5):
            for i in range(3):
                rms = math.sqrt(sum(out.at(p, i, d) ** 2 for d in range(4)) / 4)
                assert rms == pytest.approx(1.0, abs=1e-12)


class TestMea:
    def test_identity_mixing_is_baseline_bitwise(self):
        base_cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16)
        mea_cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16,
                             variant=Variant.MEA_NO_GN)
        wb = init_attn_weights(base_cfg, seed=3)
        wm = init_attn_weights(mea_cfg, seed=3, hlc_noise=0.0)
        rng = random.Random(4)
        x = rand(rng, 5, 16)
        assert mea_forward(mea_cfg, wm, x).data.tobytes() == \
            attend(base_cfg, wb, x).data.tobytes()

    def test_one_hot_column_selects_component_head(self):
        cfg = AttnConfig(h=2, g=2, d_qk=4, d_v=4, d_model=8,
                         variant=Variant.MEA_NO_GN)
        w = init_attn_weights(cfg, seed=5, hlc_noise=0.0)
        # Composite value head 1 := component head 0.
        w.w_lc_v = Tensor.of([[1.0, 1.0], [0.0, 0.0]])
        rng = random.Random(6)
        x = rand(rng, 4, 8)
        got = mea_forward(cfg, w, x)
        # Oracle: fold the mixing into the fused projection and attend.
        wk, wv = split_wkv(w.wkv, 2, 4, 4)
        wv_folded = recombine_weights(w.w_lc_v, wv)
        wk_folded = recombine_weights(w.w_lc_k, wk)
        base_cfg = AttnConfig(h=2, g=2, d_qk=4, d_v=4, d_model=8)
        wb = init_attn_weights(base_cfg, seed=5)
        wb.wkv = fuse_wkv(wk_folded, wv_folded, 2)
        assert T.max_abs_diff(got, attend(base_cfg, wb, x)) < 1e-12

    @pytest.mark.parametrize("variant", [Variant.MEA, Variant.MEA_NO_GN])
    def test_matches_loop_oracle(self, variant):
        cfg = AttnConfig(h=4, g=2, d_qk=4, d_v=2, d_model=8, variant=variant)
        w = init_attn_weights(cfg, seed=7)
        rng = random.Random(8)
        x = rand(rng, 5, 8)
        got = mea_forward(cfg, w, x)
        want = oracles.mea(
            x.tolist(), w.wq.tolist(), w.wkv.tolist(), w.wo.tolist(),
            w.w_lc_k.tolist(), w.w_lc_v.tolist(),
            w.gn_gain.tolist() if w.gn_gain is not None else None,
            h=4, g=2, hp=4, d_qk=4, d_v=2)
        assert oracles.max_diff(got.tolist(), want) < 1e-10

    def test_random_mixing_equals_weight_folding(self):
        cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16,
                         variant=Variant.MEA_NO_GN)
        w = init_attn_weights(cfg, seed=9, hlc_noise=0.25)
        rng = random.Random(10)
        x = rand(rng, 6, 16)
        got = mea_forward(cfg, w, x)
        wk, wv = split_wkv(w.wkv, 4, 4, 4)
        base_cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16)
        wb = init_attn_weights(base_cfg, seed=9)
        wb.wkv = fuse_wkv(recombine_weights(w.w_lc_k, wk),
                          recombine_weights(w.w_lc_v, wv), 4)
        assert T.max_abs_diff(got, attend(base_cfg, wb, x)) < 1e-10

    def test_fewer_component_heads(self):
        cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16, h_prime=2,
                         variant=Variant.MEA_NO_GN)
        w = init_attn_weights(cfg, seed=11)
        assert w.wkv.shape == (16, 2 * 8)
        assert w.w_lc_k.shape == (2, 4)
        rng = random.Random(12)
        out = mea_forward(cfg, w, rand(rng, 3, 16))
        assert out.shape == (3, 16)
        assert T.all_finite(out)


class TestDfa:
    def test_lambda_zero_shares_scores_over_concat_values(self):
        cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=2, d_model=8,
                         variant=Variant.DFA_NO_GN, lambda_init=0.0)
        w = init_attn_weights(cfg, seed=13)
        rng = random.Random(14)
        x = rand(rng, 4, 8)
        got = dfa_forward(cfg, w, x)
        want = oracles.dfa(x.tolist(), w.wq.tolist(), w.wkv.tolist(),
                           w.wo.tolist(), [0.0, 0.0], None, 0.0,
                           h=4, g=4, d_qk=4, d_v=2, use_gn=False)
        assert oracles.max_diff(got.tolist(), want) < 1e-12

    def test_identical_pair_with_lambda_one_cancels(self):
        cfg = AttnConfig(h=2, g=2, d_qk=4, d_v=2, d_model=8,
                         variant=Variant.DFA_NO_GN, lambda_init=1.0)
        w = init_attn_weights(cfg, seed=15)
        # Make the pair share queries and keys: copy head blocks.
        for r in range(8):
            for c in range(4):
                w.wq.data[r * 8 + 4 + c] = w.wq.at(r, c)
        span = 6
        for r in range(8):
            for c in range(4):
                w.wkv.data[r * 12 + span + c] = w.wkv.at(r, c)
        rng = random.Random(16)
        out = dfa_forward(cfg, w, rand(rng, 4, 8))
        assert T.frobenius_norm(out) < 1e-12

    @pytest.mark.parametrize("variant,use_gn", [(Variant.DFA, True),
                                                (Variant.DFA_NO_GN, False)])
    def test_matches_loop_oracle(self, variant, use_gn):
        cfg = AttnConfig(h=4, g=2, d_qk=4, d_v=2, d_model=8, variant=variant,
                         lambda_init=0.35)
        w = init_attn_weights(cfg, seed=17)
        w.lam = Tensor.of([0.2, 0.8])
        rng = random.Random(18)
        x = rand(rng, 5, 8)
        got = dfa_forward(cfg, w, x)
        want = oracles.dfa(
            x.tolist(), w.wq.tolist(), w.wkv.tolist(), w.wo.tolist(),
            [0.2, 0.8], w.gn_gain.tolist() if use_gn else None, 0.35,
            h=4, g=2, d_qk=4, d_v=2, use_gn=use_gn)
        assert oracles.max_diff(got.tolist(), want) < 1e-10

    def test_pair_widths(self):
        cfg = AttnConfig(h=6, g=6, d_qk=4, d_v=3, d_model=12,
                         variant=Variant.DFA)
        w = init_attn_weights(cfg, seed=19)
        assert cfg.pairs == 3
        assert w.gn_gain.shape == (3, 6)          # pair width 2 * d_v
        assert w.wo.shape == (6 * 3, 12)          # total width h * d_v
        rng = random.Random(20)
        assert dfa_forward(cfg, w, rand(rng, 3, 12)).shape == (3, 12)


class TestTha:
    @pytest.mark.parametrize("variant", [Variant.THA, Variant.THA_MODIFIED])
    def test_identity_transfer_is_baseline(self, variant):
        cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16, variant=variant)
        w = init_attn_weights(cfg, seed=21, hlc_noise=0.0)
        base_cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=4, d_model=16)
        wb = init_attn_weights(base_cfg, seed=21)
        rng = random.Random(22)
        x = rand(rng, 5, 16)
        assert T.max_abs_diff(tha_forward(cfg, w, x),
                              attend(base_cfg, wb, x)) < 1e-12

    def test_modified_identity_reduces_for_grouped_heads(self):
        cfg = AttnConfig(h=4, g=2, d_qk=4, d_v=4, d_model=16,
                         variant=Variant.THA_MODIFIED)
        w = init_attn_weights(cfg, seed=23, hlc_noise=0.0)
        base_cfg = AttnConfig(h=4, g=2, d_qk=4, d_v=4, d_model=16)
        wb = init_attn_weights(base_cfg, seed=23)
        rng = random.Random(24)
        x = rand(rng, 5, 16)
        assert T.max_abs_diff(tha_forward(cfg, w, x),
                              attend(base_cfg, wb, x)) < 1e-12

    @pytest.mark.parametrize("variant,oracle", [
        (Variant.THA, oracles.tha_original),
        (Variant.THA_MODIFIED, oracles.tha_modified),
    ])
    @pytest.mark.parametrize("g", [1, 2, 4])
    def test_matches_loop_oracle(self, variant, oracle, g):
        cfg = AttnConfig(h=4, g=g, d_qk=4, d_v=2, d_model=8, variant=variant)
        w = init_attn_weights(cfg, seed=25 + g, hlc_noise=0.3)
        rng = random.Random(26 + g)
        x = rand(rng, 5, 8)
        got = tha_forward(cfg, w, x)
        want = oracle(x.tolist(), w.wq.tolist(), w.wkv.tolist(),
                      w.wo.tolist(), w.t_qk.tolist(), w.t_v.tolist(),
                      h=4, g=g, d_qk=4, d_v=2)
        assert oracles.max_diff(got.tolist(), want) < 1e-10


class TestRecombine:
    def test_identity_returns_projection(self):
        rng = random.Random(27)
        w_comp = rand(rng, 6, 4 * 3)
        assert T.max_abs_diff(recombine_weights(Tensor.eye(4), w_comp),
                              w_comp) == 0.0

    def test_defining_property(self):
        rng = random.Random(28)
        w_lc = rand(rng, 3, 5)
        w_comp = rand(rng, 6, 3 * 2)
        folded = recombine_weights(w_lc, w_comp)
        for _ in range(50):
            x = rand(rng, 1, 6)
            direct = T.matmul(x, folded)
            mixed = T.head_mix(T.matmul(x, w_comp).reshape(1, 3, 2), w_lc)
            assert T.max_abs_diff(direct, mixed.reshape(1, 10)) < 1e-12

    def test_associativity(self):
        rng = random.Random(29)
        w2 = rand(rng, 4, 6)
        w1 = rand(rng, 3, 4)
        w_comp = rand(rng, 5, 3 * 2)
        left = recombine_weights(T.matmul(w1, w2), w_comp)
        right = recombine_weights(w2, recombine_weights(w1, w_comp))
        assert T.max_abs_diff(left, right) < 1e-12

    def test_distributivity(self):
        rng = random.Random(30)
        w_lc = rand(rng, 3, 4)
        a = rand(rng, 5, 6)
        b = rand(rng, 5, 6)
        left = recombine_weights(w_lc, T.add(a, b))
        right = T.add(recombine_weights(w_lc, a), recombine_weights(w_lc, b))
        assert T.max_abs_diff(left, right) < 1e-12
        # and over the mixing argument
        m1, m2 = rand(rng, 3, 4), rand(rng, 3, 4)
        left2 = recombine_weights(T.add(m1, m2), a)
        right2 = T.add(recombine_weights(m1, a), recombine_weights(m2, a))
        assert T.max_abs_diff(left2, right2) < 1e-12
