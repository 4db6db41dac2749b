import math
import random

import pytest

from mea_lab import tensor as T
from mea_lab.attention import AttnConfig, Variant, group_of, init_attn_weights, rope
from mea_lab.equivalence import (
    check_dfa_as_tha,
    check_postsoftmax_equivalence,
    check_presoftmax_rewrite,
    degeneration_gn_gap_report,
    degeneration_quadratic_report,
    degeneration_residual,
    dfa_transfer_matrix,
    original_postsoftmax_output,
    single_matrix_fit_mismatch,
    transported_postsoftmax_output,
    _standard_maps,
)
from mea_lab.tensor import Tensor
from mea_lab.variants import dfa_forward


def rand(rng, *shape):
    return Tensor.randn(shape, rng)


class TestPresoftmaxRewrite:
    def _both_sides(self, t, q, k, g, h, base=10000.0):
        d_qk = q.shape[2]
        inv = 1.0 / math.sqrt(d_qk)
        qr, kr = rope(q, base), rope(k, base)
        diffs = []
        for i in range(1, h + 1):
            gi = group_of(i, h, g) - 1
            qi = T.head_select(qr, i - 1)
            lhs = None
            for j in range(g):
                term = T.scale(T.matmul_nt(qi, T.head_select(kr, j)),
                               t.at(gi, j) * inv)
                lhs = term if lhs is None else T.add(lhs, term)
            mixed = None
            for j in range(g):
                term = T.scale(T.head_select(k, j), t.at(gi, j))
                mixed = term if mixed is None else T.add(mixed, term)
            rhs = T.scale(T.matmul_nt(qi, T.head_select(
                rope(T.stack_heads([mixed]), base), 0)), inv)
            diffs.append(T.max_abs_diff(lhs, rhs))
        return max(diffs)

    def test_identity_transfer_exactly_zero(self):
        rng = random.Random(0)
        q, k = rand(rng, 5, 4, 4), rand(rng, 5, 2, 4)
        assert self._both_sides(Tensor.eye(2), q, k, g=2, h=4) == 0.0

    def test_position_zero_is_plain_bilinearity(self):
        rng = random.Random(1)
        q, k = rand(rng, 1, 4, 4), rand(rng, 1, 2, 4)
        t = rand(rng, 2, 2)
        assert self._both_sides(t, q, k, g=2, h=4) < 1e-12

    def test_random_transfer_many_positions(self):
        rng = random.Random(2)
        q, k = rand(rng, 6, 4, 4), rand(rng, 6, 2, 4)
        t = rand(rng, 2, 2)
        assert self._both_sides(t, q, k, g=2, h=4) < 1e-10

    def test_check_passes(self):
        report = check_presoftmax_rewrite(trials=60, seed=0)
        assert report.passed and report.max_abs_diff <= 1e-10


class TestDfaAsTha:
    def test_transfer_matrix_construction(self):
        t = dfa_transfer_matrix(Tensor.of([0.3, 0.7]))
        assert t.tolist() == [
            [1.0, -0.3, 0.0, 0.0],
            [1.0, -0.3, 0.0, 0.0],
            [0.0, 0.0, 1.0, -0.7],
            [0.0, 0.0, 1.0, -0.7],
        ]

    def test_zero_lambda(self):
        cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=2, d_model=8,
                         variant=Variant.DFA_NO_GN)
        w = init_attn_weights(cfg, seed=3)
        w.lam = Tensor.of([0.0, 0.0])
        rng = random.Random(4)
        x = rand(rng, 4, 8)
        from mea_lab.equivalence import _postsoftmax_eval
        got = dfa_forward(cfg, w, x)
        tha = _postsoftmax_eval(cfg, w, x, dfa_transfer_matrix(w.lam))
        assert T.max_abs_diff(got, tha) < 1e-12

    @pytest.mark.parametrize("h", [2, 8])
    def test_random_lambda(self, h):
        cfg = AttnConfig(h=h, g=h, d_qk=4, d_v=2, d_model=8,
                         variant=Variant.DFA_NO_GN)
        w = init_attn_weights(cfg, seed=5 + h)
        rng = random.Random(6 + h)
        w.lam = Tensor.of([rng.random() for _ in range(h // 2)])
        x = rand(rng, 5, 8)
        from mea_lab.equivalence import _postsoftmax_eval
        got = dfa_forward(cfg, w, x)
        tha = _postsoftmax_eval(cfg, w, x, dfa_transfer_matrix(w.lam))
        assert T.max_abs_diff(got, tha) < 1e-10

    def test_check_passes(self):
        report = check_dfa_as_tha(trials=60, seed=0)
        assert report.passed


class TestPostsoftmaxTransport:
    def test_identity_transfer_matches_literal_modified(self):
        # At g == h with an identity transfer both orders reduce to plain
        # per-head attention, so they agree exactly.
        cfg = AttnConfig(h=4, g=4, d_qk=4, d_v=2, d_model=8)
        w = init_attn_weights(cfg, seed=7)
        rng = random.Random(8)
        x = rand(rng, 4, 8)
        t = Tensor.eye(4)
        maps, v3 = _standard_maps(cfg, w, x)
        modified = []
        for i in range(4):
            modified.append(T.matmul(maps[i], T.head_select(v3, i)))
        flat = T.stack_heads(modified).reshape(4, 8)
        y_mod = T.matmul(flat, w.wo)
        y_orig = original_postsoftmax_output(cfg, w, x, t)
        assert T.max_abs_diff(y_orig, y_mod) < 1e-12

    def test_transport_g2(self):
        cfg = AttnConfig(h=2, g=2, d_qk=4, d_v=2, d_model=8)
        w = init_attn_weights(cfg, seed=9)
        rng = random.Random(10)
        x, t = rand(rng, 5, 8), rand(rng, 2, 2)
        assert T.max_abs_diff(
            original_postsoftmax_output(cfg, w, x, t),
            transported_postsoftmax_output(cfg, w, x, t)) < 1e-10

    def test_single_group_model_transport(self):
        # g=1: the original evaluation equals a modified-order model with
        # the same scalar transfer and every output block replaced by the
        # sum of the original blocks.
        cfg = AttnConfig(h=4, g=1, d_qk=4, d_v=2, d_model=8)
        w = init_attn_weights(cfg, seed=11)
        rng = random.Random(12)
        x = rand(rng, 4, 8)
        t = Tensor.of([[rng.uniform(0.2, 2.0)]])
        y_orig = original_postsoftmax_output(cfg, w, x, t)
        maps, v3 = _standard_maps(cfg, w, x)
        v1 = T.head_select(v3, 0)
        dm, dv = 8, 2
        summed = Tensor.zeros(dv, dm)
        for i in range(4):
            block = Tensor((dv, dm), w.wo.data[i * dv * dm:(i + 1) * dv * dm])
            summed = T.add(summed, block)
        y_mod = None
        for i in range(4):
            contrib = T.matmul(T.matmul(maps[i], T.scale(v1, t.at(0, 0))), summed)
            y_mod = contrib if y_mod is None else T.add(y_mod, contrib)
        assert T.max_abs_diff(y_orig, y_mod) < 1e-12

    def test_check_passes(self):
        report = check_postsoftmax_equivalence(trials=60, seed=0)
        assert report.passed


class TestDegeneration:
    def test_zero_step_zero_residual(self):
        assert degeneration_residual(0.0, seed=0) == 0.0

    @pytest.mark.parametrize("lr", [1e-2, 1e-3])
    def test_quadratic_ratio(self, lr):
        for seed in range(10):
            r1 = degeneration_residual(lr, seed=seed)
            r2 = degeneration_residual(lr / 2.0, seed=seed)
            assert 3.8 <= r1 / r2 <= 4.2

    def test_loglog_slope(self):
        report = degeneration_quadratic_report(seeds=10, seed=0)
        assert report.passed
        assert report.max_abs_diff <= 0.1

    def test_group_norm_blocks_single_matrix_fit(self):
        plain = single_matrix_fit_mismatch(1e-2, seed=0, use_group_norm=False)
        gn = single_matrix_fit_mismatch(1e-2, seed=0, use_group_norm=True)
        assert gn > 10.0 * plain

    def test_gn_gap_report(self):
        assert degeneration_gn_gap_report(seed=0).passed
