import math
import random

import pytest

from mea_lab.scaling import (
    DataError,
    LossCurve,
    ScalingFit,
    SelectionError,
    detect_spike,
    extrapolate,
    fit_power_law,
    select_lr,
)
from mea_lab.tensor import ContractError


def power_curve(dc, alpha, l0, n=20, lo=1e8, hi=5e10, seed=None, noise=0.0,
                lr=None):
    """Samples of (dc/d)^alpha + l0; optional uniform multiplicative noise
    on the decaying term."""
    rng = random.Random(seed)
    pts = []
    for i in range(n):
        d = lo * (hi / lo) ** (i / (n - 1)) if n > 1 else lo
        term = (dc / d) ** alpha
        if noise:
            term *= 1.0 + rng.uniform(-noise, noise)
        pts.append((d, term + l0))
    return LossCurve(points=pts, lr=lr)


class TestFit:
    def test_noiseless_recovery_within_one_percent(self):
        fit = fit_power_law(power_curve(1e9, 0.3, 1.8))
        assert fit.converged
        assert abs(fit.d_c - 1e9) / 1e9 < 0.01
        assert abs(fit.alpha_d - 0.3) / 0.3 < 0.01
        assert abs(fit.l_0 - 1.8) / 1.8 < 0.01

    def test_constant_curve_collapses_to_floor(self):
        fit = fit_power_law(LossCurve(points=[(1e6 * (i + 1), 2.0)
                                              for i in range(10)]))
        assert abs(fit.l_0 - 2.0) < 1e-6
        assert fit.rmse < 1e-6
        assert fit.d_c > 0.0 and fit.alpha_d > 0.0

    def test_noisy_recovery_nine_of_ten(self):
        ok = 0
        for seed in range(10):
            fit = fit_power_law(power_curve(1e9, 0.3, 1.8, seed=seed, noise=0.01))
            ok += (abs(fit.d_c - 1e9) / 1e9 < 0.1
                   and abs(fit.alpha_d - 0.3) / 0.3 < 0.1
                   and abs(fit.l_0 - 1.8) / 1.8 < 0.1)
        assert ok >= 9

    def test_parameter_range_sweep(self):
        rng = random.Random(1)
        for _ in range(12):
            alpha = 10 ** rng.uniform(math.log10(0.05), 0.0)
            dc = 10 ** rng.uniform(6, 12)
            l0 = rng.uniform(0.5, 5.0)
            fit = fit_power_law(power_curve(dc, alpha, l0, lo=dc * 0.01,
                                            hi=dc * 100.0))
            assert abs(fit.d_c - dc) / dc < 0.01
            assert abs(fit.alpha_d - alpha) / alpha < 0.01
            assert abs(fit.l_0 - l0) / l0 < 0.01

    def test_prediction_strictly_decreasing(self):
        fit = fit_power_law(power_curve(5e8, 0.4, 2.2))
        ds = [10 ** e for e in range(6, 14)]
        preds = [extrapolate(fit, d) for d in ds]
        assert all(a > b for a, b in zip(preds, preds[1:]))

    def test_data_errors(self):
        with pytest.raises(DataError):
            fit_power_law(power_curve(1e9, 0.3, 1.8, n=4))
        with pytest.raises(DataError):
            fit_power_law(LossCurve(points=[(1e6 + i, -1.0 + i)
                                            for i in range(6)]))
        with pytest.raises(DataError):
            LossCurve(points=[(2.0, 1.0), (1.0, 1.0)])


class TestExtrapolate:
    def test_limit_is_floor(self):
        fit = fit_power_law(power_curve(1e9, 0.3, 1.8))
        assert extrapolate(fit, 1e300) == pytest.approx(fit.l_0, abs=1e-9)

    def test_at_dc_is_floor_plus_one(self):
        fit = fit_power_law(power_curve(1e9, 0.3, 1.8))
        assert extrapolate(fit, fit.d_c) == pytest.approx(fit.l_0 + 1.0,
                                                          abs=1e-9)

    def test_round_trip_within_rmse(self):
        curve = power_curve(1e9, 0.3, 1.8)
        fit = fit_power_law(curve)
        for d, loss in curve.points:
            assert abs(extrapolate(fit, d) - loss) <= fit.rmse + 1e-9

    def test_requires_convergence(self):
        fit = ScalingFit(d_c=1e9, alpha_d=0.3, l_0=1.8, rmse=0.0,
                         converged=False)
        with pytest.raises(ContractError):
            extrapolate(fit, 1e9)


def step_curve(n=64, step_at=40, base=2.0, jump=2.0, recover=False):
    pts = []
    for i in range(n):
        loss = base
        if i >= step_at:
            loss = base + jump
        if recover and i >= step_at + 3:
            loss = base
        pts.append((float(i + 1) * 100.0, loss))
    return LossCurve(points=pts)


class TestDetectSpike:
    def test_monotone_decreasing_clean(self):
        curve = LossCurve(points=[(float(i + 1), 5.0 / (i + 1) + 1.0)
                                  for i in range(64)])
        assert detect_spike(curve) == []

    def test_permanent_step_is_one_spike_at_onset(self):
        assert detect_spike(step_curve()) == [40]

    def test_transient_dip_recovers(self):
        assert detect_spike(step_curve(recover=True)) == []

    def test_rescale_invariance(self):
        curve = step_curve()
        scaled = LossCurve(points=[(t, l * 37.5) for t, l in curve.points])
        assert detect_spike(curve) == detect_spike(scaled)

    def test_window_contract(self):
        with pytest.raises(ContractError):
            detect_spike(step_curve(), window=1)


class TestSelectLr:
    def test_spiking_large_lr_rejected(self):
        stable = power_curve(2e5, 0.4, 2.0, n=64, lo=1e3, hi=6.4e4, lr=1e-3)
        spiky = step_curve()
        spiky = LossCurve(points=spiky.points, lr=3e-3)
        sel = select_lr([stable, spiky])
        assert sel.chosen_lr == 1e-3

    def test_largest_stable_wins_regardless_of_loss(self):
        low = power_curve(2e5, 0.5, 1.0, n=32, lo=1e3, hi=3.2e4, lr=1e-4)
        high = power_curve(2e5, 0.2, 3.0, n=32, lo=1e3, hi=3.2e4, lr=1e-3)
        assert select_lr([low, high]).chosen_lr == 1e-3

    def test_four_lr_scenario(self):
        # Smallest lr crawls (fits poorly but stable), middle two stable,
        # largest spikes: the larger stable middle rate wins.
        rng = random.Random(0)
        slow_pts = [(float(i + 1) * 1000, 5.0 - 0.6 * (i / 63.0)
                     + rng.gauss(0, 1e-3)) for i in range(64)]
        slow = LossCurve(points=slow_pts, lr=1e-4)
        mid1 = power_curve(2e5, 0.4, 2.0, n=64, lo=1e3, hi=6.4e4, lr=5e-4)
        mid2 = power_curve(2e5, 0.4, 1.9, n=64, lo=1e3, hi=6.4e4, lr=1e-3)
        spiky = LossCurve(points=step_curve().points, lr=3e-3)
        sel = select_lr([slow, mid1, mid2, spiky])
        assert sel.chosen_lr == 1e-3
        by_lr = {g.lr: g for g in sel.groups}
        assert not by_lr[3e-3].stable
        assert by_lr[1e-4].stable

    def test_all_spiking_raises_with_report(self):
        a = LossCurve(points=step_curve().points, lr=1e-3)
        b = LossCurve(points=step_curve(step_at=30).points, lr=3e-3)
        with pytest.raises(SelectionError) as exc:
            select_lr([a, b])
        assert "groups" in exc.value.report

    def test_requires_lr_metadata_and_two_rates(self):
        with pytest.raises(DataError):
            select_lr([power_curve(1e5, 0.3, 2.0, n=8, lo=1e3, hi=8e3)])
        with pytest.raises(DataError):
            select_lr([power_curve(1e5, 0.3, 2.0, n=8, lo=1e3, hi=8e3, lr=1e-3)])
