"""Power-law loss-curve fitting, spike detection, and learning-rate choice.

The data law fitted here is L(D) = (D_c / D)^alpha + L_0. The fitter is
derivative-free and reproducible: grid the loss floor below min(L), solve
the remaining two parameters by linear regression in log space, then polish
all three coordinates with golden-section descent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from statistics import median
from typing import Optional, Sequence

from mea_lab.tensor import ContractError


class DataError(ValueError):
    """Input data violates a fitting precondition."""


class SelectionError(RuntimeError):
    """No learning rate survived spike filtering."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


@dataclass
class LossCurve:
    points: list[tuple[float, float]]  # (tokens, loss), tokens increasing
    lr: Optional[float] = None
    label: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        last = 0.0
        for tokens, loss in self.points:
            if tokens <= last:
                raise DataError("token counts must be strictly increasing")
            if not math.isfinite(loss):
                raise DataError("losses must be finite")
            last = tokens

    @property
    def losses(self) -> list[float]:
        return [l for _, l in self.points]

    @property
    def tokens(self) -> list[float]:
        return [t for t, _ in self.points]


@dataclass
class ScalingFit:
    d_c: float
    alpha_d: float
    l_0: float
    rmse: float
    converged: bool

    def to_dict(self) -> dict:
        return asdict(self)


_ALPHA_MIN = 1e-6
_ALPHA_MAX = 20.0


def _regress(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float]:
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    if sxx == 0.0:
        return 0.0, my
    b = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sxx
    return b, my - b * mx


def _golden(fn, lo: float, hi: float, iters: int = 48) -> tuple[float, float]:
    phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fn(d)
    mid = (a + b) / 2.0
    return mid, fn(mid)


class _Objective:
    """Squared-error objective over (l0, alpha, c) where the power term is
    exp(c - alpha * (ln D - mean ln D)). Centering decorrelates alpha from
    the level c, which keeps coordinate descent effective."""

    def __init__(self, ln_ds: Sequence[float], losses: Sequence[float]):
        self.center = sum(ln_ds) / len(ln_ds)
        self.xs = [v - self.center for v in ln_ds]
        self.losses = losses

    def rmse(self, l0: float, alpha: float, c: float) -> float:
        s = 0.0
        for x, loss in zip(self.xs, self.losses):
            e = c - alpha * x
            if e > 700.0:
                e = 700.0
            diff = l0 + math.exp(e) - loss
            s += diff * diff
        return math.sqrt(s / len(self.losses))

    def fit_at_floor(self, l0: float) -> tuple[float, float, float] | None:
        """Log-space regression of (alpha, c) for a fixed floor."""
        if any(loss <= l0 for loss in self.losses):
            return None
        ys = [math.log(loss - l0) for loss in self.losses]
        b, c = _regress(self.xs, ys)
        alpha = -b
        if alpha < _ALPHA_MIN:
            alpha = _ALPHA_MIN
            c = sum(ys) / len(ys)
        elif alpha > _ALPHA_MAX:
            alpha = _ALPHA_MAX
        return alpha, c, self.rmse(l0, alpha, c)


def fit_power_law(curve: LossCurve) -> ScalingFit:
    """Least-squares fit of (d_c, alpha_d, l_0) to the curve."""
    if len(curve.points) < 5:
        raise DataError(f"need at least 5 points, got {len(curve.points)}")
    for tokens, loss in curve.points:
        if tokens <= 0.0:
            raise DataError("token counts must be positive")
        if loss <= 0.0:
            raise DataError("losses must be positive")
    ln_ds = [math.log(t) for t in curve.tokens]
    losses = curve.losses
    min_l = min(losses)
    obj = _Objective(ln_ds, losses)

    # Floor grid below min(loss): coarse linear span plus a geometric
    # approach to the minimum, (alpha, c) refit by regression at each floor.
    candidates = [0.0]
    candidates += [min_l * i / 16.0 for i in range(1, 16)]
    candidates += [min_l * (1.0 - 10.0 ** (-u / 4.0)) for u in range(2, 49)]
    scored = []
    for l0 in sorted(set(candidates)):
        fit = obj.fit_at_floor(l0)
        if fit is not None:
            scored.append((fit[2], l0, fit[0], fit[1]))
    if not scored:
        raise DataError("no feasible loss floor below the observed losses")
    err, l0, alpha, c = min(scored)

    # Refine the floor with the inner regression still applied per probe.
    l0_cap = min_l * (1.0 - 1e-12)

    def floor_err(v: float) -> float:
        fit = obj.fit_at_floor(v)
        return fit[2] if fit is not None else math.inf

    lo = max(0.0, l0 - min_l / 8.0)
    hi = min(l0_cap, l0 + min_l / 8.0)
    l0_ref, err_ref = _golden(floor_err, lo, hi)
    if err_ref < err:
        l0 = l0_ref
        alpha, c, err = obj.fit_at_floor(l0)[0:3]

    # Coordinate polish with adaptive brackets (true least squares in the
    # original space; the regression init optimizes log space).
    br = [max(min_l / 64.0, 1e-9), max(alpha / 4.0, 1e-4), 0.5]
    theta = [l0, alpha, c]
    bounds = [(0.0, l0_cap), (_ALPHA_MIN, _ALPHA_MAX), (-1e6, 1e6)]
    converged = False
    for _ in range(200):
        improved = False
        for i in range(3):
            lo_i = max(bounds[i][0], theta[i] - br[i])
            hi_i = min(bounds[i][1], theta[i] + br[i])
            if hi_i <= lo_i:
                continue

            def coord(v, i=i):
                probe = list(theta)
                probe[i] = v
                return obj.rmse(*probe)

            v, e = _golden(coord, lo_i, hi_i, iters=32)
            if e < err:
                if err - e > 1e-14 * max(err, 1e-14):
                    improved = True
                theta[i] = v
                err = e
            # Shrink around interior optima, stretch when pinned at an edge.
            if v - lo_i < 0.05 * (hi_i - lo_i) or hi_i - v < 0.05 * (hi_i - lo_i):
                br[i] = min(br[i] * 2.0, abs(theta[i]) + 1.0)
            else:
                br[i] *= 0.5
        if max(br) < 1e-13 or not improved:
            converged = True
            break
    l0, alpha, c = theta

    exponent = c / alpha + obj.center
    if exponent > 700.0:
        exponent = 700.0
    elif exponent < -700.0:
        exponent = -700.0
    return ScalingFit(d_c=math.exp(exponent), alpha_d=alpha, l_0=l0,
                      rmse=err, converged=converged)


def extrapolate(fit: ScalingFit, d: float) -> float:
    """Predicted loss at d training tokens."""
    if not fit.converged:
        raise ContractError("extrapolate requires a converged fit")
    if d <= 0.0:
        raise DataError("token count must be positive")
    e = fit.alpha_d * (math.log(fit.d_c) - math.log(d))
    if e > 700.0:
        e = 700.0
    return fit.l_0 + math.exp(e)


def detect_spike(curve: LossCurve, window: int = 16,
                 threshold: float = 0.15) -> list[int]:
    """Onset indices of unrecoverable loss spikes.

    Index i is flagged when loss[i] exceeds the median of the previous
    `window` losses by the relative `threshold` AND no later loss returns
    to or below that median. Runs of consecutive flagged indices collapse
    to their first index (one spike event).
    """
    if window < 2:
        raise ContractError("spike window must be >= 2")
    losses = curve.losses
    flagged = []
    for i in range(window, len(losses)):
        med = median(losses[i - window:i])
        if losses[i] <= med * (1.0 + threshold):
            continue
        if any(l <= med for l in losses[i + 1:]):
            continue
        flagged.append(i)
    onsets = [i for k, i in enumerate(flagged)
              if k == 0 or flagged[k - 1] != i - 1]
    return onsets


@dataclass
class LrGroupReport:
    lr: float
    stable: bool
    spike_indices: list[list[int]]
    fits: list[ScalingFit]
    extrapolated: Optional[float]
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fits"] = [f if isinstance(f, dict) else f for f in d["fits"]]
        return d


@dataclass
class LrSelection:
    chosen_lr: float
    horizon: float
    groups: list[LrGroupReport]

    def to_dict(self) -> dict:
        return {"chosen_lr": self.chosen_lr, "horizon": self.horizon,
                "groups": [g.to_dict() for g in self.groups]}


def select_lr(curves: Sequence[LossCurve], horizon: Optional[float] = None,
              window: int = 16, threshold: float = 0.15) -> LrSelection:
    """Pick the largest learning rate whose curves never spike.

    Ties on the lr value break toward the lowest extrapolated loss at the
    horizon (default: 10x the largest observed token count). Fit-quality
    warnings (high rmse, unusually slow trend) are advisory and never
    disqualify a rate.
    """
    by_lr: dict[float, list[LossCurve]] = {}
    for c in curves:
        if c.lr is None:
            raise DataError(f"curve {c.label!r} missing lr metadata")
        by_lr.setdefault(c.lr, []).append(c)
    if len(by_lr) < 2:
        raise DataError("need at least two learning rates to select between")
    if horizon is None:
        horizon = 10.0 * max(max(c.tokens) for c in curves)

    groups = []
    for lr in sorted(by_lr, reverse=True):
        cs = by_lr[lr]
        spikes = [detect_spike(c, window, threshold) for c in cs]
        stable = all(not s for s in spikes)
        fits = []
        extrapolated = None
        for c in cs:
            try:
                fits.append(fit_power_law(c))
            except DataError:
                continue
        usable = [f for f in fits if f.converged]
        if usable:
            extrapolated = sum(extrapolate(f, horizon) for f in usable) / len(usable)
        groups.append(LrGroupReport(lr=lr, stable=stable, spike_indices=spikes,
                                    fits=fits, extrapolated=extrapolated))

    rmses = [f.rmse for g in groups for f in g.fits]
    alphas = [f.alpha_d for g in groups if g.stable for f in g.fits]
    med_rmse = median(rmses) if rmses else 0.0
    med_alpha = median(alphas) if alphas else 0.0
    for g in groups:
        for f in g.fits:
            if f.rmse > max(1e-3, 3.0 * med_rmse):
                g.warnings.append("high-rmse fit")
                break
        if med_alpha > 0 and g.fits and all(
                f.alpha_d < 0.3 * med_alpha for f in g.fits):
            g.warnings.append("slow-trend fit")

    survivors = [g for g in groups if g.stable]
    if not survivors:
        raise SelectionError(
            "every learning rate produced loss spikes",
            report={"groups": [g.to_dict() for g in groups]})
    survivors.sort(key=lambda g: (-g.lr, g.extrapolated
                                  if g.extrapolated is not None else math.inf))
    return LrSelection(chosen_lr=survivors[0].lr, horizon=horizon, groups=groups)
