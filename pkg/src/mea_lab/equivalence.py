"""Numerical certification of the head-mixing identities.

Each check evaluates two independently-built formulations of the same
quantity over randomized trials and reports the worst absolute difference:

* presoftmax-rewrite: mixing rotated per-head logit maps equals rotating
  the pre-mixed keys, because the position rotation is linear at every
  position.
* dfa-as-tha: differential attention without GroupNorm equals post-softmax
  talking-heads mixing under an explicit sparse transfer matrix.
* postsoftmax-transport: mixing softmaxed maps before the values equals the
  index-swapped evaluation that mixes output-projected values with the
  transposed transfer matrix (exact weight transport).
* degeneration: a factored (mix, projection) gradient step differs from its
  first-order single-matrix equivalent by O(lr^2), and GroupNorm is what
  stops the factored update from collapsing into a plain linear update.
"""

from __future__ import annotations

import math
import random
from dataclasses import asdict, dataclass

from mea_lab import autodiff as ad
from mea_lab import tensor as T
from mea_lab.attention import (
    AttnConfig,
    Tape,
    Variant,
    group_of,
    init_attn_weights,
    rope,
)
from mea_lab.linalg import least_squares
from mea_lab.tensor import Tensor
from mea_lab.variants import dfa_forward, group_norm_heads, recombine_weights


@dataclass
class EquivalenceReport:
    name: str
    max_abs_diff: float
    tolerance: float
    passed: bool
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def build(name: str, max_abs_diff: float, tolerance: float, trials: int,
              seed: int) -> "EquivalenceReport":
        return EquivalenceReport(name=name, max_abs_diff=max_abs_diff,
                                 tolerance=tolerance,
                                 passed=max_abs_diff <= tolerance,
                                 trials=trials, seed=seed)


def _trial_dims(rng: random.Random) -> tuple[int, int, int, int]:
    h = rng.choice([2, 4, 8])
    g = rng.choice([1, 2, h])
    while h % g != 0:
        g = rng.choice([1, 2, h])
    n = rng.randint(2, 8)
    d_qk = rng.choice([2, 4, 8])
    return h, g, n, d_qk


def _rand(shape, rng, std=1.0):
    return Tensor.randn(shape, rng, std)


# -- presoftmax rewrite -------------------------------------------------------


def check_presoftmax_rewrite(trials: int = 100, seed: int = 0,
                             tolerance: float = 1e-10) -> EquivalenceReport:
    """Logit mixing vs key mixing under the position rotation.

    Left side: per query head i, sum_j t[G(i), j] * rot(Q_i) rot(K_j)^T.
    Right side: rot(Q_i) rot(sum_j t[G(i), j] K_j)^T. Equality is the
    linearity of the per-position rotation.
    """
    worst = 0.0
    for trial in range(trials):
        rng = random.Random(f"{seed}/presoftmax/{trial}")
        h, g, n, d_qk = _trial_dims(rng)
        base = 10000.0
        q = _rand((n, h, d_qk), rng)
        k = _rand((n, g, d_qk), rng)
        t = _rand((g, g), rng)
        inv = 1.0 / math.sqrt(d_qk)

        qr = rope(q, base)
        kr = rope(k, base)
        k_heads_rot = [T.head_select(kr, j) for j in range(g)]
        k_heads_raw = [T.head_select(k, j) for j in range(g)]

        for i in range(1, h + 1):
            gi = group_of(i, h, g) - 1
            qi = T.head_select(qr, i - 1)
            lhs = None
            for j in range(g):
                term = T.scale(T.matmul_nt(qi, k_heads_rot[j]),
                               t.at(gi, j) * inv)
                lhs = term if lhs is None else T.add(lhs, term)
            mixed = None
            for j in range(g):
                term = T.scale(k_heads_raw[j], t.at(gi, j))
                mixed = term if mixed is None else T.add(mixed, term)
            mixed_rot = rope(T.stack_heads([mixed]), base)
            rhs = T.scale(T.matmul_nt(qi, T.head_select(mixed_rot, 0)), inv)
            worst = max(worst, T.max_abs_diff(lhs, rhs))
    return EquivalenceReport.build("presoftmax-rewrite", worst, tolerance,
                                   trials, seed)


# -- DFA as post-softmax THA --------------------------------------------------


def dfa_transfer_matrix(lam: Tensor) -> Tensor:
    """The sparse h x h transfer matrix reproducing paired differential
    attention: rows of pair p select map 2p-1 with weight 1 and map 2p with
    weight -lambda_p."""
    pairs = lam.shape[0]
    h = 2 * pairs
    t = Tensor.zeros(h, h)
    for p in range(pairs):
        for row in (2 * p, 2 * p + 1):
            t.data[row * h + 2 * p] = 1.0
            t.data[row * h + 2 * p + 1] = -lam.data[p]
    return t


def check_dfa_as_tha(trials: int = 100, seed: int = 0,
                     tolerance: float = 1e-10) -> EquivalenceReport:
    """dfa_forward without GroupNorm vs the post-softmax head-mixing
    evaluation driven by the constructed transfer matrix."""
    worst = 0.0
    for trial in range(trials):
        rng = random.Random(f"{seed}/dfa-tha/{trial}")
        h = rng.choice([2, 4, 8])
        n = rng.randint(2, 6)
        d_qk = rng.choice([2, 4])
        d_v = rng.choice([2, 4])
        d_model = rng.choice([8, 16])
        cfg = AttnConfig(h=h, g=h, d_qk=d_qk, d_v=d_v, d_model=d_model,
                         variant=Variant.DFA_NO_GN)
        w = init_attn_weights(cfg, seed=trial * 7919 + seed)
        w.lam = Tensor.of([rng.random() for _ in range(h // 2)])
        x = _rand((n, d_model), rng)

        out_dfa = dfa_forward(cfg, w, x)
        out_tha = _postsoftmax_eval(cfg, w, x, dfa_transfer_matrix(w.lam))
        worst = max(worst, T.max_abs_diff(out_dfa, out_tha))
    return EquivalenceReport.build("dfa-as-tha", worst, tolerance, trials, seed)


def _standard_maps(cfg: AttnConfig, w, x: Tensor) -> tuple[list[Tensor], Tensor]:
    """Per-head causal softmax maps and the stacked value heads (library
    primitives only, no tape)."""
    qm = T.matmul(x, w.wq).reshape(x.shape[0], cfg.h, cfg.d_qk)
    kv = T.matmul(x, w.wkv)
    span = cfg.d_qk + cfg.d_v
    ks = [T.slice_cols(kv, j * span, j * span + cfg.d_qk) for j in range(cfg.g)]
    vs = [T.slice_cols(kv, j * span + cfg.d_qk, (j + 1) * span)
          for j in range(cfg.g)]
    qr = rope(qm, cfg.rope_base)
    kr = rope(T.stack_heads(ks), cfg.rope_base)
    inv = 1.0 / math.sqrt(cfg.d_qk)
    maps = []
    for i in range(1, cfg.h + 1):
        gi = group_of(i, cfg.h, cfg.g) - 1
        scores = T.scale(T.matmul_nt(T.head_select(qr, i - 1),
                                     T.head_select(kr, gi)), inv)
        maps.append(T.softmax_rows(scores, causal=True))
    return maps, T.stack_heads(vs)


def _postsoftmax_eval(cfg: AttnConfig, w, x: Tensor, transfer: Tensor) -> Tensor:
    """Literal head-level post-softmax mixing: C_i = (sum_j transfer[i, j]
    A_j) V_i, then concat and output-project. transfer is h x h."""
    maps, v3 = _standard_maps(cfg, w, x)
    heads = []
    for i in range(cfg.h):
        mixed = None
        for j in range(cfg.h):
            c = transfer.at(i, j)
            term = T.scale(maps[j], c)
            mixed = term if mixed is None else T.add(mixed, term)
        gi = group_of(i + 1, cfg.h, cfg.g) - 1
        heads.append(T.matmul(mixed, T.head_select(v3, gi)))
    n = x.shape[0]
    flat = T.stack_heads(heads).reshape(n, cfg.h * cfg.d_v)
    return T.matmul(flat, w.wo)


# -- postsoftmax transport ----------------------------------------------------


def original_postsoftmax_output(cfg: AttnConfig, w, x: Tensor, t_v: Tensor) -> Tensor:
    """y with post-softmax mixing over query heads: C_i = (sum_{j in [h]}
    t_v[G(i), G(j)] A_j) V_{G(i)}, concatenated and projected."""
    maps, v3 = _standard_maps(cfg, w, x)
    heads = []
    for i in range(1, cfg.h + 1):
        gi = group_of(i, cfg.h, cfg.g) - 1
        mixed = None
        for j in range(1, cfg.h + 1):
            gj = group_of(j, cfg.h, cfg.g) - 1
            term = T.scale(maps[j - 1], t_v.at(gi, gj))
            mixed = term if mixed is None else T.add(mixed, term)
        heads.append(T.matmul(mixed, T.head_select(v3, gi)))
    n = x.shape[0]
    return T.matmul(T.stack_heads(heads).reshape(n, cfg.h * cfg.d_v), w.wo)


def transported_postsoftmax_output(cfg: AttnConfig, w, x: Tensor, t_v: Tensor) -> Tensor:
    """The same quantity in the swapped order: fold each head's output block
    into its values (Z_i = V_{G(i)} WO_i), mix the folded values with the
    transposed coefficients, and let each softmax map act on its mix."""
    maps, v3 = _standard_maps(cfg, w, x)
    d_v = cfg.d_v
    z = []
    for i in range(1, cfg.h + 1):
        gi = group_of(i, cfg.h, cfg.g) - 1
        wo_block = T.Tensor((d_v, cfg.d_model),
                            w.wo.data[(i - 1) * d_v * cfg.d_model:
                                      i * d_v * cfg.d_model])
        z.append(T.matmul(T.head_select(v3, gi), wo_block))
    out = None
    for j in range(1, cfg.h + 1):
        gj = group_of(j, cfg.h, cfg.g) - 1
        mix = None
        for i in range(1, cfg.h + 1):
            gi = group_of(i, cfg.h, cfg.g) - 1
            term = T.scale(z[i - 1], t_v.at(gi, gj))
            mix = term if mix is None else T.add(mix, term)
        contrib = T.matmul(maps[j - 1], mix)
        out = contrib if out is None else T.add(out, contrib)
    return out


def check_postsoftmax_equivalence(trials: int = 100, seed: int = 0,
                                  tolerance: float = 1e-10) -> EquivalenceReport:
    worst = 0.0
    for trial in range(trials):
        rng = random.Random(f"{seed}/postsoftmax/{trial}")
        h, g, n, d_qk = _trial_dims(rng)
        d_v = rng.choice([2, 4])
        d_model = rng.choice([8, 16])
        cfg = AttnConfig(h=h, g=g, d_qk=d_qk, d_v=d_v, d_model=d_model)
        w = init_attn_weights(cfg, seed=trial * 104729 + seed)
        t_v = _rand((g, g), rng)
        x = _rand((n, d_model), rng)
        y1 = original_postsoftmax_output(cfg, w, x, t_v)
        y2 = transported_postsoftmax_output(cfg, w, x, t_v)
        worst = max(worst, T.max_abs_diff(y1, y2))
    return EquivalenceReport.build("postsoftmax-transport", worst, tolerance,
                                   trials, seed)


# -- degeneration of the factored parameterization ----------------------------


def _factored_setup(seed: int, d_model: int = 8, hp: int = 4, h: int = 4,
                    d: int = 2, batch: int = 6):
    rng = random.Random(f"{seed}/degeneration")
    w_comp = Tensor.randn((d_model, hp * d), rng, 1.0 / math.sqrt(d_model))
    w_lc = Tensor.eye(hp) if hp == h else Tensor.zeros(hp, h)
    if hp != h:
        for i in range(min(hp, h)):
            w_lc.data[i * h + i] = 1.0
    for i in range(w_lc.size):
        w_lc.data[i] += rng.gauss(0.0, 0.05)
    x = Tensor.randn((batch, d_model), rng)
    target = Tensor.randn((batch, h * d), rng)
    return w_lc, w_comp, x, target


def _factored_grads(w_lc: Tensor, w_comp: Tensor, x: Tensor, target: Tensor,
                    use_group_norm: bool):
    batch, d_model = x.shape
    hp, h = w_lc.shape
    d = w_comp.shape[1] // hp
    tape = Tape()
    lc = tape.leaf(w_lc)
    comp = tape.leaf(w_comp)
    proj = ad.reshape(ad.matmul(tape.leaf(x), comp), (batch, hp, d))
    mixed = ad.head_mix(proj, lc)
    if use_group_norm:
        gain = tape.leaf(Tensor.full((h, d), 1.0))
        from mea_lab.variants import group_norm_heads_vars
        mixed = group_norm_heads_vars(mixed, gain)
    out = ad.reshape(mixed, (batch, h * d))
    loss = ad.mse(out, target)
    grads = tape.backward(loss)
    return grads[lc.idx], grads[comp.idx], out.value


def degeneration_residual(lr: float, seed: int = 0) -> float:
    """Frobenius norm of (exact factored update effect) minus (first-order
    single-matrix update): || dLC (x) dCOMP ||_F after one plain gradient
    step of size lr. Exactly quadratic in lr."""
    w_lc, w_comp, x, target = _factored_setup(seed)
    g_lc, g_comp, _ = _factored_grads(w_lc, w_comp, x, target, use_group_norm=False)
    d_lc = T.scale(g_lc, -lr)
    d_comp = T.scale(g_comp, -lr)
    new_fold = recombine_weights(T.add(w_lc, d_lc), T.add(w_comp, d_comp))
    old_fold = recombine_weights(w_lc, w_comp)
    exact = T.sub(new_fold, old_fold)
    first = T.add(recombine_weights(d_lc, w_comp),
                  recombine_weights(w_lc, d_comp))
    return T.frobenius_norm(T.sub(exact, first))


def degeneration_quadratic_report(seeds: int = 10,
                                  lrs=(1e-4, 1e-3, 1e-2, 1e-1),
                                  seed: int = 0,
                                  tolerance: float = 0.1) -> EquivalenceReport:
    """Log-log slope of the degeneration residual vs lr must sit within
    tolerance of 2 (the ignored cross term is bilinear in the two updates)."""
    worst = 0.0
    for s in range(seeds):
        xs = [math.log(lr) for lr in lrs]
        ys = [math.log(degeneration_residual(lr, seed=seed + s)) for lr in lrs]
        n = len(xs)
        mx = sum(xs) / n
        my = sum(ys) / n
        slope = (sum((a - mx) * (b - my) for a, b in zip(xs, ys))
                 / sum((a - mx) ** 2 for a in xs))
        worst = max(worst, abs(slope - 2.0))
    return EquivalenceReport.build("degeneration-quadratic", worst, tolerance,
                                   seeds, seed)


def single_matrix_fit_mismatch(lr: float, seed: int,
                               use_group_norm: bool) -> float:
    """Relative residual of the best single-matrix (plain linear) fit to the
    factored model's outputs after one gradient step.

    Without the head normalization the updated factored model IS a single
    matrix, so the least-squares residual is rounding noise; with it, no
    linear map reproduces the normalized outputs on an overdetermined batch.
    """
    w_lc, w_comp, x, target = _factored_setup(seed, batch=24)
    g_lc, g_comp, _ = _factored_grads(w_lc, w_comp, x, target, use_group_norm)
    lc1 = T.sub(w_lc, T.scale(g_lc, lr))
    comp1 = T.sub(w_comp, T.scale(g_comp, lr))
    batch, d_model = x.shape
    hp, h = w_lc.shape
    d = w_comp.shape[1] // hp
    mixed = T.head_mix(T.matmul(x, comp1).reshape(batch, hp, d), lc1)
    if use_group_norm:
        mixed = group_norm_heads(mixed, Tensor.full((h, d), 1.0))
    out = mixed.reshape(batch, h * d)
    w_fit = least_squares(x, out)
    resid = T.frobenius_norm(T.sub(T.matmul(x, w_fit), out))
    return resid / max(T.frobenius_norm(out), 1e-300)


def degeneration_gn_gap_report(seed: int = 0, lr: float = 1e-2,
                               tolerance: float = 0.1) -> EquivalenceReport:
    """Passes when the no-GroupNorm single-matrix fit residual is at most
    `tolerance` times the GroupNorm one (reported value is their ratio)."""
    plain = single_matrix_fit_mismatch(lr, seed, use_group_norm=False)
    gn = single_matrix_fit_mismatch(lr, seed, use_group_norm=True)
    ratio = plain / max(gn, 1e-300)
    return EquivalenceReport.build("degeneration-groupnorm-gap", ratio,
                                   tolerance, 1, seed)


SUITES = {
    "presoftmax": lambda trials, seed: [check_presoftmax_rewrite(trials, seed)],
    "dfa-tha": lambda trials, seed: [check_dfa_as_tha(trials, seed)],
    "postsoftmax": lambda trials, seed: [check_postsoftmax_equivalence(trials, seed)],
    "degeneration": lambda trials, seed: [
        degeneration_quadratic_report(seeds=max(1, min(trials, 10)), seed=seed),
        degeneration_gn_gap_report(seed=seed),
    ],
}


def run_suite(name: str, trials: int, seed: int) -> list[EquivalenceReport]:
    if name == "all":
        out = []
        for key in ("presoftmax", "dfa-tha", "postsoftmax", "degeneration"):
            out.extend(SUITES[key](trials, seed))
        return out
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}")
    return SUITES[name](trials, seed)
