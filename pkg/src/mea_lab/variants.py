"""Head-mixing attention variants.

MEA mixes keys and values across heads with learned matrices before the
usual scaled-dot-product step, optionally normalizing each head's output.
DFA subtracts paired softmax maps weighted by a learned scalar. THA mixes
either the logit maps (original) or the key/value heads (modified). All
variants share the projection and grouped-attention helpers in
`mea_lab.attention` and reduce to the baseline when their mixing weights
are identity (lambda = 0 for DFA).
"""

from __future__ import annotations

import math

from mea_lab import autodiff as ad
from mea_lab import kernels as K
from mea_lab.attention import (
    GROUP_NORM_EPS,
    AttnConfig,
    AttnVars,
    AttnWeights,
    ConfigError,
    Tape,
    Var,
    Variant,
    concat_project,
    group_of,
    grouped_heads,
    lift_weights,
    project_kv,
    project_q,
)
from mea_lab.tensor import ShapeError, Tensor


def group_norm_heads(c: Tensor, gain: Tensor, eps: float = GROUP_NORM_EPS) -> Tensor:
    """RMS-normalize each head's d-vector at every position, then apply a
    per-(head, channel) gain. c is N x h x d, gain is h x d."""
    if len(c.shape) != 3:
        raise ShapeError(f"group_norm_heads: want N x h x d, got {c.shape}")
    n, h, d = c.shape
    if gain.shape != (h, d):
        raise ShapeError(f"group_norm_heads: gain {gain.shape}, want {(h, d)}")
    out = K.zeros_buf(n * h * d)
    for i in range(h):
        rows = K.zeros_buf(n * d)
        for pos in range(n):
            src = (pos * h + i) * d
            rows[pos * d:(pos + 1) * d] = c.data[src:src + d]
        normed, _ = K.rms_fwd(rows, gain.data[i * d:(i + 1) * d], n, d, eps)
        for pos in range(n):
            dst = (pos * h + i) * d
            out[dst:dst + d] = normed[pos * d:(pos + 1) * d]
    return Tensor((n, h, d), out)


def group_norm_heads_vars(c: Var, gain: Var, eps: float = GROUP_NORM_EPS) -> Var:
    n, h, d = c.value.shape
    outs = []
    for i in range(h):
        rows = ad.head_select(c, i)
        grow = ad.reshape(ad.slice_rows(gain, i, i + 1), (d,))
        outs.append(ad.rms_norm(rows, grow, eps))
    return ad.stack_heads(outs)


# -- MEA ----------------------------------------------------------------------


def mea_forward_vars(cfg: AttnConfig, wv: AttnVars, x: Var) -> Var:
    if cfg.variant not in (Variant.MEA, Variant.MEA_NO_GN):
        raise ConfigError(f"mea_forward on variant {cfg.variant.value}")
    q = ad.rope(project_q(cfg, wv, x), cfg.rope_base)
    k_comp, v_comp = project_kv(cfg, wv, x)
    k_lc = ad.head_mix(k_comp, wv.w_lc_k)
    v_lc = ad.head_mix(v_comp, wv.w_lc_v)
    k = ad.rope(k_lc, cfg.rope_base)
    heads = grouped_heads(cfg, q, k, v_lc)
    stacked = ad.stack_heads(heads)
    if cfg.use_group_norm:
        stacked = group_norm_heads_vars(stacked, wv.gn_gain)
    n = x.value.shape[0]
    return ad.matmul(ad.reshape(stacked, (n, cfg.h * cfg.d_v)), wv.wo)


def mea_forward(cfg: AttnConfig, weights: AttnWeights, x: Tensor) -> Tensor:
    tape = Tape()
    return mea_forward_vars(cfg, lift_weights(tape, weights), tape.leaf(x)).value


# -- DFA ----------------------------------------------------------------------


def dfa_forward_vars(cfg: AttnConfig, wv: AttnVars, x: Var) -> Var:
    """Paired differential attention.

    Pair p (1-based heads 2p-1, 2p) computes A_p = softmax(S_{2p-1}) -
    lambda_p * softmax(S_{2p}) and C_p = A_p @ [V_{G(2p-1)} | V_{G(2p)}].
    With GroupNorm on, each pair output is RMS-normalized and the result is
    rescaled by (1 - lambda_init); without it both the normalization and
    the rescale are dropped.
    """
    if cfg.variant not in (Variant.DFA, Variant.DFA_NO_GN):
        raise ConfigError(f"dfa_forward on variant {cfg.variant.value}")
    n = x.value.shape[0]
    q = ad.rope(project_q(cfg, wv, x), cfg.rope_base)
    k3, v3 = project_kv(cfg, wv, x)
    k = ad.rope(k3, cfg.rope_base)
    inv = 1.0 / math.sqrt(cfg.d_qk)

    pair_outs = []
    for p in range(cfg.pairs):
        i1, i2 = 2 * p + 1, 2 * p + 2
        g1 = group_of(i1, cfg.h, cfg.g) - 1
        g2 = group_of(i2, cfg.h, cfg.g) - 1
        s1 = ad.softmax_rows(
            ad.scale(ad.matmul_nt(ad.head_select(q, i1 - 1),
                                  ad.head_select(k, g1)), inv), causal=True)
        s2 = ad.softmax_rows(
            ad.scale(ad.matmul_nt(ad.head_select(q, i2 - 1),
                                  ad.head_select(k, g2)), inv), causal=True)
        lam_p = ad.select_scalar(wv.lam, p)
        a = ad.sub(s1, ad.scale_by(s2, lam_p))
        c = ad.concat_cols(ad.matmul(a, ad.head_select(v3, g1)),
                           ad.matmul(a, ad.head_select(v3, g2)))
        pair_outs.append(c)

    stacked = ad.stack_heads(pair_outs)  # N x h/2 x 2*d_v
    if cfg.use_group_norm:
        stacked = group_norm_heads_vars(stacked, wv.gn_gain)
        flat = ad.reshape(stacked, (n, cfg.h * cfg.d_v))
        flat = ad.scale(flat, 1.0 - cfg.lambda_init)
    else:
        flat = ad.reshape(stacked, (n, cfg.h * cfg.d_v))
    return ad.matmul(flat, wv.wo)


def dfa_forward(cfg: AttnConfig, weights: AttnWeights, x: Tensor) -> Tensor:
    tape = Tape()
    return dfa_forward_vars(cfg, lift_weights(tape, weights), tape.leaf(x)).value


# -- THA ----------------------------------------------------------------------


def tha_forward_vars(cfg: AttnConfig, wv: AttnVars, x: Var) -> Var:
    """Talking-heads attention, original or modified.

    Original: logit maps are mixed across query heads j with coefficients
    T_qk[G(i), G(j)] before softmax, and the softmaxed maps are mixed with
    T_v the same way before hitting head i's own values V_{G(i)}.

    Modified: the mixing moves onto the stored heads themselves,
    K~_m = sum_j T_qk[m, j] K_j (and likewise for V), then attention runs
    unchanged. Position rotation is applied after the mix, which matches
    mixing rotated keys because the rotation is linear at each position.
    """
    if cfg.variant not in (Variant.THA, Variant.THA_MODIFIED):
        raise ConfigError(f"tha_forward on variant {cfg.variant.value}")
    inv = 1.0 / math.sqrt(cfg.d_qk)
    q3 = project_q(cfg, wv, x)
    k3, v3 = project_kv(cfg, wv, x)

    if cfg.variant is Variant.THA_MODIFIED:
        k_mix = ad.head_mix(k3, ad.transpose(wv.t_qk))
        v_mix = ad.head_mix(v3, ad.transpose(wv.t_v))
        q = ad.rope(q3, cfg.rope_base)
        k = ad.rope(k_mix, cfg.rope_base)
        return concat_project(grouped_heads(cfg, q, k, v_mix), wv.wo)

    q = ad.rope(q3, cfg.rope_base)
    k = ad.rope(k3, cfg.rope_base)
    logit_maps = []
    for j in range(1, cfg.h + 1):
        gj = group_of(j, cfg.h, cfg.g) - 1
        logit_maps.append(ad.scale(
            ad.matmul_nt(ad.head_select(q, j - 1), ad.head_select(k, gj)), inv))

    def mixed(maps, t_var, i):
        gi = group_of(i, cfg.h, cfg.g) - 1
        acc = None
        for j in range(1, cfg.h + 1):
            gj = group_of(j, cfg.h, cfg.g) - 1
            coeff = ad.select_scalar(t_var, gi * cfg.g + gj)
            term = ad.scale_by(maps[j - 1], coeff)
            acc = term if acc is None else ad.add(acc, term)
        return acc

    attn_maps = [ad.softmax_rows(mixed(logit_maps, wv.t_qk, i), causal=True)
                 for i in range(1, cfg.h + 1)]
    heads = []
    for i in range(1, cfg.h + 1):
        gi = group_of(i, cfg.h, cfg.g) - 1
        heads.append(ad.matmul(mixed(attn_maps, wv.t_v, i),
                               ad.head_select(v3, gi)))
    return concat_project(heads, wv.wo)


def tha_forward(cfg: AttnConfig, weights: AttnWeights, x: Tensor) -> Tensor:
    tape = Tape()
    return tha_forward_vars(cfg, lift_weights(tape, weights), tape.leaf(x)).value


# -- weight folding -----------------------------------------------------------


def recombine_weights(w_lc: Tensor, w_comp: Tensor) -> Tensor:
    """Fold a head-combination matrix into a projection weight.

    w_comp maps d_model -> h' heads of width d; the folded weight maps
    d_model -> h heads with head j = sum_i w_lc[i, j] * head_i(w_comp), so
    projecting then mixing equals projecting with the folded weight.
    Distributes over addition in both arguments and is associative with a
    further mix.
    """
    hp, h = w_lc._as_matrix()
    dm, wide = w_comp._as_matrix()
    if wide % hp != 0:
        raise ShapeError(
            f"recombine_weights: width {wide} not divisible by h'={hp}")
    d = wide // hp
    mixed = K.head_mix_fwd(w_comp.data, w_lc.data, dm, hp, h, d)
    return Tensor((dm, h * d), mixed)
