"""Grouped causal attention: configuration, weights, and the base forward.

One grouping function unifies MHA (g == h), MQA (g == 1) and GQA: query
head i attends to key-value group ceil(i*g/h). Head-mixing variants (MEA,
DFA, THA) are dispatched to `mea_lab.variants`; they share the projection
and per-head attention helpers defined here.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from mea_lab import autodiff as ad
from mea_lab import bundle
from mea_lab import kernels as K
from mea_lab.autodiff import Tape, Var
from mea_lab.tensor import ContractError, ShapeError, Tensor


class ConfigError(ValueError):
    """Inconsistent attention or model configuration."""


class Variant(Enum):
    MHA_GQA = "mha_gqa"
    THA = "tha"
    THA_MODIFIED = "tha_modified"
    DFA = "dfa"
    DFA_NO_GN = "dfa_no_gn"
    MEA = "mea"
    MEA_NO_GN = "mea_no_gn"


_GN_BY_VARIANT = {
    Variant.MHA_GQA: False,
    Variant.THA: False,
    Variant.THA_MODIFIED: False,
    Variant.DFA: True,
    Variant.DFA_NO_GN: False,
    Variant.MEA: True,
    Variant.MEA_NO_GN: False,
}

MEA_VARIANTS = (Variant.MEA, Variant.MEA_NO_GN)
DFA_VARIANTS = (Variant.DFA, Variant.DFA_NO_GN)
THA_VARIANTS = (Variant.THA, Variant.THA_MODIFIED)

GROUP_NORM_EPS = 1e-6


def group_of(i: int, h: int, g: int) -> int:
    """Key-value group of query head i (all 1-based): ceil(i * g / h)."""
    if not 1 <= i <= h:
        raise ContractError(f"head index {i} out of 1..{h}")
    return (i * g + h - 1) // h


@dataclass
class AttnConfig:
    h: int
    g: int
    d_qk: int
    d_v: int
    d_model: int
    h_prime: Optional[int] = None
    rope_base: float = 10000.0
    variant: Variant = Variant.MHA_GQA
    lambda_init: float = 0.5
    use_group_norm: Optional[bool] = None

    def __post_init__(self):
        if self.h < 1 or self.g < 1:
            raise ConfigError("h and g must be >= 1")
        if self.h % self.g != 0:
            raise ConfigError(f"h={self.h} not divisible by g={self.g}")
        if self.d_qk < 2 or self.d_qk % 2 != 0:
            raise ConfigError(f"d_qk={self.d_qk} must be even (RoPE pairs dims)")
        if self.d_v < 1 or self.d_model < 1:
            raise ConfigError("d_v and d_model must be >= 1")
        if self.rope_base <= 1.0:
            raise ConfigError("rope_base must exceed 1")
        if self.variant in DFA_VARIANTS and self.h % 2 != 0:
            raise ConfigError("DFA pairs heads: h must be even")
        if self.h_prime is None:
            self.h_prime = self.h
        if self.h_prime < 1:
            raise ConfigError("h_prime must be >= 1")
        if self.h_prime != self.h and self.variant not in MEA_VARIANTS:
            raise ConfigError("h_prime != h is only meaningful for MEA variants")
        derived = _GN_BY_VARIANT[self.variant]
        if self.use_group_norm is None:
            self.use_group_norm = derived
        elif self.use_group_norm != derived:
            raise ConfigError(
                f"use_group_norm={self.use_group_norm} contradicts variant "
                f"{self.variant.value}")

    @property
    def kv_heads(self) -> int:
        """Heads actually produced by the KV projection."""
        return self.h_prime if self.variant in MEA_VARIANTS else self.g

    @property
    def pairs(self) -> int:
        return self.h // 2


def rope(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotate dim pairs (2j, 2j+1) of each head at position p by angle
    p * base^(-2j/d). A per-position linear (orthogonal) map."""
    if len(x.shape) != 3:
        raise ShapeError(f"rope: want N x h x d, got {x.shape}")
    n, h, d = x.shape
    if d % 2 != 0:
        raise ShapeError(f"rope: per-head dim {d} must be even")
    freqs = ad._rope_freqs(d, base)
    return Tensor((n, h, d), K.rope_apply(x.data, freqs, n, h, d, 1.0))


@dataclass
class AttnWeights:
    """Weight tensors for one attention layer; variant extras are optional."""
    wq: Tensor
    wkv: Tensor
    wo: Tensor
    w_lc_k: Optional[Tensor] = None
    w_lc_v: Optional[Tensor] = None
    t_qk: Optional[Tensor] = None
    t_v: Optional[Tensor] = None
    lam: Optional[Tensor] = None
    gn_gain: Optional[Tensor] = None

    _NAMES = ("wq", "wkv", "wo", "w_lc_k", "w_lc_v", "t_qk", "t_v",
              "lambda", "gn_gain")

    def named(self) -> dict[str, Tensor]:
        out = {}
        for name in self._NAMES:
            attr = "lam" if name == "lambda" else name
            t = getattr(self, attr)
            if t is not None:
                out[name] = t
        return out

    def save(self, path: str) -> None:
        bundle.write_bundle(path, self.named())

    @staticmethod
    def load(path: str) -> "AttnWeights":
        loaded = bundle.read_bundle(path)
        kwargs = {}
        for name, t in loaded.items():
            attr = "lam" if name == "lambda" else name
            kwargs[attr] = t
        return AttnWeights(**kwargs)


def _identity_like(rows: int, cols: int, rng: random.Random, noise: float) -> Tensor:
    t = Tensor.zeros(rows, cols)
    for i in range(min(rows, cols)):
        t.data[i * cols + i] = 1.0
    if noise > 0.0:
        for i in range(t.size):
            t.data[i] += rng.gauss(0.0, noise)
    return t


def init_attn_weights(cfg: AttnConfig, seed: int, hlc_noise: float = 0.02,
                      name: str = "attn") -> AttnWeights:
    """Draw fresh weights; every tensor gets its own RNG stream keyed by
    (seed, tensor name) so shared tensors match across variants."""

    def rng_for(tensor_name: str) -> random.Random:
        return random.Random(f"{seed}/{name}/{tensor_name}")

    std = 1.0 / math.sqrt(cfg.d_model)
    kvh = cfg.kv_heads
    w = AttnWeights(
        wq=Tensor.randn((cfg.d_model, cfg.h * cfg.d_qk), rng_for("wq"), std),
        wkv=Tensor.randn((cfg.d_model, kvh * (cfg.d_qk + cfg.d_v)),
                         rng_for("wkv"), std),
        wo=Tensor.randn((cfg.h * cfg.d_v, cfg.d_model), rng_for("wo"), std),
    )
    if cfg.variant in MEA_VARIANTS:
        w.w_lc_k = _identity_like(cfg.h_prime, cfg.g, rng_for("w_lc_k"), hlc_noise)
        w.w_lc_v = _identity_like(cfg.h_prime, cfg.g, rng_for("w_lc_v"), hlc_noise)
    if cfg.variant in THA_VARIANTS:
        w.t_qk = _identity_like(cfg.g, cfg.g, rng_for("t_qk"), hlc_noise)
        w.t_v = _identity_like(cfg.g, cfg.g, rng_for("t_v"), hlc_noise)
    if cfg.variant in DFA_VARIANTS:
        w.lam = Tensor.full((cfg.pairs,), cfg.lambda_init)
    if cfg.use_group_norm:
        if cfg.variant in DFA_VARIANTS:
            w.gn_gain = Tensor.full((cfg.pairs, 2 * cfg.d_v), 1.0)
        else:
            w.gn_gain = Tensor.full((cfg.h, cfg.d_v), 1.0)
    return w


@dataclass
class AttnVars:
    """Tape-lifted mirror of AttnWeights."""
    wq: Var
    wkv: Var
    wo: Var
    w_lc_k: Optional[Var] = None
    w_lc_v: Optional[Var] = None
    t_qk: Optional[Var] = None
    t_v: Optional[Var] = None
    lam: Optional[Var] = None
    gn_gain: Optional[Var] = None


def lift_weights(tape: Tape, w: AttnWeights) -> AttnVars:
    def opt(t):
        return tape.leaf(t) if t is not None else None

    return AttnVars(wq=tape.leaf(w.wq), wkv=tape.leaf(w.wkv),
                    wo=tape.leaf(w.wo), w_lc_k=opt(w.w_lc_k),
                    w_lc_v=opt(w.w_lc_v), t_qk=opt(w.t_qk), t_v=opt(w.t_v),
                    lam=opt(w.lam), gn_gain=opt(w.gn_gain))


# -- shared forward pieces ---------------------------------------------------


def project_q(cfg: AttnConfig, wv: AttnVars, x: Var) -> Var:
    n = x.value.shape[0]
    return ad.reshape(ad.matmul(x, wv.wq), (n, cfg.h, cfg.d_qk))


def project_kv(cfg: AttnConfig, wv: AttnVars, x: Var) -> tuple[Var, Var]:
    """Fused KV projection split into (N x kvh x d_qk, N x kvh x d_v)."""
    kvh = cfg.kv_heads
    span = cfg.d_qk + cfg.d_v
    kv = ad.matmul(x, wv.wkv)
    ks = [ad.slice_cols(kv, j * span, j * span + cfg.d_qk) for j in range(kvh)]
    vs = [ad.slice_cols(kv, j * span + cfg.d_qk, (j + 1) * span)
          for j in range(kvh)]
    return ad.stack_heads(ks), ad.stack_heads(vs)


def grouped_heads(cfg: AttnConfig, q_roped: Var, k_roped: Var, v: Var) -> list[Var]:
    """Per-head causal attention outputs C_i = softmax(Q_i K_{G(i)}^T /
    sqrt(d_qk)) V_{G(i)}; K/V may hold any number of groups g_eff."""
    g_eff = k_roped.value.shape[1]
    inv = 1.0 / math.sqrt(cfg.d_qk)
    heads = []
    for i in range(1, cfg.h + 1):
        grp = group_of(i, cfg.h, g_eff) - 1
        qi = ad.head_select(q_roped, i - 1)
        kj = ad.head_select(k_roped, grp)
        vj = ad.head_select(v, grp)
        scores = ad.scale(ad.matmul_nt(qi, kj), inv)
        attn = ad.softmax_rows(scores, causal=True)
        heads.append(ad.matmul(attn, vj))
    return heads


def concat_project(heads: list[Var], wo: Var) -> Var:
    stacked = ad.stack_heads(heads)
    n, h, d = stacked.value.shape
    return ad.matmul(ad.reshape(stacked, (n, h * d)), wo)


def baseline_attend_vars(cfg: AttnConfig, wv: AttnVars, x: Var) -> Var:
    q = ad.rope(project_q(cfg, wv, x), cfg.rope_base)
    k3, v3 = project_kv(cfg, wv, x)
    k = ad.rope(k3, cfg.rope_base)
    return concat_project(grouped_heads(cfg, q, k, v3), wv.wo)


def attend_vars(cfg: AttnConfig, wv: AttnVars, x: Var) -> Var:
    from mea_lab import variants

    if x.value.shape[1] != cfg.d_model:
        raise ShapeError(
            f"attend: input width {x.value.shape[1]} != d_model {cfg.d_model}")
    if cfg.variant is Variant.MHA_GQA:
        return baseline_attend_vars(cfg, wv, x)
    if cfg.variant in MEA_VARIANTS:
        return variants.mea_forward_vars(cfg, wv, x)
    if cfg.variant in DFA_VARIANTS:
        return variants.dfa_forward_vars(cfg, wv, x)
    return variants.tha_forward_vars(cfg, wv, x)


def attend(cfg: AttnConfig, weights: AttnWeights, x: Tensor) -> Tensor:
    """Causal attention over a sequence of hidden states (eager)."""
    tape = Tape()
    return attend_vars(cfg, lift_weights(tape, weights), tape.leaf(x)).value
