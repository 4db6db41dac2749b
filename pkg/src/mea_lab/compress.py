"""SVD compression of key/value projections into fewer virtual heads.

A projection Dim x (H*d_k) is reshaped so each column holds one head's
flattened weights, decomposed, and truncated to H' left singular vectors:
the basis becomes a Dim x (H'*d_k) projection (the heads a runtime would
actually cache) and the H' x H combination matrix re-expands them at
attention time. Folding the pair back together (recombine_weights) gives
the best rank-H' head approximation of the original weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from mea_lab import autodiff as ad
from mea_lab.attention import (
    AttnConfig,
    AttnVars,
    Tape,
    Variant,
    concat_project,
    grouped_heads,
    project_q,
)
from mea_lab.linalg import svd
from mea_lab.tensor import ShapeError, Tensor


def reshape_by_head(w: Tensor, heads: int) -> Tensor:
    """Dim x (H*d_k) -> (d_k*Dim) x H; column j is the row-major flattening
    of head j's Dim x d_k block."""
    dim, wide = w._as_matrix()
    if wide % heads != 0:
        raise ShapeError(f"reshape_by_head: width {wide} not divisible by {heads}")
    d_k = wide // heads
    out = Tensor.zeros(d_k * dim, heads)
    for i in range(dim):
        for j in range(heads):
            src = i * wide + j * d_k
            for c in range(d_k):
                out.data[(i * d_k + c) * heads + j] = w.data[src + c]
    return out


def unreshape_by_head(r: Tensor, dim: int) -> Tensor:
    """Exact inverse of reshape_by_head."""
    rows, heads = r._as_matrix()
    if rows % dim != 0:
        raise ShapeError(f"unreshape_by_head: {rows} rows not divisible by {dim}")
    d_k = rows // dim
    out = Tensor.zeros(dim, heads * d_k)
    for i in range(dim):
        for j in range(heads):
            dst = i * heads * d_k + j * d_k
            for c in range(d_k):
                out.data[dst + c] = r.data[(i * d_k + c) * heads + j]
    return out


def compress_projection(w: Tensor, heads: int, h_prime: int
                        ) -> tuple[Tensor, Tensor, list[float]]:
    """Truncated head-SVD of a projection.

    Returns (basis, lc, discarded_sigma): basis is Dim x (h_prime*d_k), lc
    is h_prime x heads with the singular values folded in, and
    recombine_weights(lc, basis) is the best rank-h_prime head
    approximation of w (Frobenius error = sqrt(sum discarded sigma^2)).
    """
    if not 1 <= h_prime <= heads:
        raise ShapeError(f"compress_projection: H'={h_prime} out of 1..{heads}")
    dim = w.shape[0]
    res = svd(reshape_by_head(w, heads))
    rows = res.u.shape[0]
    basis_cols = Tensor.zeros(rows, h_prime)
    for i in range(rows):
        for j in range(h_prime):
            basis_cols.data[i * h_prime + j] = res.u.data[i * heads + j]
    basis = unreshape_by_head(basis_cols, dim)
    lc = Tensor.zeros(h_prime, heads)
    for i in range(h_prime):
        s = res.sigma.data[i]
        for j in range(heads):
            lc.data[i * heads + j] = s * res.vt.data[i * heads + j]
    discarded = list(res.sigma.data[h_prime:])
    return basis, lc, discarded


@dataclass
class LayerCompression:
    k_basis: Tensor
    k_lc: Tensor
    v_basis: Tensor
    v_lc: Tensor
    k_discarded: list[float] = field(default_factory=list)
    v_discarded: list[float] = field(default_factory=list)

    @property
    def h_prime(self) -> int:
        return self.k_lc.shape[0]

    @property
    def heads(self) -> int:
        return self.k_lc.shape[1]

    def k_error(self) -> float:
        return math.sqrt(sum(s * s for s in self.k_discarded))

    def v_error(self) -> float:
        return math.sqrt(sum(s * s for s in self.v_discarded))


@dataclass
class CompressionPlan:
    """Per-layer compressed K/V factorizations for a model."""
    heads: int
    h_prime: int
    layers: dict[int, LayerCompression] = field(default_factory=dict)

    @property
    def layer_ids(self) -> list[int]:
        return sorted(self.layers)


def split_wkv(wkv: Tensor, groups: int, d_qk: int, d_v: int
              ) -> tuple[Tensor, Tensor]:
    """Separate a fused d_model x (g*(d_qk+d_v)) projection into the key
    part d_model x (g*d_qk) and value part d_model x (g*d_v)."""
    dim, wide = wkv._as_matrix()
    span = d_qk + d_v
    if wide != groups * span:
        raise ShapeError(f"split_wkv: width {wide} != {groups}*({d_qk}+{d_v})")
    wk = Tensor.zeros(dim, groups * d_qk)
    wv = Tensor.zeros(dim, groups * d_v)
    for i in range(dim):
        for j in range(groups):
            src = i * wide + j * span
            kdst = i * groups * d_qk + j * d_qk
            vdst = i * groups * d_v + j * d_v
            wk.data[kdst:kdst + d_qk] = wkv.data[src:src + d_qk]
            wv.data[vdst:vdst + d_v] = wkv.data[src + d_qk:src + span]
    return wk, wv


def fuse_wkv(wk: Tensor, wv: Tensor, groups: int) -> Tensor:
    dim, kw = wk._as_matrix()
    dim2, vw = wv._as_matrix()
    if dim != dim2 or kw % groups or vw % groups:
        raise ShapeError("fuse_wkv: inconsistent shapes")
    d_qk, d_v = kw // groups, vw // groups
    span = d_qk + d_v
    out = Tensor.zeros(dim, groups * span)
    for i in range(dim):
        for j in range(groups):
            dst = i * groups * span + j * span
            out.data[dst:dst + d_qk] = wk.data[i * kw + j * d_qk:
                                               i * kw + (j + 1) * d_qk]
            out.data[dst + d_qk:dst + span] = wv.data[i * vw + j * d_v:
                                                      i * vw + (j + 1) * d_v]
    return out


def compress_layer(wkv: Tensor, groups: int, d_qk: int, d_v: int,
                   h_prime: int) -> LayerCompression:
    wk, wv = split_wkv(wkv, groups, d_qk, d_v)
    k_basis, k_lc, k_disc = compress_projection(wk, groups, h_prime)
    v_basis, v_lc, v_disc = compress_projection(wv, groups, h_prime)
    return LayerCompression(k_basis=k_basis, k_lc=k_lc, v_basis=v_basis,
                            v_lc=v_lc, k_discarded=k_disc, v_discarded=v_disc)


def compressed_attend_vars(cfg: AttnConfig, wv: AttnVars, x, comp: LayerCompression,
                           comp_vars: dict | None = None):
    """Attention with K/V computed from the compressed bases.

    Only the H' virtual heads are projected (what a cache would store);
    they are expanded to the layer's g heads by the combination matrices,
    rotated after expansion (valid because the rotation is linear per
    position), and attention proceeds unchanged.
    """
    if cfg.variant is not Variant.MHA_GQA:
        raise ShapeError("compressed attention applies to the baseline variant")
    if comp.heads != cfg.g:
        raise ShapeError(
            f"plan built for {comp.heads} kv heads, layer has {cfg.g}")
    tape = x.tape
    if comp_vars is None:
        comp_vars = {}
    kb = comp_vars.get("k_basis") or tape.leaf(comp.k_basis)
    kl = comp_vars.get("k_lc") or tape.leaf(comp.k_lc)
    vb = comp_vars.get("v_basis") or tape.leaf(comp.v_basis)
    vl = comp_vars.get("v_lc") or tape.leaf(comp.v_lc)
    n = x.value.shape[0]
    hp = comp.h_prime
    q = ad.rope(project_q(cfg, wv, x), cfg.rope_base)
    k_virtual = ad.reshape(ad.matmul(x, kb), (n, hp, cfg.d_qk))
    v_virtual = ad.reshape(ad.matmul(x, vb), (n, hp, cfg.d_v))
    k = ad.rope(ad.head_mix(k_virtual, kl), cfg.rope_base)
    v = ad.head_mix(v_virtual, vl)
    return concat_project(grouped_heads(cfg, q, k, v), wv.wo)


def apply_compressed_attention(cfg: AttnConfig, comp: LayerCompression,
                               weights, x: Tensor) -> Tensor:
    """Eager compressed attention over one sequence."""
    from mea_lab.attention import lift_weights

    tape = Tape()
    return compressed_attend_vars(cfg, lift_weights(tape, weights),
                                  tape.leaf(x), comp).value


@dataclass
class SensitivityRow:
    layer: int
    baseline_ce: float
    compressed_ce: float

    @property
    def delta(self) -> float:
        return self.compressed_ce - self.baseline_ce


@dataclass
class SensitivityProfile:
    rows: list[SensitivityRow]

    def as_csv(self) -> str:
        lines = ["layer,baseline_ce,compressed_ce,delta"]
        for r in self.rows:
            lines.append(f"{r.layer},{r.baseline_ce!r},{r.compressed_ce!r},{r.delta!r}")
        return "\n".join(lines) + "\n"


def profile_layers(model_cfg, params: dict[str, Tensor], eval_tokens,
                   h_prime: int, seq_len: int | None = None) -> SensitivityProfile:
    """Compress one layer at a time and record held-out cross-entropy."""
    from mea_lab import model as model_mod

    baseline = model_mod.evaluate_ce(model_cfg, params, eval_tokens,
                                     seq_len=seq_len)
    acfg = model_cfg.attn
    rows = []
    for layer in range(model_cfg.layers):
        comp = compress_layer(params[f"layer{layer}.attn.wkv"], acfg.g,
                              acfg.d_qk, acfg.d_v, h_prime)
        plan = CompressionPlan(heads=acfg.g, h_prime=h_prime,
                               layers={layer: comp})
        ce = model_mod.evaluate_ce(model_cfg, params, eval_tokens,
                                   seq_len=seq_len, plan=plan)
        rows.append(SensitivityRow(layer=layer, baseline_ce=baseline,
                                   compressed_ce=ce))
    return SensitivityProfile(rows=rows)


def build_plan(model_cfg, params: dict[str, Tensor], h_prime: int,
               layer_ids=None) -> CompressionPlan:
    """Compress every listed layer (default: all)."""
    acfg = model_cfg.attn
    if layer_ids is None:
        layer_ids = range(model_cfg.layers)
    plan = CompressionPlan(heads=acfg.g, h_prime=h_prime)
    for layer in layer_ids:
        plan.layers[layer] = compress_layer(params[f"layer{layer}.attn.wkv"],
                                            acfg.g, acfg.d_qk, acfg.d_v, h_prime)
    return plan
