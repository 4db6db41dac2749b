"""Pre-norm toy transformer: RMSNorm, causal attention (any variant),
SwiGLU feed-forward, byte vocabulary, no weight tying.

Parameters live in a flat name -> Tensor dict so the optimizer, the bundle
format, and layer-wise compression all address them uniformly.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Optional, Sequence

from mea_lab import autodiff as ad
from mea_lab import bundle
from mea_lab.attention import (
    AttnConfig,
    AttnVars,
    ConfigError,
    Tape,
    Var,
    Variant,
    attend_vars,
    init_attn_weights,
)
from mea_lab.tensor import Tensor

NORM_EPS = 1e-6

_ATTN_TENSORS = ("wq", "wkv", "wo", "w_lc_k", "w_lc_v", "t_qk", "t_v",
                 "lambda", "gn_gain")


@dataclass
class ModelConfig:
    layers: int
    d_model: int
    attn: AttnConfig
    ffn_hidden: int
    vocab: int = 256
    max_seq: int = 128

    def __post_init__(self):
        if min(self.layers, self.d_model, self.ffn_hidden, self.vocab,
               self.max_seq) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.attn.d_model != self.d_model:
            raise ConfigError(
                f"attention d_model {self.attn.d_model} != model {self.d_model}")


def init_model(cfg: ModelConfig, seed: int, hlc_noise: float = 0.02
               ) -> dict[str, Tensor]:
    """Fresh parameters; each tensor draws from its own (seed, name)-keyed
    stream, so tensors shared between variants initialize identically."""
    params: dict[str, Tensor] = {}

    def rng_for(name: str) -> random.Random:
        return random.Random(f"{seed}/{name}")

    d = cfg.d_model
    std = 1.0 / math.sqrt(d)
    params["embed"] = Tensor.randn((cfg.vocab, d), rng_for("embed"), std)
    for l in range(cfg.layers):
        params[f"layer{l}.attn_norm"] = Tensor.full((d,), 1.0)
        attn = init_attn_weights(cfg.attn, seed, hlc_noise=hlc_noise,
                                 name=f"layer{l}.attn")
        for name, t in attn.named().items():
            params[f"layer{l}.attn.{name}"] = t
        params[f"layer{l}.ffn_norm"] = Tensor.full((d,), 1.0)
        f = cfg.ffn_hidden
        params[f"layer{l}.ffn.w1"] = Tensor.randn((d, f), rng_for(f"layer{l}.ffn.w1"), std)
        params[f"layer{l}.ffn.w3"] = Tensor.randn((d, f), rng_for(f"layer{l}.ffn.w3"), std)
        params[f"layer{l}.ffn.w2"] = Tensor.randn(
            (f, d), rng_for(f"layer{l}.ffn.w2"), 1.0 / math.sqrt(f))
    params["final_norm"] = Tensor.full((d,), 1.0)
    params["w_out"] = Tensor.randn((d, cfg.vocab), rng_for("w_out"), std)
    return params


def attn_vars_for_layer(pvars: dict[str, Var], layer: int) -> AttnVars:
    def get(name):
        return pvars.get(f"layer{layer}.attn.{name}")

    return AttnVars(wq=get("wq"), wkv=get("wkv"), wo=get("wo"),
                    w_lc_k=get("w_lc_k"), w_lc_v=get("w_lc_v"),
                    t_qk=get("t_qk"), t_v=get("t_v"), lam=get("lambda"),
                    gn_gain=get("gn_gain"))


def sequence_loss_vars(cfg: ModelConfig, pvars: dict[str, Var],
                       tokens: Sequence[int], plan=None) -> Var:
    """Mean next-token cross-entropy of one token window (needs >= 2
    tokens: the last one is target-only)."""
    if len(tokens) < 2:
        raise ConfigError("need at least 2 tokens for a training window")
    inputs = list(tokens[:-1])
    targets = list(tokens[1:])
    x = ad.embed(pvars["embed"], inputs)
    for l in range(cfg.layers):
        a_in = ad.rms_norm(x, pvars[f"layer{l}.attn_norm"], NORM_EPS)
        wv = attn_vars_for_layer(pvars, l)
        comp = plan.layers.get(l) if plan is not None else None
        if comp is not None:
            from mea_lab.compress import compressed_attend_vars
            att = compressed_attend_vars(cfg.attn, wv, a_in, comp)
        else:
            att = attend_vars(cfg.attn, wv, a_in)
        x = ad.add(x, att)
        f_in = ad.rms_norm(x, pvars[f"layer{l}.ffn_norm"], NORM_EPS)
        hidden = ad.mul(ad.silu(ad.matmul(f_in, pvars[f"layer{l}.ffn.w1"])),
                        ad.matmul(f_in, pvars[f"layer{l}.ffn.w3"]))
        x = ad.add(x, ad.matmul(hidden, pvars[f"layer{l}.ffn.w2"]))
    x = ad.rms_norm(x, pvars["final_norm"], NORM_EPS)
    logits = ad.matmul(x, pvars["w_out"])
    return ad.cross_entropy(logits, targets)


def lift_params(tape: Tape, params: dict[str, Tensor]) -> dict[str, Var]:
    return {name: tape.leaf(t) for name, t in params.items()}


def evaluate_ce(cfg: ModelConfig, params: dict[str, Tensor],
                tokens: Sequence[int], seq_len: Optional[int] = None,
                plan=None) -> float:
    """Mean cross-entropy over non-overlapping windows of a token stream."""
    if seq_len is None:
        seq_len = cfg.max_seq
    window = seq_len + 1
    count = 0
    total = 0.0
    for start in range(0, len(tokens) - window + 1, window):
        tape = Tape()
        pvars = lift_params(tape, params)
        loss = sequence_loss_vars(cfg, pvars, tokens[start:start + window],
                                  plan=plan)
        total += loss.value.item()
        count += 1
    if count == 0:
        raise ConfigError(
            f"stream of {len(tokens)} tokens shorter than one window ({window})")
    return total / count


# -- checkpoint serialization --------------------------------------------------

_VARIANT_ORDER = list(Variant)
_CONFIG_KEY = "model_config"
_PLAN_KEY = "compression_meta"


def _config_tensor(cfg: ModelConfig) -> Tensor:
    a = cfg.attn
    return Tensor.of([
        1.0, cfg.layers, cfg.d_model, a.h, a.g, a.h_prime, a.d_qk, a.d_v,
        cfg.ffn_hidden, cfg.vocab, cfg.max_seq,
        _VARIANT_ORDER.index(a.variant), a.lambda_init,
        1.0 if a.use_group_norm else 0.0, a.rope_base,
    ])


def _config_from_tensor(t: Tensor) -> ModelConfig:
    v = list(t.data)
    if len(v) != 15 or v[0] != 1.0:
        raise bundle.BundleError("unrecognized model_config record")
    variant = _VARIANT_ORDER[int(v[11])]
    attn = AttnConfig(h=int(v[3]), g=int(v[4]), h_prime=int(v[5]),
                      d_qk=int(v[6]), d_v=int(v[7]), d_model=int(v[2]),
                      variant=variant, lambda_init=v[12],
                      use_group_norm=bool(v[13]), rope_base=v[14])
    return ModelConfig(layers=int(v[1]), d_model=int(v[2]), attn=attn,
                       ffn_hidden=int(v[8]), vocab=int(v[9]),
                       max_seq=int(v[10]))


def save_model(path: str, cfg: ModelConfig, params: dict[str, Tensor],
               plan=None) -> None:
    """Write a checkpoint bundle; with a compression plan, compressed layers
    store their K/V bases instead of the fused projection."""
    out: dict[str, Tensor] = {_CONFIG_KEY: _config_tensor(cfg)}
    compressed = set(plan.layers) if plan is not None else set()
    if plan is not None:
        out[_PLAN_KEY] = Tensor.of([float(plan.heads), float(plan.h_prime)])
    for name, t in params.items():
        layer = _layer_of(name)
        if layer is not None and layer in compressed and name.endswith(".attn.wkv"):
            continue
        out[name] = t
    for layer in sorted(compressed):
        comp = plan.layers[layer]
        out[f"layer{layer}.attn.wk_basis"] = comp.k_basis
        out[f"layer{layer}.attn.wk_lc"] = comp.k_lc
        out[f"layer{layer}.attn.wv_basis"] = comp.v_basis
        out[f"layer{layer}.attn.wv_lc"] = comp.v_lc
    bundle.write_bundle(path, out)


def _layer_of(name: str) -> Optional[int]:
    if not name.startswith("layer"):
        return None
    head = name.split(".", 1)[0]
    try:
        return int(head[len("layer"):])
    except ValueError:
        return None


def load_model(path: str):
    """Read a checkpoint; returns (cfg, params, plan-or-None)."""
    from mea_lab.compress import CompressionPlan, LayerCompression

    loaded = bundle.read_bundle(path)
    if _CONFIG_KEY not in loaded:
        raise bundle.BundleError(f"{path} has no {_CONFIG_KEY} record")
    cfg = _config_from_tensor(loaded.pop(_CONFIG_KEY))
    plan = None
    if _PLAN_KEY in loaded:
        meta = loaded.pop(_PLAN_KEY)
        plan = CompressionPlan(heads=int(meta.data[0]),
                               h_prime=int(meta.data[1]))
    params: dict[str, Tensor] = {}
    comp_parts: dict[int, dict[str, Tensor]] = {}
    for name, t in loaded.items():
        tail = name.rsplit(".", 1)[-1]
        layer = _layer_of(name)
        if layer is not None and tail in ("wk_basis", "wk_lc", "wv_basis", "wv_lc"):
            comp_parts.setdefault(layer, {})[tail] = t
        else:
            params[name] = t
    if comp_parts:
        if plan is None:
            raise bundle.BundleError(
                f"{path} has compressed tensors but no {_PLAN_KEY} record")
        for layer, parts in comp_parts.items():
            missing = {"wk_basis", "wk_lc", "wv_basis", "wv_lc"} - set(parts)
            if missing:
                raise bundle.BundleError(
                    f"layer {layer} missing compressed tensors {sorted(missing)}")
            plan.layers[layer] = LayerCompression(
                k_basis=parts["wk_basis"], k_lc=parts["wk_lc"],
                v_basis=parts["wv_basis"], v_lc=parts["wv_lc"])
    return cfg, params, plan
