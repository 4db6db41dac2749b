"""Toy-model training: AdamW, linear warmup with cosine decay, spike-aware
loop. Runs are bit-reproducible given a seed; two architectures whose
shared tensors initialize identically and whose forward passes coincide
produce identical loss curves step for step.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from mea_lab import kernels as K
from mea_lab.attention import ConfigError, Tape
from mea_lab.model import ModelConfig, init_model, lift_params, sequence_loss_vars
from mea_lab.scaling import LossCurve, detect_spike
from mea_lab.tensor import Tensor

from mea_lab import autodiff as ad


@dataclass
class TrainConfig:
    lr_peak: float
    total_steps: int
    warmup_steps: int = 0
    schedule: str = "cosine"  # "cosine" anneals to decay_fraction * lr_peak
    decay_fraction: float = 0.1
    weight_decay: float = 0.1
    batch_tokens: int = 64
    seq_len: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    spike_window: int = 16
    spike_threshold: float = 0.15

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if not 0.0 <= self.decay_fraction <= 1.0:
            raise ConfigError("decay_fraction must lie in [0, 1]")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.total_steps < 1 or self.lr_peak <= 0.0:
            raise ConfigError("total_steps and lr_peak must be positive")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to lr_peak over warmup, then cosine decay to
    decay_fraction * lr_peak at total_steps (or constant)."""
    if step < 0:
        raise ConfigError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.lr_peak
    span = cfg.total_steps - cfg.warmup_steps
    t = 1.0 if span <= 0 else min(1.0, (step - cfg.warmup_steps) / span)
    f = cfg.decay_fraction
    return cfg.lr_peak * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * t)))


def adamw_step(param: Tensor, grad: Tensor, m: Tensor, v: Tensor, t: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.95,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place (t counts from 1)."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ConfigError("adamw_step: mismatched shapes")
    K.adamw_update(param.data, grad.data, m.data, v.data, t, lr, beta1,
                   beta2, eps, weight_decay)


class AdamW:
    """Optimizer state over a named parameter dict."""

    def __init__(self, names: Sequence[str], params: dict[str, Tensor],
                 cfg: TrainConfig):
        self.names = list(names)
        self.cfg = cfg
        self.t = 0
        self.m = {n: Tensor.zeros(*params[n].shape) for n in self.names}
        self.v = {n: Tensor.zeros(*params[n].shape) for n in self.names}

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor],
             lr: float) -> None:
        self.t += 1
        for n in self.names:
            g = grads.get(n)
            if g is None:
                g = Tensor.zeros(*params[n].shape)
            adamw_step(params[n], g, self.m[n], self.v[n], self.t, lr,
                       self.cfg.beta1, self.cfg.beta2, self.cfg.eps,
                       self.cfg.weight_decay)


@dataclass
class TrainResult:
    rows: list[tuple[int, float, float, float]]  # step, tokens, loss, lr
    params: dict[str, Tensor]
    unstable: bool
    spike_steps: list[int] = field(default_factory=list)
    aborted_step: Optional[int] = None
    label: str = ""

    def curve(self, lr: Optional[float] = None, seed: Optional[int] = None
              ) -> LossCurve:
        return LossCurve(points=[(tokens, loss) for _, tokens, loss, _ in self.rows],
                         lr=lr, label=self.label, seed=seed)

    def csv(self) -> str:
        lines = ["step,tokens,loss,lr"]
        for step, tokens, loss, lr in self.rows:
            lines.append(f"{step},{tokens!r},{loss!r},{lr!r}")
        return "\n".join(lines) + "\n"


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Sequence[int],
          *, hlc_noise: float = 0.02, train_hlc: bool = True,
          params: Optional[dict[str, Tensor]] = None,
          spike_check_every: int = 64, label: str = "") -> TrainResult:
    """Train on a token stream; deterministic given train_cfg.seed.

    A NaN/Inf loss aborts the run immediately (spike-terminal). A loss
    spike that has not recovered for two spike windows aborts it too; the
    definitive spike flags come from detect_spike over the full curve.
    """
    if len(corpus) < train_cfg.seq_len + 2:
        raise ConfigError("corpus shorter than one training window")
    if params is None:
        params = init_model(model_cfg, seed=train_cfg.seed, hlc_noise=hlc_noise)
    trainable = [n for n in params
                 if train_hlc or ".attn.w_lc_" not in n]
    opt = AdamW(trainable, params, train_cfg)
    data_rng = random.Random(f"{train_cfg.seed}/data")
    nseq = max(1, train_cfg.batch_tokens // train_cfg.seq_len)
    window = train_cfg.seq_len + 1
    top = len(corpus) - window

    rows: list[tuple[int, float, float, float]] = []
    tokens_seen = 0.0
    aborted: Optional[int] = None
    for step in range(train_cfg.total_steps):
        lr = lr_at(step, train_cfg)
        tape = Tape()
        pvars = lift_params(tape, params)
        total = None
        for _ in range(nseq):
            start = data_rng.randrange(0, top + 1)
            loss = sequence_loss_vars(model_cfg, pvars, corpus[start:start + window])
            total = loss if total is None else ad.add(total, loss)
        batch_loss = ad.scale(total, 1.0 / nseq) if nseq > 1 else total
        lv = batch_loss.value.item()
        if not math.isfinite(lv):
            aborted = step
            break
        tokens_seen += nseq * train_cfg.seq_len
        rows.append((step, tokens_seen, lv, lr))

        grads = tape.backward(batch_loss)
        gmap = {n: grads.get(pvars[n].idx) for n in trainable}
        if train_cfg.grad_clip is not None:
            _clip_global_norm(gmap, train_cfg.grad_clip)
        opt.step(params, gmap, lr)

        if (spike_check_every and step % spike_check_every == 0 and
                len(rows) > 4 * train_cfg.spike_window):
            onsets = detect_spike(_rows_curve(rows), train_cfg.spike_window,
                                  train_cfg.spike_threshold)
            settled = [o for o in onsets
                       if o <= len(rows) - 2 * train_cfg.spike_window]
            if settled:
                aborted = step
                break

    curve = _rows_curve(rows)
    spike_steps = (detect_spike(curve, train_cfg.spike_window,
                                train_cfg.spike_threshold)
                   if len(rows) > train_cfg.spike_window else [])
    unstable = bool(spike_steps) or aborted is not None
    return TrainResult(rows=rows, params=params, unstable=unstable,
                       spike_steps=spike_steps, aborted_step=aborted,
                       label=label)


def _rows_curve(rows) -> LossCurve:
    return LossCurve(points=[(tokens, loss) for _, tokens, loss, _ in rows])


def _clip_global_norm(gmap: dict[str, Optional[Tensor]], max_norm: float) -> None:
    total = 0.0
    for g in gmap.values():
        if g is not None:
            total += K.sumsq(g.data)
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for name, g in gmap.items():
            if g is not None:
                gmap[name] = Tensor(g.shape, K.ew_scale(g.data, factor))
