#!/usr/bin/env python3
"""Compare the compiled kernel core against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--train]

Each kernel runs on identical inputs through both backends; the table shows
per-call time and speedup, and verifies outputs are bit-identical. --train
additionally times a full toy-model training step per backend.
"""

import argparse
import random
import time
from array import array

from mea_lab.kernels import pykernels

try:
    from mea_lab.kernels import _ckernels
except ImportError:
    _ckernels = None


def _rand_buf(n, rng):
    return array("d", (rng.gauss(0, 1) for _ in range(n)))


def _time(fn, *args, repeat=5):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_kernels():
    rng = random.Random(0)
    n, d, h = 128, 64, 4
    a = _rand_buf(n * d, rng)
    b = _rand_buf(d * d, rng)
    gain = _rand_buf(d, rng)
    heads = _rand_buf(n * h * (d // h), rng)
    mix = _rand_buf(h * h, rng)
    freqs = array("d", (10000.0 ** (-2.0 * j / (d // h))
                        for j in range((d // h) // 2)))
    scores = _rand_buf(n * n, rng)
    cases = [
        ("mm_nn 128x64x64", "mm_nn", (a, b, n, d, d)),
        ("mm_nt 128x64x128", "mm_nt", (a, a, n, d, n)),
        ("softmax 128x128 causal", "softmax_fwd", (scores, n, n, 1)),
        ("rms_norm 128x64", "rms_fwd", (a, gain, n, d, 1e-6)),
        ("rope 128x4x16", "rope_apply", (heads, freqs, n, h, d // h, 1.0)),
        ("head_mix 128x4x16", "head_mix_fwd", (heads, mix, n, h, h, d // h)),
        ("silu 8192", "silu_fwd", (a,)),
    ]
    print(f"{'kernel':26s} {'python':>12s} {'cython':>12s} {'speedup':>9s}  bit-identical")
    for label, name, args in cases:
        t_py, out_py = _time(getattr(pykernels, name), *args)
        if _ckernels is None:
            print(f"{label:26s} {t_py * 1e3:10.3f}ms {'n/a':>12s}")
            continue
        t_cy, out_cy = _time(getattr(_ckernels, name), *args)
        flat_py = out_py[0] if isinstance(out_py, tuple) else out_py
        flat_cy = out_cy[0] if isinstance(out_cy, tuple) else out_cy
        same = flat_py.tobytes() == array("d", flat_cy).tobytes()
        print(f"{label:26s} {t_py * 1e3:10.3f}ms {t_cy * 1e3:10.3f}ms "
              f"{t_py / t_cy:8.1f}x  {same}")


def bench_train_step():
    import os
    import subprocess
    import sys

    code = (
        "import time\n"
        "from mea_lab import kernels\n"
        "from mea_lab.attention import AttnConfig\n"
        "from mea_lab.model import ModelConfig\n"
        "from mea_lab.train import TrainConfig, train\n"
        "from mea_lab.corpus import make_corpus\n"
        "corpus = make_corpus('copy', 30000, seed=1)\n"
        "acfg = AttnConfig(h=4, g=4, d_qk=16, d_v=16, d_model=64)\n"
        "mcfg = ModelConfig(layers=2, d_model=64, attn=acfg, ffn_hidden=128, max_seq=64)\n"
        "tcfg = TrainConfig(lr_peak=1e-3, total_steps=10, warmup_steps=2, "
        "batch_tokens=64, seq_len=64, seed=0)\n"
        "t0 = time.time(); train(mcfg, tcfg, corpus)\n"
        "print(f'{kernels.BACKEND}: {(time.time() - t0) / 10 * 1e3:.1f} ms/step')\n"
    )
    for env_flag in ("", "1"):
        env = dict(os.environ)
        if env_flag:
            env["MEA_LAB_PURE_PY"] = env_flag
        else:
            env.pop("MEA_LAB_PURE_PY", None)
        subprocess.run([sys.executable, "-c", code], env=env, check=True)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--train", action="store_true",
                    help="also time a full training step per backend")
    opts = ap.parse_args()
    bench_kernels()
    if opts.train:
        print()
        bench_train_step()
