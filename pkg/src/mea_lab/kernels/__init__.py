"""Kernel backend selection.

Prefers the compiled extension; falls back to the pure-Python twin when the
extension is missing or MEA_LAB_PURE_PY is set. Both backends compute
bit-identical results (see benchmarks/bench_kernels.py for the speed gap).
"""

import os

if os.environ.get("MEA_LAB_PURE_PY"):
    from mea_lab.kernels import pykernels as impl
else:
    try:
        from mea_lab.kernels import _ckernels as impl  # type: ignore[no-redef]
    except ImportError:
        from mea_lab.kernels import pykernels as impl  # type: ignore[no-redef]

BACKEND = impl.BACKEND_NAME

zeros_buf = impl.zeros_buf
mm_nn = impl.mm_nn
mm_nt = impl.mm_nt
mm_tn = impl.mm_tn
softmax_fwd = impl.softmax_fwd
softmax_bwd = impl.softmax_bwd
rms_fwd = impl.rms_fwd
rms_bwd = impl.rms_bwd
rope_apply = impl.rope_apply
head_mix_fwd = impl.head_mix_fwd
head_mix_gw = impl.head_mix_gw
ew_add = impl.ew_add
ew_sub = impl.ew_sub
ew_mul = impl.ew_mul
ew_scale = impl.ew_scale
ew_acc = impl.ew_acc
silu_fwd = impl.silu_fwd
silu_bwd = impl.silu_bwd
sum_all = impl.sum_all
dot = impl.dot
sumsq = impl.sumsq
adamw_update = impl.adamw_update
gather_rows = impl.gather_rows
scatter_add_rows = impl.scatter_add_rows
cross_entropy_fwd = impl.cross_entropy_fwd
