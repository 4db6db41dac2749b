"""mea-lab: a desk-scale numerical laboratory for head-mixing attention.

Implements grouped causal attention and its head-mixing variants (MEA, DFA,
THA), certifies their algebraic relationships numerically, compresses KV
projections into fewer virtual heads via truncated SVD, fits data-scaling
power laws for learning-rate selection, and trains a toy transformer to
feed both pipelines.
"""

__version__ = "0.1.0"

from mea_lab.attention import AttnConfig, AttnWeights, Variant, attend, group_of, rope
from mea_lab.kernels import BACKEND as kernel_backend
from mea_lab.tensor import Tensor

__all__ = [
    "AttnConfig",
    "AttnWeights",
    "Tensor",
    "Variant",
    "attend",
    "group_of",
    "kernel_backend",
    "rope",
    "__version__",
]
