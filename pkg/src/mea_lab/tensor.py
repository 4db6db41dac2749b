"""Dense row-major f64 tensors and the core operations built on them.

Values are immutable from the caller's perspective; every operation returns
a fresh tensor. There is no broadcasting: shapes are checked explicitly and
mismatches raise ShapeError.
"""

from __future__ import annotations

import math
import random
from array import array
from typing import Iterable, Sequence

from mea_lab import kernels as K


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class NumericError(ArithmeticError):
    """An iterative numeric procedure failed to converge."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


def _prod(shape: Sequence[int]) -> int:
    p = 1
    for s in shape:
        p *= s
    return p


class Tensor:
    """Flat row-major array of 64-bit floats with an explicit shape."""

    __slots__ = ("shape", "data")

    def __init__(self, shape: Sequence[int], data: array):
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise ShapeError(f"non-positive dimension in shape {shape}")
        if len(data) != _prod(shape):
            raise ShapeError(
                f"data length {len(data)} != product of shape {shape}")
        self.shape = shape
        self.data = data

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zeros(*shape: int) -> "Tensor":
        return Tensor(shape, K.zeros_buf(_prod(shape)))

    @staticmethod
    def full(shape: Sequence[int], value: float) -> "Tensor":
        buf = K.zeros_buf(_prod(shape))
        for i in range(len(buf)):
            buf[i] = value
        return Tensor(shape, buf)

    @staticmethod
    def of(nested) -> "Tensor":
        """Build from a scalar or (arbitrarily deep) nested list of numbers."""
        shape = []
        probe = nested
        while isinstance(probe, (list, tuple)):
            shape.append(len(probe))
            probe = probe[0]
        flat: list[float] = []

        def walk(node, depth):
            if depth == len(shape):
                flat.append(float(node))
                return
            if len(node) != shape[depth]:
                raise ShapeError("ragged nested list")
            for item in node:
                walk(item, depth + 1)

        if not shape:
            return Tensor((1,), array("d", [float(nested)]))
        walk(nested, 0)
        return Tensor(shape, array("d", flat))

    @staticmethod
    def scalar(value: float) -> "Tensor":
        return Tensor((1,), array("d", [float(value)]))

    @staticmethod
    def eye(n: int) -> "Tensor":
        buf = K.zeros_buf(n * n)
        for i in range(n):
            buf[i * n + i] = 1.0
        return Tensor((n, n), buf)

    @staticmethod
    def randn(shape: Sequence[int], rng: random.Random, std: float = 1.0) -> "Tensor":
        buf = array("d", (rng.gauss(0.0, std) for _ in range(_prod(shape))))
        return Tensor(shape, buf)

    # -- access ------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.data)

    def at(self, *idx: int) -> float:
        if len(idx) != len(self.shape):
            raise ShapeError(f"need {len(self.shape)} indices, got {len(idx)}")
        off = 0
        for i, (ix, dim) in enumerate(zip(idx, self.shape)):
            if not 0 <= ix < dim:
                raise ShapeError(f"index {ix} out of range for axis {i}")
            off = off * dim + ix
        return self.data[off]

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on non-scalar shape {self.shape}")
        return self.data[0]

    def tolist(self):
        def build(shape, base, stride):
            if not shape:
                return self.data[base]
            sub = stride // shape[0]
            return [build(shape[1:], base + i * sub, sub) for i in range(shape[0])]

        return build(list(self.shape), 0, self.size)

    def copy(self) -> "Tensor":
        return Tensor(self.shape, array("d", self.data))

    def reshape(self, *shape: int) -> "Tensor":
        if _prod(shape) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} to {shape}")
        return Tensor(shape, array("d", self.data))

    def transpose(self) -> "Tensor":
        m, n = self._as_matrix()
        buf = K.zeros_buf(self.size)
        for i in range(m):
            for j in range(n):
                buf[j * m + i] = self.data[i * n + j]
        return Tensor((n, m), buf)

    def _as_matrix(self) -> tuple[int, int]:
        if len(self.shape) != 2:
            raise ShapeError(f"expected a matrix, got shape {self.shape}")
        return self.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


# -- elementwise helpers ---------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return Tensor(a.shape, K.ew_add(a.data, b.data))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return Tensor(a.shape, K.ew_sub(a.data, b.data))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return Tensor(a.shape, K.ew_mul(a.data, b.data))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.shape, K.ew_scale(a.data, float(c)))


def silu(a: Tensor) -> Tensor:
    return Tensor(a.shape, K.silu_fwd(a.data))


# -- matrix operations -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard matrix product of an m x k and a k x n tensor."""
    m, k = a._as_matrix()
    k2, n = b._as_matrix()
    if k != k2:
        raise ShapeError(f"matmul: inner dims {k} vs {k2}")
    return Tensor((m, n), K.mm_nn(a.data, b.data, m, k, n))


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing the transpose."""
    m, k = a._as_matrix()
    n, k2 = b._as_matrix()
    if k != k2:
        raise ShapeError(f"matmul_nt: inner dims {k} vs {k2}")
    return Tensor((m, n), K.mm_nt(a.data, b.data, m, k, n))


def matmul_tn(a: Tensor, b: Tensor) -> Tensor:
    """a.T @ b without materializing the transpose."""
    k, m = a._as_matrix()
    k2, n = b._as_matrix()
    if k != k2:
        raise ShapeError(f"matmul_tn: inner dims {k} vs {k2}")
    return Tensor((m, n), K.mm_tn(a.data, b.data, m, k, n))


def softmax_rows(a: Tensor, causal: bool = False) -> Tensor:
    """Row-stabilized softmax; with causal=True entries above the main
    diagonal get weight exactly 0 and each visible prefix sums to 1."""
    m, n = a._as_matrix()
    return Tensor((m, n), K.softmax_fwd(a.data, m, n, 1 if causal else 0))


def rms_norm(x: Tensor, gain: Tensor, eps: float = 0.0) -> Tensor:
    """Scale each row by 1/sqrt(mean(x^2)+eps), then elementwise gain."""
    m, d = x._as_matrix()
    if gain.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.shape}, want ({d},)")
    out, _ = K.rms_fwd(x.data, gain.data, m, d, float(eps))
    return Tensor((m, d), out)


def head_mix(t: Tensor, w: Tensor) -> Tensor:
    """Mix component heads: out[n,j,:] = sum_i t[n,i,:] * w[i,j].

    t is N x h' x d, w is h' x h; the result is N x h x d. This is the
    einsum "n h' d, h' h -> n h d".
    """
    if len(t.shape) != 3:
        raise ShapeError(f"head_mix: want 3-d tensor, got {t.shape}")
    n, hp, d = t.shape
    hp2, h = w._as_matrix()
    if hp != hp2:
        raise ShapeError(f"head_mix: {hp} component heads vs w rows {hp2}")
    return Tensor((n, h, d), K.head_mix_fwd(t.data, w.data, n, hp, h, d))


# -- head/column slicing (strided copies) ----------------------------------


def head_select(t: Tensor, i: int) -> Tensor:
    """Extract head i from an N x h x d tensor as an N x d matrix."""
    if len(t.shape) != 3:
        raise ShapeError(f"head_select: want 3-d tensor, got {t.shape}")
    n, h, d = t.shape
    if not 0 <= i < h:
        raise ShapeError(f"head_select: head {i} out of range 0..{h - 1}")
    buf = K.zeros_buf(n * d)
    for pos in range(n):
        src = (pos * h + i) * d
        buf[pos * d:(pos + 1) * d] = t.data[src:src + d]
    return Tensor((n, d), buf)


def stack_heads(mats: Sequence[Tensor]) -> Tensor:
    """Stack h matrices of shape N x d into an N x h x d tensor."""
    h = len(mats)
    if h == 0:
        raise ShapeError("stack_heads: empty list")
    n, d = mats[0]._as_matrix()
    buf = K.zeros_buf(n * h * d)
    for i, m in enumerate(mats):
        if m.shape != (n, d):
            raise ShapeError(f"stack_heads: head {i} shape {m.shape} != {(n, d)}")
        for pos in range(n):
            dst = (pos * h + i) * d
            buf[dst:dst + d] = m.data[pos * d:(pos + 1) * d]
    return Tensor((n, h, d), buf)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a matrix."""
    m, n = a._as_matrix()
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_cols: [{start},{stop}) out of {n} columns")
    w = stop - start
    buf = K.zeros_buf(m * w)
    for i in range(m):
        buf[i * w:(i + 1) * w] = a.data[i * n + start:i * n + stop]
    return Tensor((m, w), buf)


# -- diagnostics -----------------------------------------------------------


def max_abs_diff(a: Tensor, b: Tensor) -> float:
    _check_same_shape(a, b, "max_abs_diff")
    return max((abs(x - y) for x, y in zip(a.data, b.data)), default=0.0)


def frobenius_norm(a: Tensor) -> float:
    return math.sqrt(K.sumsq(a.data))


def all_finite(a: Tensor) -> bool:
    return all(math.isfinite(v) for v in a.data)


def assert_finite(a: Tensor, context: str = "tensor") -> None:
    if not all_finite(a):
        raise NumericError(f"{context} contains NaN or Inf")


def tensors_from_rows(rows: Iterable[Sequence[float]]) -> Tensor:
    return Tensor.of([list(r) for r in rows])
