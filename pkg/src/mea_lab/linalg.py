"""Singular value decomposition via one-sided Jacobi rotations.

Built for the small, skinny matrices this package decomposes (head-reshaped
projection weights, at most a few thousand rows by a handful of columns).
Rotations orthogonalize column pairs until every pair passes the relative
off-diagonal tolerance; rank-deficient inputs get their missing left
singular vectors from an orthogonal completion so U stays orthonormal.
"""

from __future__ import annotations

import math
from array import array
from dataclasses import dataclass

from mea_lab import kernels as K
from mea_lab.tensor import NumericError, ShapeError, Tensor

MAX_SWEEPS = 100
OFFDIAG_TOL = 1e-12


@dataclass
class SvdResult:
    u: Tensor       # m x r, orthonormal columns
    sigma: Tensor   # (r,), descending, nonnegative
    vt: Tensor      # r x n, orthonormal rows

    def reconstruct(self, k: int | None = None) -> Tensor:
        """u[:, :k] @ diag(sigma[:k]) @ vt[:k, :] (full rank when k is None)."""
        m = self.u.shape[0]
        r = self.sigma.shape[0]
        n = self.vt.shape[1]
        if k is None:
            k = r
        if not 0 <= k <= r:
            raise ShapeError(f"reconstruct: rank {k} out of 0..{r}")
        out = K.zeros_buf(m * n)
        ud, sd, vd = self.u.data, self.sigma.data, self.vt.data
        for j in range(k):
            sj = sd[j]
            if sj == 0.0:
                continue
            for i in range(m):
                us = ud[i * r + j] * sj
                if us == 0.0:
                    continue
                base = i * n
                vb = j * n
                for c in range(n):
                    out[base + c] += us * vd[vb + c]
        return Tensor((m, n), out)


def truncation_error(sigma: Tensor, k: int) -> float:
    """Frobenius error of the best rank-k approximation: sqrt(sum of
    discarded sigma^2)."""
    return math.sqrt(sum(s * s for s in sigma.data[k:]))


def svd(a: Tensor, max_sweeps: int = MAX_SWEEPS, tol: float = OFFDIAG_TOL) -> SvdResult:
    """Full SVD a = u @ diag(sigma) @ vt with r = min(m, n).

    Raises NumericError if the rotation sweeps do not converge within
    max_sweeps, reporting the residual off-diagonal ratio.
    """
    m, n = a._as_matrix()
    if m < n:
        flipped = svd(a.transpose(), max_sweeps=max_sweeps, tol=tol)
        return SvdResult(u=flipped.vt.transpose(), sigma=flipped.sigma,
                         vt=flipped.u.transpose())

    # Work on columns as contiguous arrays.
    cols = [array("d", (a.data[i * n + j] for i in range(m))) for j in range(n)]
    v = [array("d", (1.0 if i == j else 0.0 for i in range(n))) for j in range(n)]

    worst = 0.0
    converged = False
    for _ in range(max_sweeps):
        rotated = False
        worst = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                wp, wq = cols[p], cols[q]
                alpha = K.sumsq(wp)
                beta = K.sumsq(wq)
                gamma = K.dot(wp, wq)
                denom = math.sqrt(alpha * beta)
                if denom == 0.0:
                    continue
                ratio = abs(gamma) / denom
                if ratio > worst:
                    worst = ratio
                if ratio <= tol:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0.0 else -1.0) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    xp, xq = wp[i], wq[i]
                    wp[i] = c * xp - s * xq
                    wq[i] = s * xp + c * xq
                vp, vq = v[p], v[q]
                for i in range(n):
                    xp, xq = vp[i], vq[i]
                    vp[i] = c * xp - s * xq
                    vq[i] = s * xp + c * xq
        if not rotated:
            converged = True
            break
    if not converged:
        raise NumericError(
            f"jacobi svd did not converge in {max_sweeps} sweeps "
            f"(residual off-diagonal ratio {worst:.3e})")

    sigmas = [math.sqrt(K.sumsq(col)) for col in cols]
    order = sorted(range(n), key=lambda j: -sigmas[j])

    u_cols: list[array] = []
    zero_slots: list[int] = []
    sig_sorted: list[float] = []
    scale_floor = (sigmas[order[0]] if n else 0.0) * 1e-13
    for rank, j in enumerate(order):
        s = sigmas[j]
        sig_sorted.append(s)
        if s > scale_floor and s > 0.0:
            u_cols.append(array("d", (x / s for x in cols[j])))
        else:
            u_cols.append(K.zeros_buf(m))
            zero_slots.append(rank)
    if zero_slots:
        _complete_orthonormal(u_cols, zero_slots, m)

    u = K.zeros_buf(m * n)
    for j, col in enumerate(u_cols):
        for i in range(m):
            u[i * n + j] = col[i]
    vt = K.zeros_buf(n * n)
    for r, j in enumerate(order):
        vt[r * n:(r + 1) * n] = v[j]
    return SvdResult(u=Tensor((m, n), u),
                     sigma=Tensor((n,), array("d", sig_sorted)),
                     vt=Tensor((n, n), vt))


def _complete_orthonormal(u_cols: list[array], slots: list[int], m: int) -> None:
    """Fill zero columns with unit vectors orthogonal to all others."""
    filled = [j for j in range(len(u_cols)) if j not in slots]
    for slot in slots:
        best: array | None = None
        best_norm = 0.0
        for e in range(m):
            cand = K.zeros_buf(m)
            cand[e] = 1.0
            for j in filled:
                proj = K.dot(cand, u_cols[j])
                if proj != 0.0:
                    other = u_cols[j]
                    for i in range(m):
                        cand[i] -= proj * other[i]
            norm = math.sqrt(K.sumsq(cand))
            if norm > best_norm:
                best_norm = norm
                best = cand
            if norm > 0.9:
                break
        if best is None or best_norm == 0.0:
            raise NumericError("unable to complete orthonormal basis")
        for i in range(m):
            best[i] /= best_norm
        u_cols[slot] = best
        filled.append(slot)


def least_squares(a: Tensor, b: Tensor, rcond: float = 1e-12) -> Tensor:
    """Minimum-norm least-squares solution of a @ x = b via the SVD
    pseudo-inverse; b may have multiple columns."""
    m, n = a._as_matrix()
    mb, p = b._as_matrix()
    if m != mb:
        raise ShapeError(f"least_squares: {m} rows vs {mb}")
    res = svd(a)
    cutoff = rcond * (res.sigma.data[0] if res.sigma.size else 0.0)
    # x = V @ diag(1/sigma) @ U^T @ b, dropping tiny singular values.
    utb = K.mm_tn(res.u.data, b.data, res.u.shape[1], m, p)
    r = res.sigma.shape[0]
    for j in range(r):
        s = res.sigma.data[j]
        inv = 1.0 / s if s > cutoff else 0.0
        for c in range(p):
            utb[j * p + c] *= inv
    x = K.mm_tn(res.vt.data, utb, n, r, p)
    return Tensor((n, p), x)


def residual_norm(a: Tensor, x: Tensor, b: Tensor) -> float:
    """Frobenius norm of a @ x - b."""
    m, n = a._as_matrix()
    _, p = x._as_matrix()
    ax = K.mm_nn(a.data, x.data, m, n, p)
    return math.sqrt(K.sumsq(K.ew_sub(ax, b.data)))
