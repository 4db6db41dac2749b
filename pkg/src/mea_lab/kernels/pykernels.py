"""Pure-Python kernel implementations.

Every function here has a compiled twin in `_ckernels.pyx` with identical
loop structure and accumulation order, so the two backends produce
bit-identical results. All buffers are flat row-major `array('d')`; shape
handling and validation live one level up in `mea_lab.tensor`.
"""

from array import array
from math import cos, exp, log, sin, sqrt

BACKEND_NAME = "python"


def zeros_buf(n: int) -> array:
    return array("d", bytes(8 * n))


def mm_nn(a, b, m: int, k: int, n: int):
    """C = A (m x k) @ B (k x n), flat row-major."""
    out = zeros_buf(m * n)
    for i in range(m):
        ik = i * k
        io = i * n
        for p in range(k):
            aip = a[ik + p]
            if aip == 0.0:
                continue
            pb = p * n
            for j in range(n):
                out[io + j] += aip * b[pb + j]
    return out


def mm_nt(a, b, m: int, k: int, n: int):
    """C = A (m x k) @ B^T, with B stored as n x k."""
    out = zeros_buf(m * n)
    for i in range(m):
        ik = i * k
        io = i * n
        for j in range(n):
            jk = j * k
            s = 0.0
            for p in range(k):
                s += a[ik + p] * b[jk + p]
            out[io + j] = s
    return out


def mm_tn(a, b, m: int, k: int, n: int):
    """C = A^T @ B, with A stored as k x m and B as k x n."""
    out = zeros_buf(m * n)
    for p in range(k):
        pa = p * m
        pb = p * n
        for i in range(m):
            api = a[pa + i]
            if api == 0.0:
                continue
            io = i * n
            for j in range(n):
                out[io + j] += api * b[pb + j]
    return out


def softmax_fwd(x, m: int, n: int, causal: int):
    """Row softmax with max-subtraction; masked (j > i) entries are exactly 0."""
    out = zeros_buf(m * n)
    for i in range(m):
        limit = n if not causal else min(i + 1, n)
        base = i * n
        mx = x[base]
        for j in range(1, limit):
            v = x[base + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(limit):
            e = exp(x[base + j] - mx)
            out[base + j] = e
            s += e
        for j in range(limit):
            out[base + j] /= s
    return out


def softmax_bwd(y, dy, m: int, n: int):
    """dx = y * (dy - sum_j dy_j * y_j), rows independent."""
    dx = zeros_buf(m * n)
    for i in range(m):
        base = i * n
        s = 0.0
        for j in range(n):
            s += dy[base + j] * y[base + j]
        for j in range(n):
            dx[base + j] = y[base + j] * (dy[base + j] - s)
    return dx


def rms_fwd(x, gain, m: int, d: int, eps: float):
    """Row RMS-normalize then per-channel gain; returns (y, per-row 1/rms)."""
    out = zeros_buf(m * d)
    inv = zeros_buf(m)
    for i in range(m):
        base = i * d
        ss = 0.0
        for c in range(d):
            v = x[base + c]
            ss += v * v
        r = 1.0 / sqrt(ss / d + eps)
        inv[i] = r
        for c in range(d):
            out[base + c] = (x[base + c] * r) * gain[c]
    return out, inv


def rms_bwd(x, gain, inv, dy, m: int, d: int):
    dx = zeros_buf(m * d)
    dgain = zeros_buf(d)
    for i in range(m):
        base = i * d
        r = inv[i]
        s = 0.0
        for c in range(d):
            s += dy[base + c] * gain[c] * x[base + c]
        q = (r * r * r) * (s / d)
        for c in range(d):
            dx[base + c] = dy[base + c] * gain[c] * r - x[base + c] * q
            dgain[c] += dy[base + c] * x[base + c] * r
    return dx, dgain


def rope_apply(x, freqs, npos: int, h: int, d: int, sign: float):
    """Rotate dim pairs (2j, 2j+1) of each head by angle pos*freqs[j].

    sign=+1 applies the rotation, sign=-1 its transpose (the exact adjoint).
    """
    out = zeros_buf(npos * h * d)
    half = d // 2
    for pos in range(npos):
        rowbase = pos * h * d
        for j in range(half):
            ang = pos * freqs[j]
            c = cos(ang)
            s = sin(ang) * sign
            for head in range(h):
                o = rowbase + head * d + 2 * j
                x0 = x[o]
                x1 = x[o + 1]
                out[o] = x0 * c - x1 * s
                out[o + 1] = x0 * s + x1 * c
    return out


def head_mix_fwd(t, w, n: int, hp: int, h: int, d: int):
    """out[n,j,:] = sum_i t[n,i,:] * w[i,j]  (t: n x hp x d, w: hp x h)."""
    out = zeros_buf(n * h * d)
    for pos in range(n):
        tb = pos * hp * d
        ob = pos * h * d
        for i in range(hp):
            ti = tb + i * d
            iw = i * h
            for j in range(h):
                wij = w[iw + j]
                if wij == 0.0:
                    continue
                oj = ob + j * d
                for c in range(d):
                    out[oj + c] += t[ti + c] * wij
    return out


def head_mix_gw(t, dy, n: int, hp: int, h: int, d: int):
    """Gradient of head_mix w.r.t. w: gw[i,j] = sum_{n,c} t[n,i,c] * dy[n,j,c]."""
    gw = zeros_buf(hp * h)
    for pos in range(n):
        tb = pos * hp * d
        ob = pos * h * d
        for i in range(hp):
            ti = tb + i * d
            iw = i * h
            for j in range(h):
                oj = ob + j * d
                s = 0.0
                for c in range(d):
                    s += t[ti + c] * dy[oj + c]
                gw[iw + j] += s
    return gw


def ew_add(a, b):
    out = zeros_buf(len(a))
    for i in range(len(a)):
        out[i] = a[i] + b[i]
    return out


def ew_sub(a, b):
    out = zeros_buf(len(a))
    for i in range(len(a)):
        out[i] = a[i] - b[i]
    return out


def ew_mul(a, b):
    out = zeros_buf(len(a))
    for i in range(len(a)):
        out[i] = a[i] * b[i]
    return out


def ew_scale(a, c: float):
    out = zeros_buf(len(a))
    for i in range(len(a)):
        out[i] = a[i] * c
    return out


def ew_acc(a, b):
    """In-place a += b (adjoint accumulation)."""
    for i in range(len(a)):
        a[i] += b[i]


def silu_fwd(x):
    out = zeros_buf(len(x))
    for i in range(len(x)):
        v = x[i]
        out[i] = v / (1.0 + exp(-v))
    return out


def silu_bwd(x, dy):
    dx = zeros_buf(len(x))
    for i in range(len(x)):
        v = x[i]
        s = 1.0 / (1.0 + exp(-v))
        dx[i] = dy[i] * (s * (1.0 + v * (1.0 - s)))
    return dx


def sum_all(a) -> float:
    s = 0.0
    for i in range(len(a)):
        s += a[i]
    return s


def dot(a, b) -> float:
    s = 0.0
    for i in range(len(a)):
        s += a[i] * b[i]
    return s


def sumsq(a) -> float:
    s = 0.0
    for i in range(len(a)):
        s += a[i] * a[i]
    return s


def adamw_update(p, g, m, v, t: int, lr: float, b1: float, b2: float,
                 eps: float, wd: float):
    """Decoupled-weight-decay Adam step, in place on p/m/v."""
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i in range(len(p)):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        mh = mi / bc1
        vh = vi / bc2
        p[i] = p[i] - lr * (mh / (sqrt(vh) + eps)) - lr * wd * p[i]


def gather_rows(table, ids, d: int):
    out = zeros_buf(len(ids) * d)
    for r in range(len(ids)):
        tb = ids[r] * d
        ob = r * d
        for c in range(d):
            out[ob + c] = table[tb + c]
    return out


def scatter_add_rows(out, ids, src, d: int):
    """In-place out[ids[r], :] += src[r, :]."""
    for r in range(len(ids)):
        tb = ids[r] * d
        sb = r * d
        for c in range(d):
            out[tb + c] += src[sb + c]


def cross_entropy_fwd(logits, targets, m: int, n: int):
    """Mean negative log-likelihood; returns (loss, softmax probs for bwd)."""
    probs = softmax_fwd(logits, m, n, 0)
    total = 0.0
    for i in range(m):
        base = i * n
        mx = logits[base]
        for j in range(1, n):
            v = logits[base + j]
            if v > mx:
                mx = v
        s = 0.0
        for j in range(n):
            s += exp(logits[base + j] - mx)
        total += (log(s) + mx) - logits[base + targets[i]]
    return total / m, probs
