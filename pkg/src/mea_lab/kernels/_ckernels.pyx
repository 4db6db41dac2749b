# cython: boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled kernel core.

Mirrors `pykernels.py` loop-for-loop: same accumulation order, same libm
calls, compiled with -ffp-contract=off, so results are bit-identical to the
pure-Python fallback.
"""

from cpython cimport array
from libc.math cimport cos, exp, log, pow, sin, sqrt

import array as _array

BACKEND_NAME = "cython"

cdef array.array _D = _array.array("d", [])


cdef array.array _zeros(Py_ssize_t n):
    return array.clone(_D, n, zero=True)


def zeros_buf(Py_ssize_t n):
    return _zeros(n)


def mm_nn(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef array.array outa = _zeros(m * n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, p, j, ik, io, pb
    cdef double aip
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
    return outa


def mm_nt(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef array.array outa = _zeros(m * n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, p, ik, io, jk
    cdef double s
    for i in range(m):
        ik = i * k
        io = i * n
        for j in range(n):
            jk = j * k
            s = 0.0
            for p in range(k):
                s += a[ik + p] * b[jk + p]
            out[io + j] = s
    return outa


def mm_tn(double[::1] a, double[::1] b, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef array.array outa = _zeros(m * n)
    cdef double[::1] out = outa
    cdef Py_ssize_t p, i, j, pa, pb, io
    cdef double api
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
    return outa


def softmax_fwd(double[::1] x, Py_ssize_t m, Py_ssize_t n, int causal):
    cdef array.array outa = _zeros(m * n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i, j, limit, base
    cdef double mx, s, e, v
    for i in range(m):
        limit = n
        if causal and i + 1 < n:
            limit = i + 1
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
    return outa


def softmax_bwd(double[::1] y, double[::1] dy, Py_ssize_t m, Py_ssize_t n):
    cdef array.array dxa = _zeros(m * n)
    cdef double[::1] dx = dxa
    cdef Py_ssize_t i, j, base
    cdef double s
    for i in range(m):
        base = i * n
        s = 0.0
        for j in range(n):
            s += dy[base + j] * y[base + j]
        for j in range(n):
            dx[base + j] = y[base + j] * (dy[base + j] - s)
    return dxa


def rms_fwd(double[::1] x, double[::1] gain, Py_ssize_t m, Py_ssize_t d, double eps):
    cdef array.array outa = _zeros(m * d)
    cdef array.array inva = _zeros(m)
    cdef double[::1] out = outa
    cdef double[::1] inv = inva
    cdef Py_ssize_t i, c, base
    cdef double ss, r, v
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
    return outa, inva


def rms_bwd(double[::1] x, double[::1] gain, double[::1] inv, double[::1] dy,
            Py_ssize_t m, Py_ssize_t d):
    cdef array.array dxa = _zeros(m * d)
    cdef array.array dgaina = _zeros(d)
    cdef double[::1] dx = dxa
    cdef double[::1] dgain = dgaina
    cdef Py_ssize_t i, c, base
    cdef double r, s, q
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
    return dxa, dgaina


def rope_apply(double[::1] x, double[::1] freqs, Py_ssize_t npos, Py_ssize_t h,
               Py_ssize_t d, double sign):
    cdef array.array outa = _zeros(npos * h * d)
    cdef double[::1] out = outa
    cdef Py_ssize_t pos, j, head, half, rowbase, o
    cdef double ang, c, s, x0, x1
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
    return outa


def head_mix_fwd(double[::1] t, double[::1] w, Py_ssize_t n, Py_ssize_t hp,
                 Py_ssize_t h, Py_ssize_t d):
    cdef array.array outa = _zeros(n * h * d)
    cdef double[::1] out = outa
    cdef Py_ssize_t pos, i, j, c, tb, ob, ti, iw, oj
    cdef double wij
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
    return outa


def head_mix_gw(double[::1] t, double[::1] dy, Py_ssize_t n, Py_ssize_t hp,
                Py_ssize_t h, Py_ssize_t d):
    cdef array.array gwa = _zeros(hp * h)
    cdef double[::1] gw = gwa
    cdef Py_ssize_t pos, i, j, c, tb, ob, ti, iw, oj
    cdef double s
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
    return gwa


def ew_add(double[::1] a, double[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] + b[i]
    return outa


def ew_sub(double[::1] a, double[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] - b[i]
    return outa


def ew_mul(double[::1] a, double[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * b[i]
    return outa


def ew_scale(double[::1] a, double c):
    cdef Py_ssize_t n = a.shape[0]
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a[i] * c
    return outa


def ew_acc(double[::1] a, double[::1] b):
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        a[i] += b[i]


def silu_fwd(double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef array.array outa = _zeros(n)
    cdef double[::1] out = outa
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = v / (1.0 + exp(-v))
    return outa


def silu_bwd(double[::1] x, double[::1] dy):
    cdef Py_ssize_t n = x.shape[0]
    cdef array.array dxa = _zeros(n)
    cdef double[::1] dx = dxa
    cdef Py_ssize_t i
    cdef double v, s
    for i in range(n):
        v = x[i]
        s = 1.0 / (1.0 + exp(-v))
        dx[i] = dy[i] * (s * (1.0 + v * (1.0 - s)))
    return dxa


def sum_all(double[::1] a):
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        s += a[i]
    return s


def dot(double[::1] a, double[::1] b):
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        s += a[i] * b[i]
    return s


def sumsq(double[::1] a):
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        s += a[i] * a[i]
    return s


def adamw_update(double[::1] p, double[::1] g, double[::1] m, double[::1] v,
                 Py_ssize_t t, double lr, double b1, double b2, double eps,
                 double wd):
    cdef double bc1 = 1.0 - pow(b1, <double> t)
    cdef double bc2 = 1.0 - pow(b2, <double> t)
    cdef Py_ssize_t i
    cdef double gi, mi, vi, mh, vh
    for i in range(p.shape[0]):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        mh = mi / bc1
        vh = vi / bc2
        p[i] = p[i] - lr * (mh / (sqrt(vh) + eps)) - lr * wd * p[i]


def gather_rows(double[::1] table, ids, Py_ssize_t d):
    cdef Py_ssize_t nrows = len(ids)
    cdef array.array outa = _zeros(nrows * d)
    cdef double[::1] out = outa
    cdef Py_ssize_t r, c, tb, ob
    for r in range(nrows):
        tb = <Py_ssize_t> ids[r] * d
        ob = r * d
        for c in range(d):
            out[ob + c] = table[tb + c]
    return outa


def scatter_add_rows(double[::1] out, ids, double[::1] src, Py_ssize_t d):
    cdef Py_ssize_t nrows = len(ids)
    cdef Py_ssize_t r, c, tb, sb
    for r in range(nrows):
        tb = <Py_ssize_t> ids[r] * d
        sb = r * d
        for c in range(d):
            out[tb + c] += src[sb + c]


def cross_entropy_fwd(double[::1] logits, targets, Py_ssize_t m, Py_ssize_t n):
    probs = softmax_fwd(logits, m, n, 0)
    cdef Py_ssize_t i, j, base
    cdef double total = 0.0
    cdef double mx, s, v
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
        total += (log(s) + mx) - logits[base + <Py_ssize_t> targets[i]]
    return total / m, probs
