"""Tape-based reverse-mode differentiation over the tensor op set.

A Tape records one forward computation; backward() walks it once in reverse
and accumulates adjoints. Tapes are cheap and rebuilt per training step.
Each op's vjp returns freshly allocated buffers, never aliases of the
incoming adjoint, so accumulation can mutate in place.
"""

from __future__ import annotations

from array import array
from typing import Callable, Sequence

from mea_lab import kernels as K
from mea_lab.tensor import ContractError, ShapeError, Tensor

# vjp: adjoint buffer of this node -> [(parent index, adjoint buffer)]
_Vjp = Callable[[array], list]


class _Node:
    __slots__ = ("value", "vjp")

    def __init__(self, value: Tensor, vjp: _Vjp | None):
        self.value = value
        self.vjp = vjp


class Var:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Tensor:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(idx={self.idx}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes: list[_Node] = []

    def _emit(self, value: Tensor, vjp: _Vjp | None) -> Var:
        self.nodes.append(_Node(value, vjp))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value: Tensor) -> Var:
        return self._emit(value, None)

    def backward(self, loss: Var) -> dict[int, Tensor]:
        """Adjoints of every node reachable from `loss`, keyed by node index.

        The loss must be scalar (shape (1,)).
        """
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.value.shape != (1,):
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.value.shape}")
        adj: dict[int, array] = {loss.idx: array("d", [1.0])}
        for idx in range(loss.idx, -1, -1):
            a = adj.get(idx)
            if a is None:
                continue
            vjp = self.nodes[idx].vjp
            if vjp is None:
                continue
            for pid, buf in vjp(a):
                existing = adj.get(pid)
                if existing is None:
                    adj[pid] = buf
                else:
                    K.ew_acc(existing, buf)
        return {
            idx: Tensor(self.nodes[idx].value.shape, buf)
            for idx, buf in adj.items()
        }


def _tape_of(*vs: Var) -> Tape:
    t = vs[0].tape
    for v in vs[1:]:
        if v.tape is not t:
            raise ContractError("operands belong to different tapes")
    return t


# -- elementwise -------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    tape = _tape_of(a, b)
    out = K.ew_add(a.value.data, b.value.data)

    def vjp(adj):
        return [(a.idx, array("d", adj)), (b.idx, array("d", adj))]

    return tape._emit(Tensor(a.shape, out), vjp)


def sub(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    tape = _tape_of(a, b)
    out = K.ew_sub(a.value.data, b.value.data)

    def vjp(adj):
        return [(a.idx, array("d", adj)), (b.idx, K.ew_scale(adj, -1.0))]

    return tape._emit(Tensor(a.shape, out), vjp)


def mul(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    tape = _tape_of(a, b)
    out = K.ew_mul(a.value.data, b.value.data)
    av, bv = a.value.data, b.value.data

    def vjp(adj):
        return [(a.idx, K.ew_mul(adj, bv)), (b.idx, K.ew_mul(adj, av))]

    return tape._emit(Tensor(a.shape, out), vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    out = K.ew_scale(a.value.data, c)

    def vjp(adj):
        return [(a.idx, K.ew_scale(adj, c))]

    return a.tape._emit(Tensor(a.shape, out), vjp)


def scale_by(a: Var, s: Var) -> Var:
    """Multiply tensor a by a scalar variable s (shape (1,))."""
    if s.shape != (1,):
        raise ShapeError(f"scale_by: scalar var must have shape (1,), got {s.shape}")
    tape = _tape_of(a, s)
    sv = s.value.data[0]
    out = K.ew_scale(a.value.data, sv)
    av = a.value.data

    def vjp(adj):
        return [(a.idx, K.ew_scale(adj, sv)),
                (s.idx, array("d", [K.dot(adj, av)]))]

    return tape._emit(Tensor(a.shape, out), vjp)


def select_scalar(a: Var, flat_index: int) -> Var:
    """Extract one element as a scalar variable; gradient scatters back."""
    n = a.value.size
    if not 0 <= flat_index < n:
        raise ShapeError(f"select_scalar: index {flat_index} out of {n}")

    def vjp(adj):
        buf = K.zeros_buf(n)
        buf[flat_index] = adj[0]
        return [(a.idx, buf)]

    return a.tape._emit(Tensor.scalar(a.value.data[flat_index]), vjp)


def silu(a: Var) -> Var:
    out = K.silu_fwd(a.value.data)
    av = a.value.data

    def vjp(adj):
        return [(a.idx, K.silu_bwd(av, adj))]

    return a.tape._emit(Tensor(a.shape, out), vjp)


def sum_all(a: Var) -> Var:
    n = a.value.size

    def vjp(adj):
        buf = K.zeros_buf(n)
        g = adj[0]
        for i in range(n):
            buf[i] = g
        return [(a.idx, buf)]

    return a.tape._emit(Tensor.scalar(K.sum_all(a.value.data)), vjp)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Var, shape: Sequence[int]) -> Var:
    val = a.value.reshape(*shape)

    def vjp(adj):
        return [(a.idx, array("d", adj))]

    return a.tape._emit(val, vjp)


def transpose(a: Var) -> Var:
    val = a.value.transpose()
    m, n = a.value.shape

    def vjp(adj):
        buf = K.zeros_buf(m * n)
        for i in range(n):
            for j in range(m):
                buf[j * n + i] = adj[i * m + j]
        return [(a.idx, buf)]

    return a.tape._emit(val, vjp)


def slice_cols(a: Var, start: int, stop: int) -> Var:
    m, n = a.value.shape
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_cols: [{start},{stop}) out of {n}")
    w = stop - start
    buf = K.zeros_buf(m * w)
    src = a.value.data
    for i in range(m):
        buf[i * w:(i + 1) * w] = src[i * n + start:i * n + stop]

    def vjp(adj):
        full = K.zeros_buf(m * n)
        for i in range(m):
            full[i * n + start:i * n + stop] = adj[i * w:(i + 1) * w]
        return [(a.idx, full)]

    return a.tape._emit(Tensor((m, w), buf), vjp)


def slice_rows(a: Var, start: int, stop: int) -> Var:
    m, n = a.value.shape
    if not 0 <= start < stop <= m:
        raise ShapeError(f"slice_rows: [{start},{stop}) out of {m}")
    r = stop - start
    buf = array("d", a.value.data[start * n:stop * n])

    def vjp(adj):
        full = K.zeros_buf(m * n)
        full[start * n:stop * n] = adj
        return [(a.idx, full)]

    return a.tape._emit(Tensor((r, n), buf), vjp)


def concat_cols(a: Var, b: Var) -> Var:
    m, na = a.value.shape
    m2, nb = b.value.shape
    if m != m2:
        raise ShapeError(f"concat_cols: {m} vs {m2} rows")
    n = na + nb
    buf = K.zeros_buf(m * n)
    for i in range(m):
        buf[i * n:i * n + na] = a.value.data[i * na:(i + 1) * na]
        buf[i * n + na:(i + 1) * n] = b.value.data[i * nb:(i + 1) * nb]
    tape = _tape_of(a, b)

    def vjp(adj):
        da = K.zeros_buf(m * na)
        db = K.zeros_buf(m * nb)
        for i in range(m):
            da[i * na:(i + 1) * na] = adj[i * n:i * n + na]
            db[i * nb:(i + 1) * nb] = adj[i * n + na:(i + 1) * n]
        return [(a.idx, da), (b.idx, db)]

    return tape._emit(Tensor((m, n), buf), vjp)


def head_select(t: Var, i: int) -> Var:
    n, h, d = t.value.shape
    if not 0 <= i < h:
        raise ShapeError(f"head_select: head {i} out of {h}")
    buf = K.zeros_buf(n * d)
    src = t.value.data
    for pos in range(n):
        s = (pos * h + i) * d
        buf[pos * d:(pos + 1) * d] = src[s:s + d]

    def vjp(adj):
        full = K.zeros_buf(n * h * d)
        for pos in range(n):
            s = (pos * h + i) * d
            full[s:s + d] = adj[pos * d:(pos + 1) * d]
        return [(t.idx, full)]

    return t.tape._emit(Tensor((n, d), buf), vjp)


def stack_heads(mats: Sequence[Var]) -> Var:
    h = len(mats)
    if h == 0:
        raise ShapeError("stack_heads: empty list")
    tape = _tape_of(*mats)
    n, d = mats[0].value.shape
    buf = K.zeros_buf(n * h * d)
    for i, m in enumerate(mats):
        if m.value.shape != (n, d):
            raise ShapeError(f"stack_heads: head {i} shape {m.value.shape}")
        src = m.value.data
        for pos in range(n):
            dst = (pos * h + i) * d
            buf[dst:dst + d] = src[pos * d:(pos + 1) * d]

    def vjp(adj):
        outs = []
        for i, m in enumerate(mats):
            g = K.zeros_buf(n * d)
            for pos in range(n):
                s = (pos * h + i) * d
                g[pos * d:(pos + 1) * d] = adj[s:s + d]
            outs.append((m.idx, g))
        return outs

    return tape._emit(Tensor((n, h, d), buf), vjp)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    m, k = a.value.shape
    k2, n = b.value.shape
    if k != k2:
        raise ShapeError(f"matmul: inner dims {k} vs {k2}")
    tape = _tape_of(a, b)
    out = K.mm_nn(a.value.data, b.value.data, m, k, n)
    av, bv = a.value.data, b.value.data

    def vjp(adj):
        return [(a.idx, K.mm_nt(adj, bv, m, n, k)),
                (b.idx, K.mm_tn(av, adj, k, m, n))]

    return tape._emit(Tensor((m, n), out), vjp)


def matmul_nt(a: Var, b: Var) -> Var:
    """a @ b.T with b stored n x k."""
    m, k = a.value.shape
    n, k2 = b.value.shape
    if k != k2:
        raise ShapeError(f"matmul_nt: inner dims {k} vs {k2}")
    tape = _tape_of(a, b)
    out = K.mm_nt(a.value.data, b.value.data, m, k, n)
    av, bv = a.value.data, b.value.data

    def vjp(adj):
        return [(a.idx, K.mm_nn(adj, bv, m, n, k)),
                (b.idx, K.mm_tn(adj, av, n, m, k))]

    return tape._emit(Tensor((m, n), out), vjp)


def softmax_rows(a: Var, causal: bool = False) -> Var:
    m, n = a.value.shape
    out = K.softmax_fwd(a.value.data, m, n, 1 if causal else 0)

    def vjp(adj):
        return [(a.idx, K.softmax_bwd(out, adj, m, n))]

    return a.tape._emit(Tensor((m, n), out), vjp)


def rms_norm(x: Var, gain: Var, eps: float) -> Var:
    m, d = x.value.shape
    if gain.value.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.value.shape}, want ({d},)")
    tape = _tape_of(x, gain)
    out, inv = K.rms_fwd(x.value.data, gain.value.data, m, d, float(eps))
    xv, gv = x.value.data, gain.value.data

    def vjp(adj):
        dx, dgain = K.rms_bwd(xv, gv, inv, adj, m, d)
        return [(x.idx, dx), (gain.idx, dgain)]

    return tape._emit(Tensor((m, d), out), vjp)


def rope(x: Var, base: float) -> Var:
    """Rotary position encoding on an N x h x d tensor (see attention.rope)."""
    n, h, d = x.value.shape
    if d % 2 != 0:
        raise ShapeError(f"rope: per-head dim {d} must be even")
    freqs = _rope_freqs(d, base)
    out = K.rope_apply(x.value.data, freqs, n, h, d, 1.0)

    def vjp(adj):
        return [(x.idx, K.rope_apply(adj, freqs, n, h, d, -1.0))]

    return x.tape._emit(Tensor((n, h, d), out), vjp)


def _rope_freqs(d: int, base: float) -> array:
    return array("d", (base ** (-2.0 * j / d) for j in range(d // 2)))


def head_mix(t: Var, w: Var) -> Var:
    n, hp, d = t.value.shape
    hp2, h = w.value.shape
    if hp != hp2:
        raise ShapeError(f"head_mix: {hp} component heads vs w rows {hp2}")
    tape = _tape_of(t, w)
    out = K.head_mix_fwd(t.value.data, w.value.data, n, hp, h, d)
    tv = t.value.data
    wt = K.zeros_buf(h * hp)
    for i in range(hp):
        for j in range(h):
            wt[j * hp + i] = w.value.data[i * h + j]

    def vjp(adj):
        return [(t.idx, K.head_mix_fwd(adj, wt, n, h, hp, d)),
                (w.idx, K.head_mix_gw(tv, adj, n, hp, h, d))]

    return tape._emit(Tensor((n, h, d), out), vjp)


def embed(table: Var, ids: Sequence[int]) -> Var:
    vocab, d = table.value.shape
    ids = list(ids)
    for t in ids:
        if not 0 <= t < vocab:
            raise ShapeError(f"embed: token {t} out of vocab {vocab}")
    out = K.gather_rows(table.value.data, ids, d)

    def vjp(adj):
        g = K.zeros_buf(vocab * d)
        K.scatter_add_rows(g, ids, adj, d)
        return [(table.idx, g)]

    return table.tape._emit(Tensor((len(ids), d), out), vjp)


# -- losses -------------------------------------------------------------------


def mse(a: Var, target: Tensor) -> Var:
    """Mean squared error against a constant target."""
    if a.shape != target.shape:
        raise ShapeError(f"mse: {a.shape} vs {target.shape}")
    n = a.value.size
    diff = K.ew_sub(a.value.data, target.data)
    val = K.sumsq(diff) / n

    def vjp(adj):
        return [(a.idx, K.ew_scale(diff, 2.0 * adj[0] / n))]

    return a.tape._emit(Tensor.scalar(val), vjp)


def cross_entropy(logits: Var, targets: Sequence[int]) -> Var:
    """Mean next-token negative log-likelihood over rows of logits."""
    m, n = logits.value.shape
    targets = list(targets)
    if len(targets) != m:
        raise ShapeError(f"cross_entropy: {len(targets)} targets for {m} rows")
    for t in targets:
        if not 0 <= t < n:
            raise ShapeError(f"cross_entropy: target {t} out of {n} classes")
    loss, probs = K.cross_entropy_fwd(logits.value.data, targets, m, n)

    def vjp(adj):
        g = K.ew_scale(probs, adj[0] / m)
        c = adj[0] / m
        for r, t in enumerate(targets):
            g[r * n + t] -= c
        return [(logits.idx, g)]

    return logits.tape._emit(Tensor.scalar(loss), vjp)


# -- gradient checking --------------------------------------------------------


def grad_check(f, params: list[Tensor], step: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference
    gradients of a scalar program.

    f receives a list of Vars (one per param, on a fresh tape) and must
    return a scalar Var. Relative error is |analytic - numeric| /
    (|numeric| + 1e-12), maximized over every parameter component.
    """
    if step <= 0.0:
        raise ContractError("grad_check: step must be positive")

    def run() -> tuple[Tape, list[Var], Var]:
        tape = Tape()
        vs = [tape.leaf(p) for p in params]
        out = f(vs)
        return tape, vs, out

    tape, vs, loss = run()
    grads = tape.backward(loss)
    worst = 0.0
    for p, v in zip(params, vs):
        g = grads.get(v.idx)
        gbuf = g.data if g is not None else K.zeros_buf(p.size)
        for comp in range(p.size):
            orig = p.data[comp]
            p.data[comp] = orig + step
            fp = run()[2].value.item()
            p.data[comp] = orig - step
            fm = run()[2].value.item()
            p.data[comp] = orig
            numeric = (fp - fm) / (2.0 * step)
            rel = abs(gbuf[comp] - numeric) / (abs(numeric) + 1e-12)
            if rel > worst:
                worst = rel
    return worst
