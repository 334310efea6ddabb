"""Hot inner loops: the transducer lattice recursion and edit distance.

Each kernel exists twice, a numba ``@njit`` version and a pure-numpy one.
The numba path is used when numba imports and ``CMM_NUMBA`` is not ``0``;
``CMM_NUMBA=0`` forces the numpy path (handy for debugging and for the
benchmark in ``benchmarks/bench_kernels.py``).

Lattice convention (shared by every function here): node (t, u) means
"frame t is being read, u labels emitted". ``blank[t, u]`` advances t,
``emit[t, u]`` emits label u+1 and advances u. The path ends with the blank
taken at (T-1, U).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CMM_NUMBA", "1") != "0"

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def lattice_np(blank: np.ndarray, emit: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Forward/backward log-variables, vectorised along anti-diagonals."""
    T, U1 = blank.shape
    alpha = np.full((T, U1), NEG_INF)
    beta = np.full((T, U1), NEG_INF)
    alpha[0, 0] = 0.0
    for n in range(1, T + U1 - 1):
        t = np.arange(max(0, n - U1 + 1), min(T - 1, n) + 1)
        u = n - t
        from_t = np.full(t.size, NEG_INF)
        ok = t > 0
        from_t[ok] = alpha[t[ok] - 1, u[ok]] + blank[t[ok] - 1, u[ok]]
        from_u = np.full(t.size, NEG_INF)
        ok = u > 0
        from_u[ok] = alpha[t[ok], u[ok] - 1] + emit[t[ok], u[ok] - 1]
        alpha[t, u] = np.logaddexp(from_t, from_u)
    beta[T - 1, U1 - 1] = blank[T - 1, U1 - 1]
    for n in range(T + U1 - 3, -1, -1):
        t = np.arange(max(0, n - U1 + 1), min(T - 1, n) + 1)
        u = n - t
        to_t = np.full(t.size, NEG_INF)
        ok = t < T - 1
        to_t[ok] = blank[t[ok], u[ok]] + beta[t[ok] + 1, u[ok]]
        to_u = np.full(t.size, NEG_INF)
        ok = u < U1 - 1
        to_u[ok] = emit[t[ok], u[ok]] + beta[t[ok], u[ok] + 1]
        beta[t, u] = np.logaddexp(to_t, to_u)
    return alpha, beta, float(beta[0, 0])


def lattice_grads_np(alpha, beta, blank, emit, loglik):
    """d(-loglik)/d blank and d(-loglik)/d emit."""
    T, U1 = blank.shape
    nxt = np.full((T, U1), NEG_INF)
    nxt[:-1] = beta[1:]
    nxt[T - 1, U1 - 1] = 0.0
    dblank = -np.exp(alpha + blank + nxt - loglik)
    demit = -np.exp(alpha[:, :-1] + emit + beta[:, 1:] - loglik)
    return dblank, demit


def transducer_batch_np(logp, row_off, Ts, Us, targets, tgt_off, blank_id):
    losses = np.zeros(len(Ts))
    grad = np.zeros_like(logp)
    for b in range(len(Ts)):
        T, U = int(Ts[b]), int(Us[b])
        rows = logp[row_off[b] : row_off[b] + T * (U + 1)].reshape(T, U + 1, -1)
        y = targets[tgt_off[b] : tgt_off[b] + U]
        blank = rows[:, :, blank_id]
        emit = rows[:, np.arange(U), y] if U else np.zeros((T, 0))
        alpha, beta, ll = lattice_np(blank, emit)
        losses[b] = -ll
        dblank, demit = lattice_grads_np(alpha, beta, blank, emit, ll)
        g = grad[row_off[b] : row_off[b] + T * (U + 1)].reshape(T, U + 1, -1)
        g[:, :, blank_id] = dblank
        if U:
            g[:, np.arange(U), y] += demit
    return losses, grad


def edit_distance_np(a: np.ndarray, b: np.ndarray) -> int:
    """Levenshtein distance with unit costs; one row of the DP table at a time."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return n + m
    prev = np.arange(m + 1)
    for i in range(1, n + 1):
        sub = prev[:-1] + (b != a[i - 1])
        cur = np.empty(m + 1, dtype=prev.dtype)
        cur[0] = i
        # insertion chain along the row needs a scan: cur[j] = min(best[j], cur[j-1] + 1)
        best = np.minimum(sub, prev[1:] + 1)
        cur[1:] = best
        cur = np.minimum.accumulate(cur - np.arange(m + 1)) + np.arange(m + 1)
        prev = cur
    return int(prev[m])


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _lae(a, b):
        if a == NEG_INF:
            return b
        if b == NEG_INF:
            return a
        if a > b:
            return a + np.log1p(np.exp(b - a))
        return b + np.log1p(np.exp(a - b))

    @njit(cache=True)
    def lattice_nb(blank, emit):
        T, U1 = blank.shape
        alpha = np.full((T, U1), NEG_INF)
        beta = np.full((T, U1), NEG_INF)
        alpha[0, 0] = 0.0
        for t in range(T):
            for u in range(U1):
                if t == 0 and u == 0:
                    continue
                a = NEG_INF
                if t > 0:
                    a = alpha[t - 1, u] + blank[t - 1, u]
                if u > 0:
                    a = _lae(a, alpha[t, u - 1] + emit[t, u - 1])
                alpha[t, u] = a
        for t in range(T - 1, -1, -1):
            for u in range(U1 - 1, -1, -1):
                if t == T - 1 and u == U1 - 1:
                    beta[t, u] = blank[t, u]
                    continue
                b = NEG_INF
                if t < T - 1:
                    b = blank[t, u] + beta[t + 1, u]
                if u < U1 - 1:
                    b = _lae(b, emit[t, u] + beta[t, u + 1])
                beta[t, u] = b
        return alpha, beta, beta[0, 0]

    @njit(cache=True)
    def transducer_batch_nb(logp, row_off, Ts, Us, targets, tgt_off, blank_id):
        B = Ts.shape[0]
        losses = np.zeros(B)
        grad = np.zeros_like(logp)
        for b in range(B):
            T = Ts[b]
            U = Us[b]
            r0 = row_off[b]
            y0 = tgt_off[b]
            blank = np.empty((T, U + 1))
            emit = np.empty((T, U))
            for t in range(T):
                for u in range(U + 1):
                    blank[t, u] = logp[r0 + t * (U + 1) + u, blank_id]
                    if u < U:
                        emit[t, u] = logp[r0 + t * (U + 1) + u, targets[y0 + u]]
            alpha, beta, ll = lattice_nb(blank, emit)
            losses[b] = -ll
            for t in range(T):
                for u in range(U + 1):
                    r = r0 + t * (U + 1) + u
                    if t < T - 1:
                        nxt = beta[t + 1, u]
                    elif u == U:
                        nxt = 0.0
                    else:
                        nxt = NEG_INF
                    grad[r, blank_id] = -np.exp(alpha[t, u] + blank[t, u] + nxt - ll)
                    if u < U:
                        grad[r, targets[y0 + u]] -= np.exp(alpha[t, u] + emit[t, u] + beta[t, u + 1] - ll)
        return losses, grad

    @njit(cache=True)
    def edit_distance_nb(a, b):
        n = a.shape[0]
        m = b.shape[0]
        prev = np.arange(m + 1)
        cur = np.empty(m + 1, dtype=prev.dtype)
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                c = prev[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
                if prev[j] + 1 < c:
                    c = prev[j] + 1
                if cur[j - 1] + 1 < c:
                    c = cur[j - 1] + 1
                cur[j] = c
            prev, cur = cur, prev
        return prev[m]


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def lattice(blank: np.ndarray, emit: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    blank = np.ascontiguousarray(blank, dtype=np.float64)
    emit = np.ascontiguousarray(emit, dtype=np.float64).reshape(blank.shape[0], blank.shape[1] - 1)
    if USE_NUMBA:
        alpha, beta, ll = lattice_nb(blank, emit)
        return alpha, beta, float(ll)
    return lattice_np(blank, emit)


def transducer_batch(logp, row_off, Ts, Us, targets, tgt_off, blank_id):
    """Per-utterance NLL and its gradient for a flat, t-major packed lattice batch."""
    args = (
        np.ascontiguousarray(logp, dtype=np.float64),
        np.asarray(row_off, dtype=np.int64),
        np.asarray(Ts, dtype=np.int64),
        np.asarray(Us, dtype=np.int64),
        np.asarray(targets, dtype=np.int64),
        np.asarray(tgt_off, dtype=np.int64),
        int(blank_id),
    )
    if USE_NUMBA:
        return transducer_batch_nb(*args)
    return transducer_batch_np(*args)


def edit_distance(a, b) -> int:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if USE_NUMBA:
        return int(edit_distance_nb(a, b))
    return edit_distance_np(a, b)
