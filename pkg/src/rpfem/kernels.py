"""Hot numeric kernels, each with a numba @njit and a pure-numpy implementation.

Two kernel families live here:

* pair-attention streaming: softmax attention of N*N proposal-pair queries
  against C*C class-pair keys, aggregating class-pair values.  The full
  attention matrix is never materialized beyond a row block, so memory stays
  O(block * C^2) regardless of proposal count.  Forward and backward are
  separate kernels; backward recomputes the attention rows it needs.
* per-image geometry statistics: ordered instance-pair orientation
  indicators, pair counts, and normalized center distances feeding the
  relational priors.

``RPFEM_BACKEND`` selects the implementation (see backend.py).  Both
implementations of each kernel agree to float64 reassociation error; the
integer-valued accumulators agree bitwise.
"""
from __future__ import annotations

import numpy as np

from .backend import active_backend, numba_available

_BLOCK = 1024

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # fall back to the numpy implementations only
    HAS_NUMBA = False


# ---------------------------------------------------------------------------
# pair attention, numpy


def _attn_forward_numpy(q, kk, v, scl):
    n = q.shape[0]
    u = np.empty((n, v.shape[1]))
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        t = (q[lo:hi] @ kk.T) * scl
        t -= t.max(axis=1, keepdims=True)
        np.exp(t, out=t)
        t /= t.sum(axis=1, keepdims=True)
        u[lo:hi] = t @ v
    return u


def _attn_backward_numpy(q, kk, v, du, scl):
    dq = np.empty_like(q)
    dkk = np.zeros_like(kk)
    dv = np.zeros_like(v)
    n = q.shape[0]
    for lo in range(0, n, _BLOCK):
        hi = min(lo + _BLOCK, n)
        t = (q[lo:hi] @ kk.T) * scl
        t -= t.max(axis=1, keepdims=True)
        np.exp(t, out=t)
        t /= t.sum(axis=1, keepdims=True)
        dv += t.T @ du[lo:hi]
        da = du[lo:hi] @ v.T
        ds = (da - (da * t).sum(axis=1, keepdims=True)) * t * scl
        dq[lo:hi] = ds @ kk
        dkk += ds.T @ q[lo:hi]
    return dq, dkk, dv


# ---------------------------------------------------------------------------
# pair attention, numba

if HAS_NUMBA:

    @njit(cache=True)
    def _attn_forward_numba(q, kk, v, scl):
        n, da = q.shape
        m, dv = v.shape
        u = np.zeros((n, dv))
        logits = np.empty(m)
        for r in range(n):
            mx = -1e300
            for c in range(m):
                acc = 0.0
                for t in range(da):
                    acc += q[r, t] * kk[c, t]
                acc *= scl
                logits[c] = acc
                if acc > mx:
                    mx = acc
            z = 0.0
            for c in range(m):
                e = np.exp(logits[c] - mx)
                logits[c] = e
                z += e
            inv = 1.0 / z
            for c in range(m):
                a = logits[c] * inv
                for t in range(dv):
                    u[r, t] += a * v[c, t]
        return u

    @njit(cache=True)
    def _attn_backward_numba(q, kk, v, du, scl):
        n, da = q.shape
        m, dv = v.shape
        dq = np.zeros((n, da))
        dkk = np.zeros((m, da))
        dvv = np.zeros((m, dv))
        alpha = np.empty(m)
        dalpha = np.empty(m)
        for r in range(n):
            mx = -1e300
            for c in range(m):
                acc = 0.0
                for t in range(da):
                    acc += q[r, t] * kk[c, t]
                acc *= scl
                alpha[c] = acc
                if acc > mx:
                    mx = acc
            z = 0.0
            for c in range(m):
                e = np.exp(alpha[c] - mx)
                alpha[c] = e
                z += e
            inv = 1.0 / z
            dot = 0.0
            for c in range(m):
                alpha[c] *= inv
                acc = 0.0
                for t in range(dv):
                    acc += du[r, t] * v[c, t]
                    dvv[c, t] += alpha[c] * du[r, t]
                dalpha[c] = acc
                dot += acc * alpha[c]
            for c in range(m):
                ds = (dalpha[c] - dot) * alpha[c] * scl
                for t in range(da):
                    dq[r, t] += ds * kk[c, t]
                    dkk[c, t] += ds * q[r, t]
        return dq, dkk, dvv


def attn_forward(q: np.ndarray, kk: np.ndarray, v: np.ndarray, scl: float) -> np.ndarray:
    if active_backend() == "numba":
        return _attn_forward_numba(q, kk, v, scl)
    return _attn_forward_numpy(q, kk, v, scl)


def attn_backward(q, kk, v, du, scl):
    if active_backend() == "numba":
        return _attn_backward_numba(q, kk, v, du, scl)
    return _attn_backward_numpy(q, kk, v, du, scl)


# ---------------------------------------------------------------------------
# per-image geometry pair statistics, numpy


def _pair_geometry_numpy(cls, cx, cy, bx, by, bw, bh, inv_diag, orient_acc, pair_cnt):
    n = cls.shape[0]
    if n < 2:
        empty = np.empty(0)
        return cls[:0], cls[:0], empty
    off = ~np.eye(n, dtype=bool)
    ii, jj = np.nonzero(off)
    a = cls[ii]
    b = cls[jj]
    np.add.at(pair_cnt, (a, b), 1.0)
    center_in = (
        (cx[ii] > bx[jj])
        & (cx[ii] < bx[jj] + bw[jj])
        & (cy[ii] > by[jj])
        & (cy[ii] < by[jj] + bh[jj])
    )
    ind = np.stack(
        [center_in, cx[ii] < cx[jj], cx[ii] > cx[jj], cy[ii] < cy[jj], cy[ii] > cy[jj]],
        axis=1,
    ).astype(np.float64)
    np.add.at(orient_acc, (a, b), ind)
    dx = cx[ii] - cx[jj]
    dy = cy[ii] - cy[jj]
    dist = np.sqrt(dx * dx + dy * dy) * inv_diag
    return a, b, dist


# ---------------------------------------------------------------------------
# per-image geometry pair statistics, numba

if HAS_NUMBA:

    @njit(cache=True)
    def _pair_geometry_numba(cls, cx, cy, bx, by, bw, bh, inv_diag, orient_acc, pair_cnt):
        n = cls.shape[0]
        total = n * (n - 1) if n >= 2 else 0
        pa = np.empty(total, dtype=np.int64)
        pb = np.empty(total, dtype=np.int64)
        dist = np.empty(total)
        k = 0
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                a = cls[i]
                b = cls[j]
                pair_cnt[a, b] += 1.0
                if (
                    cx[i] > bx[j]
                    and cx[i] < bx[j] + bw[j]
                    and cy[i] > by[j]
                    and cy[i] < by[j] + bh[j]
                ):
                    orient_acc[a, b, 0] += 1.0
                if cx[i] < cx[j]:
                    orient_acc[a, b, 1] += 1.0
                elif cx[i] > cx[j]:
                    orient_acc[a, b, 2] += 1.0
                if cy[i] < cy[j]:
                    orient_acc[a, b, 3] += 1.0
                elif cy[i] > cy[j]:
                    orient_acc[a, b, 4] += 1.0
                dx = cx[i] - cx[j]
                dy = cy[i] - cy[j]
                pa[k] = a
                pb[k] = b
                dist[k] = np.sqrt(dx * dx + dy * dy) * inv_diag
                k += 1
        return pa, pb, dist


def pair_geometry(cls, cx, cy, bx, by, bw, bh, inv_diag, orient_acc, pair_cnt):
    """Accumulate ordered-pair orientation indicators / counts in place and
    return (class_a, class_b, normalized_distance) arrays for the pairs."""
    if active_backend() == "numba":
        return _pair_geometry_numba(cls, cx, cy, bx, by, bw, bh, inv_diag, orient_acc, pair_cnt)
    return _pair_geometry_numpy(cls, cx, cy, bx, by, bw, bh, inv_diag, orient_acc, pair_cnt)


def warmup() -> None:
    """Trigger JIT compilation of the numba kernels on tiny inputs."""
    if not (numba_available() and active_backend() == "numba"):
        return
    q = np.ones((2, 3))
    kk = np.ones((4, 3))
    v = np.ones((4, 2))
    _attn_forward_numba(q, kk, v, 1.0)
    _attn_backward_numba(q, kk, v, np.ones((2, 2)), 1.0)
    cls = np.array([0, 1], dtype=np.int64)
    one = np.ones(2)
    _pair_geometry_numba(cls, one, one, one, one, one, one, 1.0, np.zeros((2, 2, 5)), np.zeros((2, 2)))
