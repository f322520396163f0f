"""Row-wise numeric kernels used by the autodiff ops.

Two interchangeable implementations live here: numba ``@njit`` loops and a
plain numpy path. All kernels operate on C-contiguous float64 2-D arrays of
shape ``(rows, V)``. The active path is chosen once at import time:

    REVKD_NUMBA=0   force the numpy fallback
    REVKD_NUMBA=1   require numba (import error if missing)
    unset           numba when importable, numpy otherwise

``numpy_impl`` and ``numba_impl`` are exposed so tests and the benchmark can
compare both paths directly.
"""

from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

# log(1e-12): floor applied to log-probabilities inside the KL terms.
LOG_CLAMP = math.log(1e-12)


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _np_log_softmax_rows(x, inv_t):
    z = x * inv_t
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _np_softmax_rows(x, inv_t):
    z = x * inv_t
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_reverse_kl_rows(zs, zt, inv_t):
    logq = _np_log_softmax_rows(zs, inv_t)
    logp = _np_log_softmax_rows(zt, inv_t)
    q = np.exp(logq)
    unclamped = logq > LOG_CLAMP
    d = np.maximum(logq, LOG_CLAMP) - np.maximum(logp, LOG_CLAMP)
    kl = (q * d).sum(axis=1)
    qu = (q * unclamped).sum(axis=1)
    grad = q * (d - kl[:, None]) + q * (unclamped - qu[:, None])
    return kl, grad * inv_t


def _np_forward_kl_rows(zs, zt, inv_t):
    logq = _np_log_softmax_rows(zs, inv_t)
    logp = _np_log_softmax_rows(zt, inv_t)
    q = np.exp(logq)
    p = np.exp(logp)
    unclamped = logq > LOG_CLAMP
    kl = (p * (np.maximum(logp, LOG_CLAMP) - np.maximum(logq, LOG_CLAMP))).sum(axis=1)
    pu = (p * unclamped).sum(axis=1)
    grad = q * pu[:, None] - p * unclamped
    return kl, grad * inv_t


def _np_embedding_backward(ids, grad, n_rows):
    out = np.zeros((n_rows, grad.shape[1]))
    np.add.at(out, ids, grad)
    return out


numpy_impl = SimpleNamespace(
    name="numpy",
    log_softmax_rows=_np_log_softmax_rows,
    softmax_rows=_np_softmax_rows,
    reverse_kl_rows=_np_reverse_kl_rows,
    forward_kl_rows=_np_forward_kl_rows,
    embedding_backward=_np_embedding_backward,
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

def _build_numba_impl():
    from numba import njit

    @njit(cache=True)
    def _row_log_softmax(x, inv_t, out):
        v = x.shape[0]
        m = -np.inf
        for j in range(v):
            z = x[j] * inv_t
            out[j] = z
            if z > m:
                m = z
        s = 0.0
        for j in range(v):
            out[j] -= m
            s += math.exp(out[j])
        ls = math.log(s)
        for j in range(v):
            out[j] -= ls

    @njit(cache=True)
    def log_softmax_rows(x, inv_t):
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            _row_log_softmax(x[i], inv_t, out[i])
        return out

    @njit(cache=True)
    def softmax_rows(x, inv_t):
        out = np.empty_like(x)
        v = x.shape[1]
        for i in range(x.shape[0]):
            m = -np.inf
            for j in range(v):
                z = x[i, j] * inv_t
                out[i, j] = z
                if z > m:
                    m = z
            s = 0.0
            for j in range(v):
                e = math.exp(out[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(v):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def reverse_kl_rows(zs, zt, inv_t):
        n, v = zs.shape
        kl = np.empty(n)
        grad = np.empty_like(zs)
        logq = np.empty(v)
        logp = np.empty(v)
        for i in range(n):
            _row_log_softmax(zs[i], inv_t, logq)
            _row_log_softmax(zt[i], inv_t, logp)
            acc = 0.0
            qu = 0.0
            for j in range(v):
                q = math.exp(logq[j])
                d = max(logq[j], LOG_CLAMP) - max(logp[j], LOG_CLAMP)
                acc += q * d
                if logq[j] > LOG_CLAMP:
                    qu += q
                grad[i, j] = d
            kl[i] = acc
            for j in range(v):
                q = math.exp(logq[j])
                u = 1.0 if logq[j] > LOG_CLAMP else 0.0
                grad[i, j] = (q * (grad[i, j] - acc) + q * (u - qu)) * inv_t
        return kl, grad

    @njit(cache=True)
    def forward_kl_rows(zs, zt, inv_t):
        n, v = zs.shape
        kl = np.empty(n)
        grad = np.empty_like(zs)
        logq = np.empty(v)
        logp = np.empty(v)
        for i in range(n):
            _row_log_softmax(zs[i], inv_t, logq)
            _row_log_softmax(zt[i], inv_t, logp)
            acc = 0.0
            pu = 0.0
            for j in range(v):
                p = math.exp(logp[j])
                acc += p * (max(logp[j], LOG_CLAMP) - max(logq[j], LOG_CLAMP))
                if logq[j] > LOG_CLAMP:
                    pu += p
            kl[i] = acc
            for j in range(v):
                p = math.exp(logp[j])
                u = 1.0 if logq[j] > LOG_CLAMP else 0.0
                grad[i, j] = (math.exp(logq[j]) * pu - p * u) * inv_t
        return kl, grad

    @njit(cache=True)
    def embedding_backward(ids, grad, n_rows):
        out = np.zeros((n_rows, grad.shape[1]))
        for i in range(ids.shape[0]):
            r = ids[i]
            for j in range(grad.shape[1]):
                out[r, j] += grad[i, j]
        return out

    return SimpleNamespace(
        name="numba",
        log_softmax_rows=log_softmax_rows,
        softmax_rows=softmax_rows,
        reverse_kl_rows=reverse_kl_rows,
        forward_kl_rows=forward_kl_rows,
        embedding_backward=embedding_backward,
    )


try:
    numba_impl = _build_numba_impl()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_impl = None


def _select():
    flag = os.environ.get("REVKD_NUMBA", "").strip()
    if flag == "0":
        return numpy_impl
    if flag == "1" and numba_impl is None:
        raise ImportError("REVKD_NUMBA=1 but numba is not importable")
    return numba_impl if numba_impl is not None else numpy_impl


active = _select()


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]), dtype=np.float64)


def log_softmax(x: np.ndarray, inv_t: float = 1.0) -> np.ndarray:
    return active.log_softmax_rows(_rows(x), float(inv_t)).reshape(x.shape)


def softmax(x: np.ndarray, inv_t: float = 1.0) -> np.ndarray:
    return active.softmax_rows(_rows(x), float(inv_t)).reshape(x.shape)


def kl_rows(zs: np.ndarray, zt: np.ndarray, inv_t: float, reverse: bool):
    """Per-row KL and its gradient w.r.t. ``zs`` (already scaled by ``inv_t``)."""
    fn = active.reverse_kl_rows if reverse else active.forward_kl_rows
    kl, grad = fn(_rows(zs), _rows(zt), float(inv_t))
    return kl.reshape(zs.shape[:-1]), grad.reshape(zs.shape)


def embedding_backward(ids: np.ndarray, grad: np.ndarray, n_rows: int) -> np.ndarray:
    flat_ids = np.ascontiguousarray(ids.reshape(-1), dtype=np.int64)
    return active.embedding_backward(flat_ids, _rows(grad), int(n_rows))
