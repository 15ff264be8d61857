"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Both paths implement the same piecewise formulas; which one runs is
fixed for a whole process (numba when importable, unless the
``VOXREND_NO_NUMBA`` environment variable is set), so results are
reproducible run to run.  The numba kernels accumulate in the same
left-to-right order as the reference expressions.
"""

from __future__ import annotations

import os

import numpy as np

_BAND = 40.0  # beta*|x| beyond which the softplus correction is < 1 ulp

try:
    if os.environ.get("VOXREND_NO_NUMBA"):
        raise ImportError("numba disabled by VOXREND_NO_NUMBA")
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via env flag
    HAVE_NUMBA = False


def _softplus_value_np(x: np.ndarray, beta: float) -> np.ndarray:
    out = np.maximum(x, 0.0)
    band = np.abs(x) * beta < _BAND
    xb = x[band]
    out[band] += np.log1p(np.exp(-beta * np.abs(xb))) / beta
    return out


def _softplus_sigma_np(x: np.ndarray, beta: float) -> np.ndarray:
    out = (x > 0).astype(np.float64)
    band = np.abs(x) * beta < _BAND
    xb = beta * x[band]
    out[band] = np.where(
        xb >= 0, 1.0 / (1.0 + np.exp(-xb)), np.exp(xb) / (1.0 + np.exp(xb))
    )
    return out


def _gather_weighted_np(data: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    out = np.zeros((idx.shape[0], data.shape[1]))
    for k in range(idx.shape[1]):
        out += w[:, k, None] * data[idx[:, k]]
    return out


def _scatter_weighted_np(g: np.ndarray, idx: np.ndarray, w: np.ndarray, cells: int) -> np.ndarray:
    ch = g.shape[1]
    out = np.zeros((cells, ch))
    flat = idx.ravel()
    for c in range(ch):
        out[:, c] = np.bincount(flat, weights=(w * g[:, c, None]).ravel(), minlength=cells)
    return out


if HAVE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _softplus_value_nb(x, beta):  # pragma: no cover - jitted
        out = np.empty_like(x)
        for i in range(x.size):
            v = x.flat[i]
            r = v if v > 0.0 else 0.0
            a = v if v >= 0.0 else -v
            if a * beta < _BAND:
                r += np.log1p(np.exp(-beta * a)) / beta
            out.flat[i] = r
        return out

    @njit(cache=True)
    def _softplus_sigma_nb(x, beta):  # pragma: no cover - jitted
        out = np.empty_like(x)
        for i in range(x.size):
            v = beta * x.flat[i]
            if v >= _BAND:
                out.flat[i] = 1.0
            elif v <= -_BAND:
                out.flat[i] = 0.0
            elif v >= 0.0:
                out.flat[i] = 1.0 / (1.0 + np.exp(-v))
            else:
                e = np.exp(v)
                out.flat[i] = e / (1.0 + e)
        return out

    @njit(cache=True)
    def _gather_weighted_nb(data, idx, w):  # pragma: no cover - jitted
        n, k = idx.shape
        ch = data.shape[1]
        out = np.zeros((n, ch))
        for i in range(n):
            for j in range(k):
                row = idx[i, j]
                wij = w[i, j]
                for c in range(ch):
                    out[i, c] += wij * data[row, c]
        return out

    @njit(cache=True)
    def _scatter_weighted_nb(g, idx, w, cells):  # pragma: no cover - jitted
        n, k = idx.shape
        ch = g.shape[1]
        out = np.zeros((cells, ch))
        for i in range(n):
            for j in range(k):
                row = idx[i, j]
                wij = w[i, j]
                for c in range(ch):
                    out[row, c] += wij * g[i, c]
        return out


def softplus_value(x: np.ndarray, beta: float) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA:
        return _softplus_value_nb(x, beta)
    return _softplus_value_np(x, beta)


def softplus_sigma(x: np.ndarray, beta: float) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if HAVE_NUMBA:
        return _softplus_sigma_nb(x, beta)
    return _softplus_sigma_np(x, beta)


def gather_weighted(data: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    data = np.ascontiguousarray(data, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if HAVE_NUMBA:
        return _gather_weighted_nb(data, idx, w)
    return _gather_weighted_np(data, idx, w)


def scatter_weighted(g: np.ndarray, idx: np.ndarray, w: np.ndarray, cells: int) -> np.ndarray:
    g = np.ascontiguousarray(g, dtype=np.float64)
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if HAVE_NUMBA:
        return _scatter_weighted_nb(g, idx, w, cells)
    return _scatter_weighted_np(g, idx, w, cells)
