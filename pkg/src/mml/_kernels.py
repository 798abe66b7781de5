"""Hot numeric kernels with optional numba acceleration.

The jitted loops are strictly serial, so results are deterministic and
bit-stable run to run; the numpy fallbacks compute the same quantities
(up to float summation order, which each implementation fixes on its own).
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional speedup
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def deco(fn):
            return fn

        return deco if not (args and callable(args[0])) else args[0]


@njit(cache=True)
def _bilinear_fwd_jit(F, i00, du, dv, width):
    s_count = i00.shape[0]
    c = F.shape[1]
    out = np.empty((s_count, c), dtype=F.dtype)
    for s in range(s_count):
        base = i00[s]
        a = du[s]
        b = dv[s]
        w00 = (1.0 - a) * (1.0 - b)
        w10 = a * (1.0 - b)
        w01 = (1.0 - a) * b
        w11 = a * b
        for j in range(c):
            out[s, j] = (
                F[base, j] * w00
                + F[base + 1, j] * w10
                + F[base + width, j] * w01
                + F[base + width + 1, j] * w11
            )
    return out


@njit(cache=True)
def _bilinear_bwd_jit(F, g, i00, du, dv, width, n_rows):
    s_count = i00.shape[0]
    c = F.shape[1]
    gF = np.zeros((n_rows, c), dtype=g.dtype)
    gu = np.empty((s_count, 1), dtype=g.dtype)
    gv = np.empty((s_count, 1), dtype=g.dtype)
    for s in range(s_count):
        base = i00[s]
        a = du[s]
        b = dv[s]
        w00 = (1.0 - a) * (1.0 - b)
        w10 = a * (1.0 - b)
        w01 = (1.0 - a) * b
        w11 = a * b
        su = 0.0
        sv = 0.0
        for j in range(c):
            gj = g[s, j]
            f00 = F[base, j]
            f10 = F[base + 1, j]
            f01 = F[base + width, j]
            f11 = F[base + width + 1, j]
            gF[base, j] += gj * w00
            gF[base + 1, j] += gj * w10
            gF[base + width, j] += gj * w01
            gF[base + width + 1, j] += gj * w11
            su += ((f10 - f00) * (1.0 - b) + (f11 - f01) * b) * gj
            sv += ((f01 - f00) * (1.0 - a) + (f11 - f10) * a) * gj
        gu[s, 0] = su
        gv[s, 0] = sv
    return gF, gu, gv


@njit(cache=True)
def _scatter_rows_jit(idx, rows, n_rows):
    s_count, c = rows.shape
    out = np.zeros((n_rows, c), dtype=rows.dtype)
    for s in range(s_count):
        t = idx[s]
        for j in range(c):
            out[t, j] += rows[s, j]
    return out


def bilinear_forward(F, i00, du, dv, width):
    if HAVE_NUMBA:
        return _bilinear_fwd_jit(F, i00, du, dv, width)
    nu = (1.0 - du)[:, None]
    nv = (1.0 - dv)[:, None]
    a = du[:, None]
    b = dv[:, None]
    return (
        F[i00] * (nu * nv)
        + F[i00 + 1] * (a * nv)
        + F[i00 + width] * (nu * b)
        + F[i00 + width + 1] * (a * b)
    )


def bilinear_backward(F, g, i00, du, dv, width):
    if HAVE_NUMBA:
        return _bilinear_bwd_jit(F, g, i00, du, dv, width, F.shape[0])
    nu = (1.0 - du)[:, None]
    nv = (1.0 - dv)[:, None]
    a = du[:, None]
    b = dv[:, None]
    f00, f10 = F[i00], F[i00 + 1]
    f01, f11 = F[i00 + width], F[i00 + width + 1]
    gF = scatter_rows(
        np.concatenate([i00, i00 + 1, i00 + width, i00 + width + 1]),
        np.concatenate([g * (nu * nv), g * (a * nv), g * (nu * b), g * (a * b)], axis=0),
        F.shape[0],
    )
    gu = (((f10 - f00) * nv + (f11 - f01) * b) * g).sum(axis=1, keepdims=True)
    gv = (((f01 - f00) * nu + (f11 - f10) * a) * g).sum(axis=1, keepdims=True)
    return gF, gu, gv


def scatter_rows(idx, rows, n_rows):
    if HAVE_NUMBA:
        return _scatter_rows_jit(idx, np.ascontiguousarray(rows), n_rows)
    out = np.zeros((n_rows, rows.shape[1]), dtype=rows.dtype)
    if idx.size == 0:
        return out
    if idx.size > 1 and np.all(idx[1:] >= idx[:-1]):
        sidx, srows = idx, rows
    else:
        order = np.argsort(idx, kind="stable")
        sidx = idx[order]
        srows = rows[order]
    starts = np.concatenate([[0], np.flatnonzero(sidx[1:] != sidx[:-1]) + 1])
    out[sidx[starts]] = np.add.reduceat(srows, starts, axis=0)
    return out


def warm_up() -> None:
    """Trigger jit compilation on tiny inputs (no-op without numba)."""
    F = np.zeros((4, 2), dtype=np.float32)
    i = np.zeros(1, dtype=np.int64)
    d = np.zeros(1, dtype=np.float32)
    g = np.zeros((1, 2), dtype=np.float32)
    bilinear_forward(F, i, d, d, 2)
    bilinear_backward(F, g, i, d, d, 2)
    scatter_rows(i, g, 4)
