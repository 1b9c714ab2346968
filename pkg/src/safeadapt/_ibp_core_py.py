"""Pure-numpy interval-affine kernels (fallback for ``_ibp_core``).

Same corner-selection rule as the compiled module. Inputs are split by sign
class per element: nonnegative (P), nonpositive (Q) and straddling zero (S).
P and Q reduce to matrix products against the positive and negative parts of
the weight bounds; S terms are handled elementwise.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def _split(w):
    return np.where(w >= 0.0, w, 0.0), np.where(w < 0.0, w, 0.0)


def _classes(x_lo, x_hi):
    P = x_lo >= 0.0
    Q = ~P & (x_hi <= 0.0)
    S = ~P & ~Q
    return P, Q, S


def interval_linear(x_lo, x_hi, w_lo, w_hi, b_lo, b_hi):
    P, Q, S = _classes(x_lo, x_hi)
    wl_p, wl_n = _split(w_lo)
    wu_p, wu_n = _split(w_hi)
    xlP, xuP = x_lo * P, x_hi * P
    y_lo = xlP @ wl_p.T + xuP @ wl_n.T + b_lo
    y_hi = xuP @ wu_p.T + xlP @ wu_n.T + b_hi
    if Q.any():
        xlQ, xuQ = x_lo * Q, x_hi * Q
        y_lo += xlQ @ wu_p.T + xuQ @ wu_n.T
        y_hi += xuQ @ wl_p.T + xlQ @ wl_n.T
    if S.any():
        for n, j in zip(*np.nonzero(S)):
            xl, xu = x_lo[n, j], x_hi[n, j]
            y_lo[n] += np.minimum(w_lo[:, j] * xu, w_hi[:, j] * xl)
            y_hi[n] += np.maximum(w_hi[:, j] * xu, w_lo[:, j] * xl)
    return y_lo, y_hi


def interval_linear_backward(x_lo, x_hi, w_lo, w_hi, g_lo, g_hi, need_input_grad=True,
                             skip_zero_inputs=False):
    P, Q, S = _classes(x_lo, x_hi)
    wl_pos = w_lo >= 0.0
    wu_pos = w_hi >= 0.0
    xlP, xuP = x_lo * P, x_hi * P
    gw_lo = np.where(wl_pos, g_lo.T @ xlP, g_lo.T @ xuP)
    gw_hi = np.where(wu_pos, g_hi.T @ xuP, g_hi.T @ xlP)
    gx_lo = gx_hi = None
    if need_input_grad:
        wl_p, wl_n = _split(w_lo)
        wu_p, wu_n = _split(w_hi)
        gx_lo = (g_lo @ wl_p + g_hi @ wu_n) * P
        gx_hi = (g_lo @ wl_n + g_hi @ wu_p) * P
    if Q.any():
        xlQ, xuQ = x_lo * Q, x_hi * Q
        gw_hi += np.where(wu_pos, g_lo.T @ xlQ, g_lo.T @ xuQ)
        gw_lo += np.where(wl_pos, g_hi.T @ xuQ, g_hi.T @ xlQ)
        if need_input_grad:
            gx_lo += (g_lo @ wu_p + g_hi @ wl_n) * Q
            gx_hi += (g_lo @ wu_n + g_hi @ wl_p) * Q
    if S.any():
        for n, j in zip(*np.nonzero(S)):
            xl, xu = x_lo[n, j], x_hi[n, j]
            wl, wu = w_lo[:, j], w_hi[:, j]
            gl, gh = g_lo[n], g_hi[n]
            lo_first = wl * xu <= wu * xl
            gw_lo[:, j] += np.where(lo_first, gl * xu, 0.0)
            gw_hi[:, j] += np.where(lo_first, 0.0, gl * xl)
            hi_first = wu * xu >= wl * xl
            gw_hi[:, j] += np.where(hi_first, gh * xu, 0.0)
            gw_lo[:, j] += np.where(hi_first, 0.0, gh * xl)
            if need_input_grad:
                gx_hi[n, j] += np.sum(np.where(lo_first, gl * wl, 0.0))
                gx_lo[n, j] += np.sum(np.where(lo_first, 0.0, gl * wu))
                gx_hi[n, j] += np.sum(np.where(hi_first, gh * wu, 0.0))
                gx_lo[n, j] += np.sum(np.where(hi_first, 0.0, gh * wl))
    if not need_input_grad:
        gx_lo = np.zeros_like(x_lo)
        gx_hi = np.zeros_like(x_hi)
    elif skip_zero_inputs:
        keep = (x_lo != 0.0) | (x_hi != 0.0)
        gx_lo = gx_lo * keep
        gx_hi = gx_hi * keep
    return gx_lo, gx_hi, gw_lo, gw_hi
