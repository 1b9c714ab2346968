# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled interval-affine kernels.

Each term w*x with w in [wl, wu] and x in [xl, xu] contributes the exact
minimum (maximum) of its four corner products. The corner is picked by sign
case so that the backward pass routes the gradient to the same corner:

    lo: xl >= 0 -> (wl, xl if wl >= 0 else xu)
        xu <= 0 -> (wu, xl if wu >= 0 else xu)
        else    -> min(wl*xu, wu*xl), ties to wl*xu
    hi: xl >= 0 -> (wu, xu if wu >= 0 else xl)
        xu <= 0 -> (wl, xu if wl >= 0 else xl)
        else    -> max(wl*xl, wu*xu), ties to wu*xu

Loops run input-major over transposed weights so the sign case of each input
interval is decided once and the inner loop walks contiguous memory. Inputs
equal to [0, 0] add nothing to the outputs or weight gradients and are
skipped; the backward pass also skips outputs whose upstream gradients are
both zero. The pure-numpy module ``_ibp_core_py`` implements the same contract.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def interval_linear(const double[:, ::1] x_lo, const double[:, ::1] x_hi,
                    w_lo_arr, w_hi_arr,
                    const double[::1] b_lo, const double[::1] b_hi):
    cdef Py_ssize_t N = x_lo.shape[0], n_in = x_lo.shape[1]
    cdef Py_ssize_t n_out = w_lo_arr.shape[0]
    cdef Py_ssize_t n, i, j
    cdef double xl, xu, wl, wu, t1, t2
    cdef const double[:, ::1] wlT = np.ascontiguousarray(np.asarray(w_lo_arr, dtype=np.float64).T)
    cdef const double[:, ::1] wuT = np.ascontiguousarray(np.asarray(w_hi_arr, dtype=np.float64).T)
    y_lo_arr = np.empty((N, n_out))
    y_hi_arr = np.empty((N, n_out))
    cdef double[:, ::1] y_lo = y_lo_arr
    cdef double[:, ::1] y_hi = y_hi_arr
    with nogil:
        for n in range(N):
            for i in range(n_out):
                y_lo[n, i] = b_lo[i]
                y_hi[n, i] = b_hi[i]
            for j in range(n_in):
                xl = x_lo[n, j]
                xu = x_hi[n, j]
                if xl == 0.0 and xu == 0.0:
                    continue
                if xl >= 0.0:
                    for i in range(n_out):
                        wl = wlT[j, i]
                        wu = wuT[j, i]
                        y_lo[n, i] += wl * (xl if wl >= 0.0 else xu)
                        y_hi[n, i] += wu * (xu if wu >= 0.0 else xl)
                elif xu <= 0.0:
                    for i in range(n_out):
                        wl = wlT[j, i]
                        wu = wuT[j, i]
                        y_lo[n, i] += wu * (xl if wu >= 0.0 else xu)
                        y_hi[n, i] += wl * (xu if wl >= 0.0 else xl)
                else:
                    for i in range(n_out):
                        wl = wlT[j, i]
                        wu = wuT[j, i]
                        t1 = wl * xu
                        t2 = wu * xl
                        y_lo[n, i] += t1 if t1 <= t2 else t2
                        t1 = wl * xl
                        t2 = wu * xu
                        y_hi[n, i] += t2 if t2 >= t1 else t1
    return y_lo_arr, y_hi_arr


def interval_linear_backward(const double[:, ::1] x_lo, const double[:, ::1] x_hi,
                             w_lo_arr, w_hi_arr,
                             const double[:, ::1] g_lo, const double[:, ::1] g_hi,
                             bint need_input_grad=True, bint skip_zero_inputs=False):
    """Gradients w.r.t. (x_lo, x_hi, w_lo, w_hi) given upstream (g_lo, g_hi).

    With ``skip_zero_inputs`` the input gradients at inputs equal to [0, 0]
    are reported as 0, for callers that mask them out anyway (ReLU outputs).
    """
    cdef Py_ssize_t N = x_lo.shape[0], n_in = x_lo.shape[1]
    cdef Py_ssize_t n_out = w_lo_arr.shape[0]
    cdef Py_ssize_t n, i, j, k
    cdef double xl, xu, wl, wu, gl, gh, sxl, sxu
    cdef Py_ssize_t[:, ::1] nz = np.empty((N, n_out), dtype=np.intp)
    cdef Py_ssize_t[::1] n_nz = np.zeros(N, dtype=np.intp)
    cdef const double[:, ::1] wlT = np.ascontiguousarray(np.asarray(w_lo_arr, dtype=np.float64).T)
    cdef const double[:, ::1] wuT = np.ascontiguousarray(np.asarray(w_hi_arr, dtype=np.float64).T)
    gwT_lo_arr = np.zeros((n_in, n_out))
    gwT_hi_arr = np.zeros((n_in, n_out))
    gx_lo_arr = np.zeros((N, n_in))
    gx_hi_arr = np.zeros((N, n_in))
    cdef double[:, ::1] gw_lo = gwT_lo_arr
    cdef double[:, ::1] gw_hi = gwT_hi_arr
    cdef double[:, ::1] gx_lo = gx_lo_arr
    cdef double[:, ::1] gx_hi = gx_hi_arr
    with nogil:
        for n in range(N):
            for i in range(n_out):
                if g_lo[n, i] != 0.0 or g_hi[n, i] != 0.0:
                    nz[n, n_nz[n]] = i
                    n_nz[n] += 1
        # input-major so one row of the weight gradients stays in cache
        for j in range(n_in):
            for n in range(N):
                if n_nz[n] == 0:
                    continue
                xl = x_lo[n, j]
                xu = x_hi[n, j]
                if xl == 0.0 and xu == 0.0 and (skip_zero_inputs or not need_input_grad):
                    continue
                sxl = 0.0
                sxu = 0.0
                if xl >= 0.0:
                    for k in range(n_nz[n]):
                        i = nz[n, k]
                        gl = g_lo[n, i]
                        gh = g_hi[n, i]
                        wl = wlT[j, i]
                        wu = wuT[j, i]
                        if wl >= 0.0:
                            gw_lo[j, i] += gl * xl
                            sxl += gl * wl
                        else:
                            gw_lo[j, i] += gl * xu
                            sxu += gl * wl
                        if wu >= 0.0:
                            gw_hi[j, i] += gh * xu
                            sxu += gh * wu
                        else:
                            gw_hi[j, i] += gh * xl
                            sxl += gh * wu
                elif xu <= 0.0:
                    for k in range(n_nz[n]):
                        i = nz[n, k]
                        gl = g_lo[n, i]
                        gh = g_hi[n, i]
                        wl = wlT[j, i]
                        wu = wuT[j, i]
                        if wu >= 0.0:
                            gw_hi[j, i] += gl * xl
                            sxl += gl * wu
                        else:
                            gw_hi[j, i] += gl * xu
                            sxu += gl * wu
                        if wl >= 0.0:
                            gw_lo[j, i] += gh * xu
                            sxu += gh * wl
                        else:
                            gw_lo[j, i] += gh * xl
                            sxl += gh * wl
                else:
                    for k in range(n_nz[n]):
                        i = nz[n, k]
                        gl = g_lo[n, i]
                        gh = g_hi[n, i]
                        wl = wlT[j, i]
                        wu = wuT[j, i]
                        if wl * xu <= wu * xl:
                            gw_lo[j, i] += gl * xu
                            sxu += gl * wl
                        else:
                            gw_hi[j, i] += gl * xl
                            sxl += gl * wu
                        if wu * xu >= wl * xl:
                            gw_hi[j, i] += gh * xu
                            sxu += gh * wu
                        else:
                            gw_lo[j, i] += gh * xl
                            sxl += gh * wl
                if need_input_grad:
                    gx_lo[n, j] = sxl
                    gx_hi[n, j] = sxu
    return (gx_lo_arr, gx_hi_arr, np.ascontiguousarray(gwT_lo_arr.T),
            np.ascontiguousarray(gwT_hi_arr.T))
