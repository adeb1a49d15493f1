# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled valid-mode cross-correlation kernels.

Both routines take an already padded input so the Python wrapper owns all
padding conventions. Each padded channel is treated as one flat buffer and
outputs live on the "wide" grid H x Wp (Wp = padded width); the trailing
kw - 1 columns of every wide row are junk and get sliced off. The register
blocked inner loops are in ``_corr_impl.h``.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()

cdef extern from "_corr_impl.h" nogil:
    enum: DISTSEG_TILE
    void distseg_corr_d(const double* x, const double* wt, const Py_ssize_t* offs,
                        Py_ssize_t ntap, Py_ssize_t n_blk, Py_ssize_t n_tiles, double* out)
    void distseg_corr_f(const float* x, const float* wt, const Py_ssize_t* offs,
                        Py_ssize_t ntap, Py_ssize_t n_blk, Py_ssize_t n_tiles, float* out)
    void distseg_wgrad_d(const double* x, const double* g, const Py_ssize_t* offs,
                         Py_ssize_t ntap, Py_ssize_t n_blk, Py_ssize_t n_tiles, double* dw)
    void distseg_wgrad_f(const float* x, const float* g, const Py_ssize_t* offs,
                         Py_ssize_t ntap, Py_ssize_t n_blk, Py_ssize_t n_tiles, float* dw)

# output channels handled per register block
cdef enum:
    OBLK = 4


cdef _flat_with_slack(xpad, Py_ssize_t slack):
    n = xpad.size
    flat = np.zeros(n + slack, dtype=xpad.dtype)
    flat[:n] = xpad.ravel()
    return flat


cdef _tap_offsets(Py_ssize_t n_in, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t Hp, Py_ssize_t Wp):
    c, a, b = np.meshgrid(np.arange(n_in), np.arange(kh), np.arange(kw), indexing="ij")
    return np.ascontiguousarray((c * Hp * Wp + a * Wp + b).ravel(), dtype=np.intp)


def correlate(floating[:, :, ::1] xpad, floating[:, :, :, ::1] w):
    """out[o, i, j] = sum_{c,a,b} w[o, c, a, b] * xpad[c, i + a, j + b]."""
    cdef Py_ssize_t n_out = w.shape[0], n_in = w.shape[1]
    cdef Py_ssize_t kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Hp = xpad.shape[1], Wp = xpad.shape[2]
    cdef Py_ssize_t H = Hp - kh + 1, W = Wp - kw + 1
    if xpad.shape[0] != n_in:
        raise ValueError("channel mismatch between input and kernel")
    cdef Py_ssize_t L = H * Wp
    cdef Py_ssize_t ntap = n_in * kh * kw
    cdef Py_ssize_t n_blk = (n_out + OBLK - 1) // OBLK
    cdef Py_ssize_t n_tiles = (L + DISTSEG_TILE - 1) // DISTSEG_TILE
    dtype = np.float64 if floating is double else np.float32

    cdef floating[::1] xflat = _flat_with_slack(np.asarray(xpad), n_tiles * DISTSEG_TILE - L + DISTSEG_TILE)
    # weights regrouped as [block, tap, OBLK]; rows past n_out are zero
    wt_arr = np.zeros((n_blk * OBLK, ntap), dtype=dtype)
    wt_arr[:n_out] = np.asarray(w).reshape(n_out, ntap)
    wt_arr = np.ascontiguousarray(wt_arr.reshape(n_blk, OBLK, ntap).transpose(0, 2, 1))
    cdef floating[:, :, ::1] wt = wt_arr
    cdef Py_ssize_t[::1] offs = _tap_offsets(n_in, kh, kw, Hp, Wp)
    wide_arr = np.empty((n_blk * OBLK, n_tiles * DISTSEG_TILE), dtype=dtype)
    cdef floating[:, ::1] wide = wide_arr

    with nogil:
        if floating is double:
            distseg_corr_d(&xflat[0], &wt[0, 0, 0], &offs[0], ntap, n_blk, n_tiles, &wide[0, 0])
        else:
            distseg_corr_f(&xflat[0], &wt[0, 0, 0], &offs[0], ntap, n_blk, n_tiles, &wide[0, 0])
    out = wide_arr[:n_out, :L].reshape(n_out, H, Wp)[:, :, :W]
    return np.ascontiguousarray(out)


def correlate_weight_grad(floating[:, :, ::1] xpad, floating[:, :, ::1] g,
                          Py_ssize_t kh, Py_ssize_t kw):
    """dw[o, c, a, b] = sum_{i,j} g[o, i, j] * xpad[c, i + a, j + b]."""
    cdef Py_ssize_t n_out = g.shape[0], n_in = xpad.shape[0]
    cdef Py_ssize_t H = g.shape[1], W = g.shape[2]
    cdef Py_ssize_t Hp = xpad.shape[1], Wp = xpad.shape[2]
    if Hp != H + kh - 1 or Wp != W + kw - 1:
        raise ValueError("padded input does not match gradient and kernel extents")
    cdef Py_ssize_t L = H * Wp
    cdef Py_ssize_t ntap = n_in * kh * kw
    cdef Py_ssize_t n_blk = (n_out + OBLK - 1) // OBLK
    cdef Py_ssize_t n_tiles = (L + DISTSEG_TILE - 1) // DISTSEG_TILE
    dtype = np.float64 if floating is double else np.float32

    cdef floating[::1] xflat = _flat_with_slack(np.asarray(xpad), n_tiles * DISTSEG_TILE - L + DISTSEG_TILE)
    # gradient on the wide grid, zero in junk columns, tail and padding rows
    gw_arr = np.zeros((n_blk * OBLK, n_tiles * DISTSEG_TILE), dtype=dtype)
    gw_arr[:n_out, :L].reshape(n_out, H, Wp)[:, :, :W] = g
    cdef floating[:, ::1] gw = gw_arr
    cdef Py_ssize_t[::1] offs = _tap_offsets(n_in, kh, kw, Hp, Wp)
    dw_arr = np.empty((n_blk * OBLK, ntap), dtype=dtype)
    cdef floating[:, ::1] dw = dw_arr

    with nogil:
        if floating is double:
            distseg_wgrad_d(&xflat[0], &gw[0, 0], &offs[0], ntap, n_blk, n_tiles, &dw[0, 0])
        else:
            distseg_wgrad_f(&xflat[0], &gw[0, 0], &offs[0], ntap, n_blk, n_tiles, &dw[0, 0])
    return np.ascontiguousarray(dw_arr[:n_out].reshape(n_out, n_in, kh, kw))
