"""Pure numpy fallback for the compiled correlation kernels."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def correlate(xpad, w):
    """out[o, i, j] = sum_{c,a,b} w[o, c, a, b] * xpad[c, i + a, j + b]."""
    if xpad.shape[0] != w.shape[1]:
        raise ValueError("channel mismatch between input and kernel")
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(xpad, (kh, kw), axis=(1, 2))  # c, H, W, kh, kw
    out = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))  # o, H, W
    return np.ascontiguousarray(out)


def correlate_weight_grad(xpad, g, kh, kw):
    """dw[o, c, a, b] = sum_{i,j} g[o, i, j] * xpad[c, i + a, j + b]."""
    H, W = g.shape[1], g.shape[2]
    if xpad.shape[1] != H + kh - 1 or xpad.shape[2] != W + kw - 1:
        raise ValueError("padded input does not match gradient and kernel extents")
    win = sliding_window_view(xpad, (kh, kw), axis=(1, 2))
    dw = np.tensordot(g, win, axes=([1, 2], [1, 2]))  # o, c, kh, kw
    return np.ascontiguousarray(dw)
