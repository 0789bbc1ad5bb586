"""Jit-compiled inner loops for the convolution primitive.

Every output cell is accumulated by exactly one thread in a fixed loop
order, so results are bit-identical for any thread count. Kernels are
dtype-generic; float32 and float64 specialisations compile on first use
and are cached on disk.
"""

import warnings

import numpy as np

# this box ships an older TBB; numba falls back to its default threading layer
warnings.filterwarnings("ignore", message=".*TBB.*")

from numba import njit, prange


@njit(parallel=True, cache=True)
def conv2d_forward(xp, w, b, stride):
    """Cross-correlation of a zero-padded input with bias.

    xp: (N, C, PH, PW) already padded; w: (O, C, KH, KW); b: (O,).
    """
    n_batch, in_c = xp.shape[0], xp.shape[1]
    out_c, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    out_h = (xp.shape[2] - kh) // stride + 1
    out_w = (xp.shape[3] - kw) // stride + 1
    out = np.empty((n_batch, out_c, out_h, out_w), xp.dtype)
    for no in prange(n_batch * out_c):
        n = no // out_c
        o = no % out_c
        for i in range(out_h):
            acc = np.zeros(out_w, xp.dtype)
            for c in range(in_c):
                for ki in range(kh):
                    row = xp[n, c, i * stride + ki]
                    for kj in range(kw):
                        wv = w[o, c, ki, kj]
                        for j in range(out_w):
                            acc[j] += wv * row[j * stride + kj]
            for j in range(out_w):
                out[n, o, i, j] = acc[j] + b[o]
    return out


@njit(parallel=True, cache=True)
def conv2d_input_grad(dout, w, stride, pad_h, pad_w):
    """Gradient w.r.t. the padded input (caller crops the padding off)."""
    n_batch, out_c, out_h, out_w = dout.shape
    in_c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dxp = np.zeros((n_batch, in_c, pad_h, pad_w), dout.dtype)
    for nc in prange(n_batch * in_c):
        n = nc // in_c
        c = nc % in_c
        for o in range(out_c):
            for i in range(out_h):
                drow = dout[n, o, i]
                for ki in range(kh):
                    row = dxp[n, c, i * stride + ki]
                    for kj in range(kw):
                        wv = w[o, c, ki, kj]
                        for j in range(out_w):
                            row[j * stride + kj] += wv * drow[j]
    return dxp


@njit(parallel=True, cache=True)
def conv2d_weight_grad(dout, xp, kh, kw, stride):
    """Gradient w.r.t. the kernel; accumulates per (o, c) pair."""
    n_batch, out_c, out_h, out_w = dout.shape
    in_c = xp.shape[1]
    dw = np.zeros((out_c, in_c, kh, kw), dout.dtype)
    for oc in prange(out_c * in_c):
        o = oc // in_c
        c = oc % in_c
        for ki in range(kh):
            for kj in range(kw):
                acc = 0.0
                for n in range(n_batch):
                    for i in range(out_h):
                        drow = dout[n, o, i]
                        row = xp[n, c, i * stride + ki]
                        for j in range(out_w):
                            acc += drow[j] * row[j * stride + kj]
                dw[o, c, ki, kj] = acc
    return dw
