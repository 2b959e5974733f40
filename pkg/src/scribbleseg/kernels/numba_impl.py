"""Numba-jitted convolution kernels, the default hot path.

All body convolutions are 3x3 stride 1, so the kernels specialize on that:
forward assigns one output row per parallel task with the nine taps unrolled,
and the weight gradient reduces row pairs into nine independent dot products.
Each output element belongs to exactly one task with a fixed serial
accumulation order inside, so results are bit-reproducible run to run
regardless of thread count.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, fastmath=True, cache=True)
def _conv3x3_rows(xp, w, b, out):
    n_b, c_out, out_h, out_w = out.shape
    c_in = w.shape[1]
    for t in prange(n_b * c_out * out_h):
        n = t // (c_out * out_h)
        rem = t % (c_out * out_h)
        o = rem // out_h
        h = rem % out_h
        row = np.zeros(out_w, dtype=xp.dtype)
        for c in range(c_in):
            for i in range(3):
                src = xp[n, c, h + i]
                w0 = w[o, c, i, 0]
                w1 = w[o, c, i, 1]
                w2 = w[o, c, i, 2]
                for x in range(out_w):
                    row[x] += w0 * src[x] + w1 * src[x + 1] + w2 * src[x + 2]
        bv = b[o]
        for x in range(out_w):
            out[n, o, h, x] = row[x] + bv
    return out


@njit(parallel=True, fastmath=True, cache=True)
def _conv3x3_dw(xp, dy, dw):
    c_out, c_in = dw.shape[0], dw.shape[1]
    n_b, _, out_h, out_w = dy.shape
    zero = xp[0, 0, 0, 0] * 0  # dtype-matched accumulators so reductions vectorize
    for t in prange(c_out * c_in):
        o = t // c_in
        c = t % c_in
        for i in range(3):
            s0 = zero
            s1 = zero
            s2 = zero
            for n in range(n_b):
                for h in range(out_h):
                    drow = dy[n, o, h]
                    srow = xp[n, c, h + i]
                    for x in range(out_w):
                        d = drow[x]
                        s0 += d * srow[x]
                        s1 += d * srow[x + 1]
                        s2 += d * srow[x + 2]
            dw[o, c, i, 0] = s0
            dw[o, c, i, 1] = s1
            dw[o, c, i, 2] = s2
    return dw


@njit(parallel=True, fastmath=True, cache=True)
def _conv_generic(xp, w, b, out):
    n_out, c_out, out_h, out_w = out.shape
    c_in, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for t in prange(n_out * c_out):
        n = t // c_out
        o = t % c_out
        acc = np.zeros((out_h, out_w), dtype=xp.dtype)
        for c in range(c_in):
            for i in range(kh):
                for j in range(kw):
                    wv = w[o, c, i, j]
                    for h in range(out_h):
                        for x in range(out_w):
                            acc[h, x] += wv * xp[n, c, h + i, x + j]
        bv = b[o]
        for h in range(out_h):
            for x in range(out_w):
                out[n, o, h, x] = acc[h, x] + bv
    return out


@njit(parallel=True, fastmath=True, cache=True)
def _conv_generic_dw(xp, dy, dw):
    c_out, c_in, kh, kw = dw.shape
    n_b, _, out_h, out_w = dy.shape
    zero = xp[0, 0, 0, 0] * 0
    for t in prange(c_out * c_in):
        o = t // c_in
        c = t % c_in
        for i in range(kh):
            for j in range(kw):
                acc = zero
                for n in range(n_b):
                    for h in range(out_h):
                        for x in range(out_w):
                            acc += dy[n, o, h, x] * xp[n, c, h + i, x + j]
                dw[o, c, i, j] = acc
    return dw


def _padded(x, pad):
    if pad:
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(x)


def conv2d(x, w, b, pad):
    n, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    out_h = h + 2 * pad - kh + 1
    out_w = wd + 2 * pad - kw + 1
    if b is None:
        b = np.zeros(cout, dtype=x.dtype)
    out = np.empty((n, cout, out_h, out_w), dtype=x.dtype)
    xp = _padded(x, pad)
    if kh == 3 and kw == 3:
        _conv3x3_rows(xp, w, b, out)
    else:
        _conv_generic(xp, w, b, out)
    return out


def conv2d_input_grad(dy, w, pad):
    kh, kw = w.shape[2], w.shape[3]
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(dy, w_rot, None, kh - 1 - pad)


def conv2d_param_grad(x, dy, pad, kh, kw):
    cin = x.shape[1]
    cout = dy.shape[1]
    dw = np.empty((cout, cin, kh, kw), dtype=x.dtype)
    xp = _padded(x, pad)
    dyc = np.ascontiguousarray(dy)
    if kh == 3 and kw == 3:
        _conv3x3_dw(xp, dyc, dw)
    else:
        _conv_generic_dw(xp, dyc, dw)
    db = dy.sum(axis=(0, 2, 3))
    return dw, db
