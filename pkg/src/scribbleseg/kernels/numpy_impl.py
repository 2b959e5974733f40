"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback path used when numba is unavailable or disabled via
``SCRIBBLESEG_BACKEND=numpy``. All convolutions are stride 1, NCHW layout.
"""

import numpy as np


def _im2col(xp, kh, kw, out_h, out_w):
    # xp: padded input (N, C, Hp, Wp) -> columns (N, C*kh*kw, out_h*out_w)
    # Row ordering (c, i, j) matches w.reshape(Cout, Cin*kh*kw).
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, out_h * out_w), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + out_h, j:j + out_w]
            cols[:, :, i * kw + j, :] = patch.reshape(n, c, out_h * out_w)
    return cols.reshape(n, c * kh * kw, out_h * out_w)


def conv2d(x, w, b, pad):
    """Correlate x (N,Cin,H,W) with w (Cout,Cin,kh,kw), zero padding `pad`."""
    n, _, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    out_h = h + 2 * pad - kh + 1
    out_w = wd + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, out_h, out_w)
    y = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    if b is not None:
        y += b[:, None]
    return y.reshape(n, cout, out_h, out_w)


def conv2d_input_grad(dy, w, pad):
    """Gradient of conv2d w.r.t. its input: full correlation with rotated w."""
    kh, kw = w.shape[2], w.shape[3]
    w_rot = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(dy, w_rot, None, kh - 1 - pad)


def conv2d_param_grad(x, dy, pad, kh, kw):
    """Gradients w.r.t. weights and bias. Returns (dw, db)."""
    n, cin = x.shape[:2]
    cout = dy.shape[1]
    out_h, out_w = dy.shape[2], dy.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, out_h, out_w)
    dy_mat = dy.reshape(n, cout, out_h * out_w)
    dw = np.matmul(dy_mat, cols.transpose(0, 2, 1)).sum(axis=0)
    db = dy.sum(axis=(0, 2, 3))
    return dw.reshape(cout, cin, kh, kw), db
