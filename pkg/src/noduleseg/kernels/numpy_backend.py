"""Pure-NumPy kernel implementations (im2col windows + BLAS contractions)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad1(x):
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def conv3x3_forward(x, w, b):
    win = sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # B,H,W,O
    y += b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv3x3_input_grad(dy, w):
    # Full correlation with the transposed, 180deg-flipped kernel.
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    win = sliding_window_view(_pad1(dy), (3, 3), axis=(2, 3))
    dx = np.tensordot(win, wt, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


def conv3x3_param_grad(x, dy):
    win = sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,3,3
    db = dy.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dw), db


def _windowed(x):
    B, C, H, W = x.shape
    return (
        x.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H // 2, W // 2, 4)
    )


def maxpool2_forward(x):
    xw = _windowed(x)
    idx = xw.argmax(axis=4).astype(np.uint8)  # argmax takes the first maximum
    y = np.take_along_axis(xw, idx[..., None].astype(np.intp), axis=4)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(dy, idx):
    B, C, H2, W2 = dy.shape
    dxw = np.zeros((B, C, H2, W2, 4), dtype=dy.dtype)
    np.put_along_axis(dxw, idx[..., None].astype(np.intp), dy[..., None], axis=4)
    dx = dxw.reshape(B, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(B, C, H2 * 2, W2 * 2))
