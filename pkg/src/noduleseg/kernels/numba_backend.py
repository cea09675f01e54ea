"""Numba @njit kernel implementations.

Single-threaded by design: each output element is written exactly once, so
results are bit-stable across repeated runs on the same build. The 3x3 conv
fuses all nine taps into one vectorizable inner loop over the row.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, fastmath=True)
def _pad1(x):
    B, C, H, W = x.shape
    xp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    xp[:, :, 1:H + 1, 1:W + 1] = x
    return xp


@nb.njit(cache=True, fastmath=True)
def _conv3x3_padded(xp, w, b):
    B = xp.shape[0]
    C = xp.shape[1]
    H = xp.shape[2] - 2
    W = xp.shape[3] - 2
    O = w.shape[0]
    y = np.empty((B, O, H, W), dtype=xp.dtype)
    acc = np.empty(W, dtype=xp.dtype)
    for bi in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    acc[j] = b[o]
                for c in range(C):
                    xr0 = xp[bi, c, i]
                    xr1 = xp[bi, c, i + 1]
                    xr2 = xp[bi, c, i + 2]
                    w00 = w[o, c, 0, 0]; w01 = w[o, c, 0, 1]; w02 = w[o, c, 0, 2]
                    w10 = w[o, c, 1, 0]; w11 = w[o, c, 1, 1]; w12 = w[o, c, 1, 2]
                    w20 = w[o, c, 2, 0]; w21 = w[o, c, 2, 1]; w22 = w[o, c, 2, 2]
                    for j in range(W):
                        acc[j] += (w00 * xr0[j] + w01 * xr0[j + 1] + w02 * xr0[j + 2]
                                   + w10 * xr1[j] + w11 * xr1[j + 1] + w12 * xr1[j + 2]
                                   + w20 * xr2[j] + w21 * xr2[j + 1] + w22 * xr2[j + 2])
                for j in range(W):
                    y[bi, o, i, j] = acc[j]
    return y


def conv3x3_forward(x, w, b):
    return _conv3x3_padded(_pad1(x), w, b)


def conv3x3_input_grad(dy, w):
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    zero = np.zeros(wt.shape[0], dtype=dy.dtype)
    return _conv3x3_padded(_pad1(dy), wt, zero)


@nb.njit(cache=True, fastmath=True)
def _param_grad(xp, dy):
    B, O, H, W = dy.shape
    C = xp.shape[1]
    dw = np.zeros((O, C, 3, 3), dtype=xp.dtype)
    db = np.zeros(O, dtype=xp.dtype)
    for bi in range(B):
        for o in range(O):
            for i in range(H):
                dyrow = dy[bi, o, i]
                s = np.float32(0.0)
                for j in range(W):
                    s += dyrow[j]
                db[o] += s
                for c in range(C):
                    xr0 = xp[bi, c, i]
                    xr1 = xp[bi, c, i + 1]
                    xr2 = xp[bi, c, i + 2]
                    s00 = np.float32(0.0); s01 = s00; s02 = s00
                    s10 = s00; s11 = s00; s12 = s00
                    s20 = s00; s21 = s00; s22 = s00
                    for j in range(W):
                        d = dyrow[j]
                        s00 += d * xr0[j]; s01 += d * xr0[j + 1]; s02 += d * xr0[j + 2]
                        s10 += d * xr1[j]; s11 += d * xr1[j + 1]; s12 += d * xr1[j + 2]
                        s20 += d * xr2[j]; s21 += d * xr2[j + 1]; s22 += d * xr2[j + 2]
                    dw[o, c, 0, 0] += s00; dw[o, c, 0, 1] += s01; dw[o, c, 0, 2] += s02
                    dw[o, c, 1, 0] += s10; dw[o, c, 1, 1] += s11; dw[o, c, 1, 2] += s12
                    dw[o, c, 2, 0] += s20; dw[o, c, 2, 1] += s21; dw[o, c, 2, 2] += s22
    return dw, db


def conv3x3_param_grad(x, dy):
    return _param_grad(_pad1(x), dy)


@nb.njit(cache=True)
def maxpool2_forward(x):
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    y = np.empty((B, C, H2, W2), dtype=x.dtype)
    idx = np.empty((B, C, H2, W2), dtype=np.uint8)
    for bi in range(B):
        for c in range(C):
            for i in range(H2):
                r0 = x[bi, c, 2 * i]
                r1 = x[bi, c, 2 * i + 1]
                for j in range(W2):
                    # strict comparisons keep the first maximum
                    best = r0[2 * j]
                    k = np.uint8(0)
                    if r0[2 * j + 1] > best:
                        best = r0[2 * j + 1]
                        k = np.uint8(1)
                    if r1[2 * j] > best:
                        best = r1[2 * j]
                        k = np.uint8(2)
                    if r1[2 * j + 1] > best:
                        best = r1[2 * j + 1]
                        k = np.uint8(3)
                    y[bi, c, i, j] = best
                    idx[bi, c, i, j] = k
    return y, idx


@nb.njit(cache=True)
def maxpool2_backward(dy, idx):
    B, C, H2, W2 = dy.shape
    dx = np.zeros((B, C, H2 * 2, W2 * 2), dtype=dy.dtype)
    for bi in range(B):
        for c in range(C):
            for i in range(H2):
                for j in range(W2):
                    k = idx[bi, c, i, j]
                    dx[bi, c, 2 * i + (k >> 1), 2 * j + (k & 1)] = dy[bi, c, i, j]
    return dx
