"""Numba-compiled convolution kernels (default backend).

Same contracts as :mod:`dmbn.kernels.numpy_ops`. Loops are serial and
accumulate in a fixed order so results are deterministic run to run;
fastmath stays off for the same reason.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def conv2d_forward(x, k, stride):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                acc += x[ni, ci, i * stride + a, j * stride + b] * k[fi, ci, a, b]
                    out[ni, fi, i, j] = acc
    return out


@njit(cache=True)
def conv2d_grad_input(gout, k, stride, height, width):
    n, f, ho, wo = gout.shape
    _, c, kh, kw = k.shape
    gx = np.zeros((n, c, height, width), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    g = gout[ni, fi, i, j]
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                gx[ni, ci, i * stride + a, j * stride + b] += g * k[fi, ci, a, b]
    return gx


@njit(cache=True)
def conv2d_grad_kernels(gout, x, stride, kh, kw):
    n, f, ho, wo = gout.shape
    c = x.shape[1]
    gk = np.zeros((f, c, kh, kw), dtype=np.float64)
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    g = gout[ni, fi, i, j]
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                gk[fi, ci, a, b] += g * x[ni, ci, i * stride + a, j * stride + b]
    return gk
