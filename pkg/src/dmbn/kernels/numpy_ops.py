"""Pure-numpy fallback implementations of the convolution kernels.

All three functions operate on batched inputs: images are ``(N, C, H, W)``,
kernel stacks are ``(F, C, kh, kw)``, and convolutions are valid
(no padding) cross-correlations.
"""

import numpy as np

NAME = "numpy"


def conv2d_forward(x, k, stride):
    kh, kw = k.shape[2], k.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.einsum("nchwab,fcab->nfhw", win, k, optimize=True)


def conv2d_grad_input(gout, k, stride, height, width):
    n = gout.shape[0]
    f, c, kh, kw = k.shape
    ho, wo = gout.shape[2], gout.shape[3]
    gx = np.zeros((n, c, height, width), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            patch = np.einsum("nfij,fc->ncij", gout, k[:, :, a, b], optimize=True)
            gx[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += patch
    return gx


def conv2d_grad_kernels(gout, x, stride, kh, kw):
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.einsum("nfij,ncijab->fcab", gout, win, optimize=True)
