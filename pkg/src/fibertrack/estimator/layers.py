"""Forward/backward primitives for the orientation network.

Feature maps use NHWC layout ``(batch, height, width, channels)``; kernels
are ``(kh, kw, C_in, C_out)``. All convolutions are "valid" (no padding).
Each ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes that cache.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError


def conv_output_size(size, kernel, stride=1):
    if kernel > size:
        raise ConfigurationError(f"kernel {kernel} does not fit input of size {size}")
    return (size - kernel) // stride + 1


def conv2d_forward(x, W, b, stride=1):
    """Valid 2D convolution (cross-correlation) with bias.

    Output spatial size per axis is ``(in - k) // stride + 1``.
    """
    N, H, Wd, C = x.shape
    kh, kw, cin, F = W.shape
    if cin != C:
        raise ConfigurationError(f"kernel expects {cin} input channels, got {C}")
    Ho, Wo = conv_output_size(H, kh, stride), conv_output_size(Wd, kw, stride)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C)
    out = cols @ W.reshape(kh * kw * C, F) + b
    return out.reshape(N, Ho, Wo, F), (x.shape, cols, W, stride)


def conv2d_backward(dout, cache):
    """Gradients ``(dx, dW, db)`` of a valid convolution."""
    xshape, cols, W, stride = cache
    N, Ho, Wo, F = dout.shape
    kh, kw, C, _ = W.shape
    d2 = dout.reshape(-1, F)
    dW = (cols.T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(-1, F).T).reshape(N, Ho, Wo, kh, kw, C)
    dx = np.zeros(xshape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * (Ho - 1) + 1:stride,
               j:j + stride * (Wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
    return dx, dW, db


def maxpool2d_forward(x, kernel, stride=1):
    """Spatial max pooling; ties resolve to the first element (row-major)."""
    N, H, Wd, C = x.shape
    Ho, Wo = conv_output_size(H, kernel, stride), conv_output_size(Wd, kernel, stride)
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    flat = win.reshape(N, Ho, Wo, C, kernel * kernel)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, kernel, stride)


def maxpool2d_backward(dout, cache):
    xshape, arg, kernel, stride = cache
    N, Ho, Wo, C = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    di, dj = np.divmod(arg, kernel)
    n, i, j, c = np.indices((N, Ho, Wo, C), sparse=False)
    np.add.at(dx, (n, i * stride + di, j * stride + dj, c), dout)
    return dx


def channel_pool_forward(x, window, n_out):
    """Max over consecutive channel windows of ``x[:, C]``.

    Only the first ``window * n_out`` channels are pooled; the remainder is
    dropped (and receives zero gradient).
    """
    N, C = x.shape
    if window * n_out > C or window < 1:
        raise ConfigurationError(
            f"channel pool needs {window}x{n_out} channels, input has {C}")
    groups = x[:, :window * n_out].reshape(N, n_out, window)
    arg = np.argmax(groups, axis=-1)
    out = np.take_along_axis(groups, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, window)


def channel_pool_backward(dout, cache):
    xshape, arg, window = cache
    N, n_out = dout.shape
    dx = np.zeros(xshape, dtype=dout.dtype)
    cols = np.arange(n_out)[None, :] * window + arg
    np.put_along_axis(dx, cols, dout, axis=1)
    return dx


def dense_forward(x, W, b):
    return x @ W + b, (x, W)


def dense_backward(dout, cache):
    x, W = cache
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1.0 - y * y)


def center_crop(x, size):
    """Crop a feature map to ``size x size`` around its centre.

    With an odd size difference the extra row/column is dropped from the
    bottom/right (offset ``(H - size) // 2``).
    """
    H = x.shape[1]
    o = (H - size) // 2
    return x[:, o:o + size, o:o + size, :]


def center_crop_backward(dout, shape):
    dx = np.zeros(shape, dtype=dout.dtype)
    size = dout.shape[1]
    o = (shape[1] - size) // 2
    dx[:, o:o + size, o:o + size, :] = dout
    return dx
