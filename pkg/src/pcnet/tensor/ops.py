"""Dense numeric kernels on numpy arrays.

Images are channels-last: a single image is ``(h, w, m)`` and a batch is
``(N, h, w, m)``. Kernels are ``(k1, k2, m, n)``. Convolution is
cross-correlation (the kernel is not flipped).
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pcnet.exceptions import DimensionError


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of ``a (p, q)`` and ``b (q, r)``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output extent and (before, after) padding for ``same`` mode.

    The output extent is ``ceil(size / stride)``; any odd padding goes
    after the image, matching the usual deep-learning convention.
    """
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def pad_image(x: np.ndarray, pads: tuple[tuple[int, int], tuple[int, int]],
              values: np.ndarray | float = 0.0) -> np.ndarray:
    """Pad the spatial axes of a ``(N, h, w, m)`` batch with per-channel constants."""
    (top, bottom), (left, right) = pads
    if top == bottom == left == right == 0:
        return x
    n, h, w, m = x.shape
    out = np.empty((n, h + top + bottom, w + left + right, m), dtype=x.dtype)
    out[...] = np.asarray(values, dtype=x.dtype)
    out[:, top:top + h, left:left + w, :] = x
    return out


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected an (h, w, m) image or (N, h, w, m) batch, got {x.shape}")
    return x, False


def conv_geometry(h: int, w: int, k1: int, k2: int, stride: int, padding: str):
    """Return ``(out_h, out_w, ((top, bottom), (left, right)))``."""
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    if padding == "same":
        out_h, top, bottom = same_padding(h, k1, stride)
        out_w, left, right = same_padding(w, k2, stride)
        pads = ((top, bottom), (left, right))
    elif padding in ("none", "valid"):
        out_h = (h - k1) // stride + 1
        out_w = (w - k2) // stride + 1
        pads = ((0, 0), (0, 0))
    else:
        raise DimensionError(f"unknown padding mode {padding!r}")
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"conv2d: {k1}x{k2} kernel on {h}x{w} input gives an empty output")
    return out_h, out_w, pads


def im2col(xpad: np.ndarray, k1: int, k2: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Patches of a padded batch as a ``(N*out_h*out_w, k1*k2*m)`` matrix.

    Column order is (k1, k2, m), i.e. it matches ``kernel.reshape(-1, n)``.
    """
    n, _, _, m = xpad.shape
    win = sliding_window_view(xpad, (k1, k2), axis=(1, 2))
    win = win[:, : (out_h - 1) * stride + 1: stride, : (out_w - 1) * stride + 1: stride]
    # win: (N, out_h, out_w, m, k1, k2)
    cols = win.transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(cols).reshape(n * out_h * out_w, k1 * k2 * m)


def col2im(cols: np.ndarray, padded_shape: tuple[int, ...], k1: int, k2: int,
           stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients into a padded batch."""
    n, hp, wp, m = padded_shape
    cols = cols.reshape(n, out_h, out_w, k1, k2, m)
    out = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(k1):
        for j in range(k2):
            out[:, i: i + stride * (out_h - 1) + 1: stride,
                j: j + stride * (out_w - 1) + 1: stride, :] += cols[:, :, :, i, j, :]
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: str = "none",
           pad_values: np.ndarray | float | None = None) -> np.ndarray:
    """2-D cross-correlation.

    Args:
        x: ``(h, w, m)`` image or ``(N, h, w, m)`` batch.
        kernel: ``(k1, k2, m, n)``.
        stride: same stride on both spatial axes.
        padding: ``"none"`` (valid) or ``"same"``.
        pad_values: per-channel constants (length ``m``) used for the
            out-of-bounds pixels in ``same`` mode; zero by default.

    Bias and activation are the caller's business.
    """
    xb, single = _as_batch(x)
    kernel = np.asarray(kernel)
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be (k1, k2, m, n), got {kernel.shape}")
    k1, k2, m, n = kernel.shape
    if xb.shape[3] != m:
        raise DimensionError(f"conv2d: input has {xb.shape[3]} channels, kernel expects {m}")
    out_h, out_w, pads = conv_geometry(xb.shape[1], xb.shape[2], k1, k2, stride, padding)
    if pad_values is None:
        pad_values = 0.0
    elif np.ndim(pad_values) == 1 and len(pad_values) != m:
        raise DimensionError(f"pad_values has length {len(pad_values)}, expected {m}")
    xpad = pad_image(xb, pads, pad_values)
    cols = im2col(xpad, k1, k2, stride, out_h, out_w)
    out = (cols @ kernel.reshape(k1 * k2 * m, n)).reshape(xb.shape[0], out_h, out_w, n)
    return out[0] if single else out


def maxpool2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped."""
    xb, single = _as_batch(x)
    n, h, w, m = xb.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2 needs a spatial extent of at least 2x2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    out = xb[:, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2, m).max(axis=(2, 4))
    return out[0] if single else out


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel mean over the spatial axes: ``(h, w, m) -> (m,)``."""
    xb, single = _as_batch(x)
    out = xb.mean(axis=(1, 2))
    return out[0] if single else out
