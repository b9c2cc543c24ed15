"""Differentiable building blocks: convolution, pooling, softmax, losses.

Spatial tensors are channels-last, ``h×w×c`` for one image or ``n×h×w×c``
for a batch.  Flattening is always row-major.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateVectorError, DimensionError, NumericError
from .tensor import Tensor

LOG_EPS = 1e-12


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` (h×w×c_in or n×h×w×c_in) with a k×k×c_in×c_out kernel."""
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be h×w×c or n×h×w×c, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d kernel must be k×k×c_in×c_out, got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    k, _, cin, cout = kernel.shape
    xd = x.data[None] if single else x.data
    n, h, w, c = xd.shape
    if c != cin:
        raise DimensionError(f"channel axis mismatch: input has {c}, kernel expects {cin}")
    if k > h + 2 * padding:
        raise DimensionError(f"height axis: kernel {k} exceeds padded height {h + 2 * padding}")
    if k > w + 2 * padding:
        raise DimensionError(f"width axis: kernel {k} exceeds padded width {w + 2 * padding}")
    if bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},), got {bias.shape}")

    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0))).astype(np.float64)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    # (n, ho, wo, cin, k, k)
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    kd = kernel.data.astype(np.float64)
    out = np.tensordot(windows, kd, axes=((3, 4, 5), (2, 0, 1))) + bias.data
    if single:
        out = out[0]

    def back(g):
        g = g.astype(np.float64)
        if single:
            g = g[None]
        gk = np.tensordot(windows, g, axes=((0, 1, 2), (0, 1, 2)))  # cin, k, k, cout
        gk = gk.transpose(1, 2, 0, 3)
        gb = g.sum(axis=(0, 1, 2))
        cols = np.tensordot(g, kd, axes=((3,), (3,)))  # n, ho, wo, k, k, cin
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :]
        if single:
            gx = gx[0]
        return gx, gk, gb

    return Tensor._from_op(out, (x, kernel, bias), back, "conv2d")


def global_avg_pool(maps: Tensor) -> Tensor:
    """Mean over the spatial axes; h×w×c -> 1×1×c (batched: n×1×1×c)."""
    if maps.ndim not in (3, 4):
        raise DimensionError(f"expected h×w×c or n×h×w×c maps, got {maps.shape}")
    if maps.shape[-3] < 1 or maps.shape[-2] < 1:
        raise DimensionError(f"empty spatial extent {maps.shape[-3:-1]}")
    return maps.mean(axis=(-3, -2), keepdims=True)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    x = logits.data
    if x.shape[axis] < 2:
        raise DimensionError(f"softmax needs at least 2 classes, got {x.shape[axis]}")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received a non-finite logit")
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        g = g.astype(np.float64)
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(p, (logits,), back, "softmax")


def cross_entropy(p: Tensor, label) -> Tensor:
    """``-log p[label]`` with the probability clamped at 1e-12.

    ``p`` is a K-vector with an integer label, or an n×K batch with n labels,
    in which case the batch mean is returned.
    """
    pd = p.data
    single = pd.ndim == 1
    probs = pd[None] if single else pd
    labels = np.atleast_1d(np.asarray(label))
    if labels.ndim != 1 or len(labels) != probs.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {probs.shape[0]} distributions")
    k = probs.shape[1]
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError(f"labels must be integers, got {labels.dtype}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"label out of range [0, {k}): {labels.tolist()}")
    rows = np.arange(len(labels))
    picked = probs[rows, labels].astype(np.float64)
    clamped = np.maximum(picked, LOG_EPS)
    loss = -np.log(clamped).mean()

    def back(g):
        gp = np.zeros(probs.shape, dtype=np.float64)
        gp[rows, labels] = np.where(picked > LOG_EPS, -1.0 / clamped, 0.0) / len(labels)
        gp = gp * float(g)
        return (gp[0] if single else gp,)

    return Tensor._from_op(loss, (p,), back, "cross_entropy")


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale every row of an n×d matrix to unit Euclidean norm."""
    if x.ndim != 2:
        raise DimensionError(f"expected n×d matrix, got {x.shape}")
    x64 = x.data.astype(np.float64)
    norms = np.sqrt((x64 * x64).sum(axis=1, keepdims=True))
    dead = np.flatnonzero(norms[:, 0] == 0)
    if dead.size:
        raise DegenerateVectorError(f"zero-norm feature vector for sample {int(dead[0])}")
    y = x64 / norms

    def back(g):
        g = g.astype(np.float64)
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return Tensor._from_op(y, (x,), back, "l2_normalize")


def l2_normalize_flatten(maps: Tensor) -> Tensor:
    """Flatten row-major and scale to unit L2 norm."""
    if maps.size == 0:
        raise DimensionError("cannot normalize an empty tensor")
    try:
        return l2_normalize_rows(maps.reshape(1, -1)).reshape(-1)
    except DegenerateVectorError:
        raise DegenerateVectorError("all-zero feature maps cannot be normalized (dead embedding)") from None


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """dst×src matrix of align-corners linear interpolation weights."""
    m = np.zeros((dst, src))
    if src == 1 or dst == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    m[np.arange(dst), lo] = 1.0 - frac
    m[np.arange(dst), lo + 1] += frac
    return m


def bilinear_resize(image: Tensor, target: tuple[int, int]) -> Tensor:
    """Resize h×w (or n×h×w) to H×W with align-corners bilinear weights."""
    H, W = (int(v) for v in target)
    if H < 1 or W < 1:
        raise DimensionError(f"target extent must be positive, got {(H, W)}")
    if image.ndim not in (2, 3):
        raise DimensionError(f"expected h×w or n×h×w image, got {image.shape}")
    h, w = image.shape[-2:]
    if h < 1 or w < 1:
        raise DimensionError(f"source extent must be positive, got {(h, w)}")
    ry, rx = _interp_matrix(h, H), _interp_matrix(w, W)
    out = ry @ image.data.astype(np.float64) @ rx.T

    def back(g):
        return (ry.T @ g.astype(np.float64) @ rx,)

    return Tensor._from_op(out, (image,), back, "bilinear_resize")


def resize_array(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Plain-array convenience wrapper around :func:`bilinear_resize`."""
    if image.shape[-2:] == tuple(target):
        return np.array(image, dtype=np.float64)
    ry, rx = _interp_matrix(image.shape[-2], target[0]), _interp_matrix(image.shape[-1], target[1])
    return ry @ np.asarray(image, dtype=np.float64) @ rx.T
