"""Feature capture: class activation map -> binary mask -> local image.

Everything here works on detached arrays.  The binarization is not
differentiable, so no gradient flows from the local branch back through
the mask into the whole branch.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import ClassifierHead
from .errors import DimensionError, NumericError
from .ops import resize_array
from .tensor import Tensor


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


@dataclass
class CamResult:
    raw: np.ndarray  # h×w
    normalized: np.ndarray  # H×W in [0, 1]
    threshold: float
    mask: np.ndarray  # H×W, entries in {0, 1}
    degenerate: bool = False
    local_image: np.ndarray | None = None
    image: np.ndarray | None = None
    predicted_class: int = -1


def select_class_weights(prob, head: ClassifierHead) -> np.ndarray:
    """Column of the classifier weights for the predicted (argmax) class.

    ``np.argmax`` returns the first maximum, so ties go to the lowest index.
    """
    p = _arr(prob)
    w = _arr(head.weight)
    if p.shape[-1] != w.shape[1]:
        raise DimensionError(f"prob has {p.shape[-1]} classes, head has {w.shape[1]}")
    return w[:, int(np.argmax(p))].copy()


def compute_cam(maps, weights) -> np.ndarray:
    """Channel-weighted sum of feature maps: h×w×c, c -> h×w."""
    m = _arr(maps)
    wts = _arr(weights)
    if m.shape[-1] != wts.shape[-1]:
        raise DimensionError(f"channel mismatch: maps have {m.shape[-1]}, weights have {wts.shape[-1]}")
    return np.tensordot(m.astype(np.float64), wts.astype(np.float64), axes=((-1,), (-1,)))


def normalize_and_mask(cam, input_size: tuple[int, int]) -> CamResult:
    """Upsample, min-max normalise, threshold at the map's own mean.

    A constant map cannot be normalised; it yields an all-ones mask with
    ``degenerate`` set, so the local branch sees the whole image.
    """
    raw = np.asarray(_arr(cam), dtype=np.float64)
    if raw.ndim != 2:
        raise DimensionError(f"expected an h×w map, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise NumericError("activation map contains non-finite values")
    H, W = input_size
    up = resize_array(raw, (H, W))
    lo, hi = up.min(), up.max()
    if raw.max() == raw.min() or hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return CamResult(raw=raw, normalized=np.zeros((H, W)), threshold=0.0,
                         mask=np.ones((H, W)), degenerate=True)
    normalized = (up - lo) / (hi - lo)
    phi = float(normalized.mean())
    mask = (normalized > phi).astype(np.float64)
    return CamResult(raw=raw, normalized=normalized, threshold=phi, mask=mask)


def crop_local(mask, image, mu: float = 1.0) -> np.ndarray:
    """``mu * (mask ⊙ image)``; masked-out pixels are exactly zero."""
    m, x = _arr(mask), _arr(image)
    if m.shape != x.shape:
        raise DimensionError(f"mask {m.shape} and image {x.shape} differ")
    out = mu * (m * x)
    out[m == 0] = 0.0
    return out


def capture(maps, prob, head: ClassifierHead, image, mu: float = 1.0) -> CamResult:
    """Full capture path for one sample."""
    img = np.asarray(_arr(image), dtype=np.float64)
    cls = int(np.argmax(_arr(prob)))
    cam = compute_cam(maps, select_class_weights(prob, head))
    result = normalize_and_mask(cam, img.shape)
    result.predicted_class = cls
    result.image = img
    result.local_image = crop_local(result.mask, img, mu)
    return result


def capture_batch(maps, prob, head: ClassifierHead, images, mu: float = 1.0) -> list[CamResult]:
    m, p, x = _arr(maps), _arr(prob), _arr(images)
    return [capture(m[i], p[i], head, x[i], mu) for i in range(len(x))]


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 by round-half-up of ``v * 255``."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_png(values: np.ndarray, path) -> Path:
    path = Path(path)
    try:
        Image.fromarray(quantize(values)).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write PNG to {path}: {exc}") from exc
    return path


def export_heatmap(result: CamResult, path) -> tuple[Path, Path]:
    """Write the normalised map to ``path`` and ``mask ⊙ input`` next to it.

    The second file is named ``<stem>_masked.png``.
    """
    path = Path(path)
    if path.suffix.lower() != ".png":
        path = path.with_suffix(".png")
    image = result.image if result.image is not None else np.zeros_like(result.mask)
    heat = write_png(result.normalized, path)
    masked = write_png(result.mask * image, path.with_name(path.stem + "_masked.png"))
    return heat, masked
