"""Silhouette extraction: white fruit on black background, defects black.

The pipeline replaces learned segmentation with classical steps that are
deterministic and implementation-independent:

    luminance -> Otsu threshold -> binarize (background = corner-majority
    class) -> open -> close -> largest 4-connected component -> fill holes

Defects are the pixels inside the fruit mask whose luminance falls below
``defect_alpha`` times the mean luminance of the mask interior; they are
rendered black inside the white silhouette. A rule-based refinement check
flags masks that are too small, too large, or touching the image border.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import DegenerateImageError, InvalidArgumentError

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


@dataclass(frozen=True)
class SilhouetteParams:
    morph_radius: int = 1
    defect_alpha: float = 0.5
    min_area_frac: float = 0.05
    max_area_frac: float = 0.90
    max_border_contact_frac: float = 0.05

    def __post_init__(self):
        if self.morph_radius < 0:
            raise InvalidArgumentError("morph_radius must be >= 0")
        if not 0.0 < self.defect_alpha < 1.0:
            raise InvalidArgumentError("defect_alpha must lie in (0, 1)")
        if not 0.0 < self.min_area_frac < self.max_area_frac <= 1.0:
            raise InvalidArgumentError("need 0 < min_area_frac < max_area_frac <= 1")


@dataclass(frozen=True)
class RefinementReport:
    verdict: str  # accept | reject
    reason: str  # ok | mask_too_small | mask_too_large | mask_touches_border | degenerate_image
    area_frac: float
    defect_frac: float

    @property
    def accepted(self) -> bool:
        return self.verdict == "accept"

    def to_dict(self) -> dict:
        return asdict(self)


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma, rounded half away from zero to uint8."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"expected an (H, W, 3) RGB array, got {arr.shape}")
    lum = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    return np.clip(np.floor(lum + 0.5), 0, 255).astype(np.uint8)


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold maximizing between-class variance for {p <= t} vs {p > t};
    ties resolve to the smallest t. Constant images are degenerate."""
    hist = np.bincount(np.asarray(gray, dtype=np.uint8).reshape(-1), minlength=256).astype(
        np.float64
    )
    total = hist.sum()
    nonzero = np.flatnonzero(hist)
    if nonzero.size < 2:
        raise DegenerateImageError("image has a single luminance level; cannot threshold")
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    sum0 = np.cumsum(hist * levels)
    mu_total = sum0[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(w0 > 0, sum0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(w1 > 0, (mu_total - sum0) / np.maximum(w1, 1), 0.0)
    sigma_b = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -1.0)
    return int(np.argmax(sigma_b))  # argmax returns the first (smallest) maximizer


def binarize(gray: np.ndarray, threshold: int, polarity: str) -> np.ndarray:
    """fg_above keeps {p > t} as foreground (255); fg_below its complement."""
    if polarity == "fg_above":
        fg = gray > threshold
    elif polarity == "fg_below":
        fg = gray <= threshold
    else:
        raise InvalidArgumentError(f"polarity must be fg_above|fg_below, got {polarity!r}")
    return np.where(fg, 255, 0).astype(np.uint8)


def _sliding(a: np.ndarray, radius: int, axis: int, reducer, pad_value: int) -> np.ndarray:
    size = a.shape[axis]
    widths = [(0, 0), (0, 0)]
    widths[axis] = (radius, radius)
    ap = np.pad(a, widths, constant_values=pad_value)
    slices = []
    for off in range(2 * radius + 1):
        idx = [slice(None), slice(None)]
        idx[axis] = slice(off, off + size)
        slices.append(ap[tuple(idx)])
    return reducer.reduce(slices)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-window erosion; out-of-bounds neighbors do not constrain
    (padding acts as foreground), so a full-frame mask is a fixed point."""
    if radius == 0:
        return mask.copy()
    out = _sliding(mask, radius, 0, np.minimum, 255)
    return _sliding(out, radius, 1, np.minimum, 255)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-window dilation with background padding."""
    if radius == 0:
        return mask.copy()
    out = _sliding(mask, radius, 0, np.maximum, 0)
    return _sliding(out, radius, 1, np.maximum, 0)


def morph(mask: np.ndarray, op: str, radius: int) -> np.ndarray:
    if radius < 0:
        raise InvalidArgumentError("radius must be >= 0")
    if op == "open":
        return dilate(erode(mask, radius), radius)
    if op == "close":
        return erode(dilate(mask, radius), radius)
    raise InvalidArgumentError(f"op must be open|close, got {op!r}")


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected foreground component; among equally sized
    components, the one containing the smallest flat index wins."""
    fg = mask > 0
    if not fg.any():
        raise DegenerateImageError("mask is empty; no component to keep")
    labels, count = ndimage.label(fg, structure=FOUR_CONNECTED)
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    best_size = sizes.max()
    candidates = np.flatnonzero(sizes == best_size)
    flat = labels.reshape(-1)
    first_pos = np.argmax(np.isin(flat, candidates))
    keep = flat[first_pos]
    return np.where(labels == keep, 255, 0).astype(np.uint8)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Turn background regions not 4-connected to the border into foreground."""
    bg = mask == 0
    labels, count = ndimage.label(bg, structure=FOUR_CONNECTED)
    border_labels = np.unique(
        np.concatenate([labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]])
    )
    hole = bg & ~np.isin(labels, border_labels)
    out = mask.copy()
    out[hole] = 255
    return out


def refine_check(fruit_mask: np.ndarray, params: SilhouetteParams) -> RefinementReport:
    """Rule-based stand-in for manual screening of bad segmentations."""
    h, w = fruit_mask.shape
    fg = fruit_mask > 0
    area_frac = float(fg.sum()) / float(h * w)
    if area_frac < params.min_area_frac:
        return RefinementReport("reject", "mask_too_small", area_frac, 0.0)
    border = np.concatenate([fg[0, :], fg[-1, :], fg[1:-1, 0], fg[1:-1, -1]])
    border_frac = float(border.sum()) / float(border.size)
    # border contact outranks the size ceiling: an oversized mask almost
    # always reaches the frame, and the frame is the more diagnostic signal
    if border_frac > params.max_border_contact_frac:
        return RefinementReport("reject", "mask_touches_border", area_frac, 0.0)
    if area_frac > params.max_area_frac:
        return RefinementReport("reject", "mask_too_large", area_frac, 0.0)
    return RefinementReport("accept", "ok", area_frac, 0.0)


def extract_silhouette(
    image: np.ndarray, params: SilhouetteParams | None = None
) -> tuple[np.ndarray, np.ndarray, RefinementReport]:
    """Full pipeline: returns (silhouette, fruit_mask, report).

    ``image`` is an (H, W, 3) RGB array or an (H, W) grayscale array.
    Degenerate inputs yield an all-black silhouette and a reject report
    rather than an exception.
    """
    if params is None:
        params = SilhouetteParams()
    arr = np.asarray(image)
    gray = luminance(arr) if arr.ndim == 3 else arr.astype(np.uint8)
    h, w = gray.shape

    def degenerate():
        zeros = np.zeros((h, w), dtype=np.uint8)
        return zeros, zeros.copy(), RefinementReport("reject", "degenerate_image", 0.0, 0.0)

    try:
        t = otsu_threshold(gray)
    except DegenerateImageError:
        return degenerate()

    corners = np.array([gray[0, 0], gray[0, -1], gray[-1, 0], gray[-1, -1]])
    dark_corners = int((corners <= t).sum())
    polarity = "fg_above" if dark_corners >= 2 else "fg_below"
    mask = binarize(gray, t, polarity)
    mask = morph(mask, "open", params.morph_radius)
    mask = morph(mask, "close", params.morph_radius)
    try:
        mask = largest_component(mask)
    except DegenerateImageError:
        return degenerate()
    fruit_mask = fill_holes(mask)

    interior = fruit_mask > 0
    mean_lum = float(gray[interior].mean())
    defects = interior & (gray < params.defect_alpha * mean_lum)
    silhouette = np.where(interior & ~defects, 255, 0).astype(np.uint8)

    report = refine_check(fruit_mask, params)
    defect_frac = float(defects.sum()) / float(interior.sum())
    return silhouette, fruit_mask, replace(report, defect_frac=defect_frac)
