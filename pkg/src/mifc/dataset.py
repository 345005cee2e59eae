"""Dataset manifests, deterministic splitting, batch loading and the
synthetic fruit-image generator.

Manifests are JSON Lines: an optional first line ``{"provenance": {...}}``
followed by one record per line with keys rgb, sil, label, split, fruit.
Image paths are stored relative to the manifest's directory so a corpus can
be moved (and so identical seeds produce byte-identical corpora regardless
of the output location).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataInvalidError, FormatError, InvalidArgumentError
from .pnm import read_image, write_image
from .prng import SplitMix64
from .tensor import DTYPES, Tensor

LABEL_NAMES = ("healthy", "defective")
SPLITS = ("train", "val", "test")


@dataclass
class SampleRecord:
    rgb: str
    sil: str | None
    label: int
    split: str
    fruit: str


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    provenance: dict = field(default_factory=dict)
    base_dir: str = "."

    def resolve(self, rel_path: str) -> str:
        return os.path.normpath(os.path.join(self.base_dir, rel_path))

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = []
    if manifest.provenance:
        lines.append(json.dumps({"provenance": manifest.provenance}, sort_keys=True))
    for r in manifest.records:
        lines.append(
            json.dumps(
                {"rgb": r.rgb, "sil": r.sil, "label": r.label, "split": r.split, "fruit": r.fruit},
                sort_keys=True,
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    manifest.base_dir = os.path.dirname(os.path.abspath(path)) or "."


def read_manifest(path) -> DatasetManifest:
    records = []
    provenance: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{ln}: invalid JSON: {exc}") from exc
            if "provenance" in obj:
                provenance = obj["provenance"]
                continue
            try:
                records.append(
                    SampleRecord(obj["rgb"], obj["sil"], int(obj["label"]), obj["split"], obj["fruit"])
                )
            except KeyError as exc:
                raise FormatError(f"{path}:{ln}: record lacks key {exc}") from exc
    return DatasetManifest(records, provenance, os.path.dirname(os.path.abspath(path)) or ".")


def scan_dataset(root, fruit: str | None = None) -> DatasetManifest:
    """Build a manifest from ``root/healthy`` and ``root/defective`` image dirs."""
    root = os.path.abspath(root)
    if fruit is None:
        fruit = os.path.basename(root.rstrip(os.sep))
    records = []
    for label, cls in enumerate(LABEL_NAMES):
        cls_dir = os.path.join(root, cls)
        if not os.path.isdir(cls_dir):
            raise DataInvalidError(f"missing class directory {cls_dir}")
        names = sorted(
            n for n in os.listdir(cls_dir) if n.lower().endswith((".ppm", ".pgm", ".pnm"))
        )
        if not names:
            raise DataInvalidError(f"class directory {cls_dir} contains no PNM images")
        for n in names:
            records.append(SampleRecord(os.path.join(cls, n), None, label, "", fruit))
    return DatasetManifest(records, {"source": root}, root)


def split_manifest(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Stratified train/val/test assignment.

    Per class, records are shuffled (Fisher-Yates over one SplitMix64 stream,
    class 0 first) and assigned floor(r_train*n) / floor(r_val*n) / remainder.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise InvalidArgumentError(f"ratios must be three non-negatives summing to 1, got {ratios}")
    rng = SplitMix64(seed)
    assignment: dict[int, str] = {}
    for label in range(len(LABEL_NAMES)):
        idx = [i for i, r in enumerate(manifest.records) if r.label == label]
        n = len(idx)
        if n < 3:
            raise DataInvalidError(
                f"class {LABEL_NAMES[label]!r} has {n} samples; need >= 3 to split"
            )
        rng.shuffle(idx)
        n_train = math.floor(ratios[0] * n)
        n_val = math.floor(ratios[1] * n)
        for j, i in enumerate(idx):
            assignment[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    records = [replace(r, split=assignment[i]) for i, r in enumerate(manifest.records)]
    provenance = dict(manifest.provenance)
    provenance.update({"split_seed": seed, "ratios": list(ratios)})
    return DatasetManifest(records, provenance, manifest.base_dir)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; rounds half away from zero."""
    if out_h < 1 or out_w < 1:
        raise InvalidArgumentError("output dimensions must be >= 1")
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(h, out_h)
    x0, x1, fx = axis_coords(w, out_w)
    a = arr.astype(np.float64)
    if arr.ndim == 2:
        top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
        bot = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
        out = top * (1 - fy)[:, None] + bot * fy[:, None]
    else:
        fy_, fx_ = fy[:, None, None], fx[None, :, None]
        top = a[y0][:, x0] * (1 - fx_) + a[y0][:, x1] * fx_
        bot = a[y1][:, x0] * (1 - fx_) + a[y1][:, x1] * fx_
        out = top * (1 - fy_) + bot * fy_
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def normalize_to_tensor(image: np.ndarray, dtype="f32") -> Tensor:
    """Channel-first tensor with values scaled to [0, 1]."""
    arr = np.asarray(image)
    np_dtype = DTYPES[dtype] if isinstance(dtype, str) else dtype
    if arr.ndim == 2:
        chw = arr[None, :, :]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        chw = arr.transpose(2, 0, 1)
    else:
        raise InvalidArgumentError(f"cannot normalize array of shape {arr.shape}")
    return Tensor((chw / 255.0).astype(np_dtype))


def load_batch(manifest: DatasetManifest, split: str, indices, image_size: int, dtype="f32"):
    """Load (rgb, sil, labels) for ``indices`` into the given split, resized
    to image_size and scaled to [0, 1]; order follows ``indices``."""
    records = manifest.split_records(split)
    np_dtype = DTYPES[dtype] if isinstance(dtype, str) else dtype
    rgbs, sils, labels = [], [], []
    for i in indices:
        if i < 0 or i >= len(records):
            raise InvalidArgumentError(f"index {i} out of range for split {split!r}")
        rec = records[i]
        if not rec.sil:
            raise DataInvalidError(f"record {rec.rgb!r} has no silhouette path")
        rgb = read_image(manifest.resolve(rec.rgb))
        sil = read_image(manifest.resolve(rec.sil))
        if rgb.ndim != 3:
            raise DataInvalidError(f"record {rec.rgb!r} is not an RGB image")
        if sil.ndim != 2:
            raise DataInvalidError(f"record {rec.sil!r} is not a grayscale image")
        rgbs.append(resize_bilinear(rgb, image_size, image_size).transpose(2, 0, 1))
        sils.append(resize_bilinear(sil, image_size, image_size)[None, :, :])
        labels.append(rec.label)
    rgb_arr = (np.stack(rgbs) / 255.0).astype(np_dtype)
    sil_arr = (np.stack(sils) / 255.0).astype(np_dtype)
    return Tensor(rgb_arr), Tensor(sil_arr), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticParams:
    image_size: int = 64
    per_class: int = 50
    bg_lum_range: tuple[float, float] = (200.0, 235.0)
    fruit_lum_range: tuple[float, float] = (110.0, 165.0)
    fruit_axes_frac: tuple[float, float] = (0.16, 0.36)
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_frac: tuple[float, float] = (0.03, 0.08)
    defect_contrast: float = 0.5
    corrupted_fraction: float = 0.0

    def __post_init__(self):
        if self.image_size < 16 or self.per_class < 1:
            raise InvalidArgumentError("image_size >= 16 and per_class >= 1 required")
        for lo, hi in (
            self.bg_lum_range,
            self.fruit_lum_range,
            self.fruit_axes_frac,
            self.blob_count_range,
            self.blob_radius_frac,
        ):
            if hi < lo:
                raise InvalidArgumentError("empty range in synthetic parameters")
        if not 0.0 < self.defect_contrast < 1.0:
            raise InvalidArgumentError("defect_contrast must lie in (0, 1)")
        if not 0.0 <= self.corrupted_fraction <= 1.0:
            raise InvalidArgumentError("corrupted_fraction must lie in [0, 1]")


# Defects are rendered at half the fruit luminance scaled down further by
# (1 - defect_contrast): always below a 0.5-relative darkness threshold, and
# approaching it (hardest RGB contrast) as defect_contrast -> 0.
_DEFECT_BASE = 0.5
# Total defect area is capped relative to the fruit so the mean interior
# luminance stays close to the fruit's.
_BLOB_AREA_CAP = 0.10


def _ellipse_mask(size: int, cx: float, cy: float, ax: float, ay: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0


def _fruit_color(rng: SplitMix64, params: SyntheticParams) -> np.ndarray:
    lum = rng.uniform(*params.fruit_lum_range)
    dr, dg, db = (rng.uniform(-25.0, 25.0) for _ in range(3))
    dl = 0.299 * dr + 0.587 * dg + 0.114 * db
    chans = np.array([lum + dr - dl, lum + dg - dl, lum + db - dl])
    return np.clip(np.floor(chans + 0.5), 20, 235).astype(np.uint8)


def _render_image(rng: SplitMix64, params: SyntheticParams, defective: bool,
                  corrupted: bool, corrupt_mode: str) -> np.ndarray:
    s = params.image_size
    scale = s / 64.0
    bg = int(np.floor(rng.uniform(*params.bg_lum_range) + 0.5))
    color = _fruit_color(rng, params)
    img = np.full((s, s, 3), bg, dtype=np.uint8)

    if corrupted and corrupt_mode == "tiny":
        ax = rng.uniform(3.0, 5.0) * scale
        ay = rng.uniform(3.0, 5.0) * scale
        cx = rng.uniform(ax + 2, s - 3 - ax)
        cy = rng.uniform(ay + 2, s - 3 - ay)
    elif corrupted:  # border-clipped
        ax = rng.uniform(0.25, 0.38) * s
        ay = rng.uniform(0.25, 0.38) * s
        edge = rng.randint(0, 3)
        pos = rng.uniform(0.3, 0.7) * s
        cx, cy = [(0.0, pos), (s - 1.0, pos), (pos, 0.0), (pos, s - 1.0)][edge]
    else:
        lo, hi = params.fruit_axes_frac
        ax = rng.uniform(lo, hi) * s
        ay = rng.uniform(lo, hi) * s
        cx = rng.uniform(ax + 2, s - 3 - ax)
        cy = rng.uniform(ay + 2, s - 3 - ay)

    fruit = _ellipse_mask(s, cx, cy, ax, ay)
    img[fruit] = color

    if defective and not corrupted:
        factor = _DEFECT_BASE * (1.0 - params.defect_contrast)
        defect_color = np.floor(color.astype(np.float64) * factor + 0.5).astype(np.uint8)
        budget = _BLOB_AREA_CAP * fruit.sum()
        margin = 3.5
        n_blobs = rng.randint(*params.blob_count_range)
        placed = 0
        for b in range(n_blobs):
            r_lo, r_hi = params.blob_radius_frac
            rx = max(2.0, rng.uniform(r_lo, r_hi) * s)
            ry = max(2.0, rng.uniform(r_lo, r_hi) * s)
            cap = max(2.0, min(ax, ay) - margin - 2.0)
            rx, ry = min(rx, cap), min(ry, cap)
            if placed == 0:
                shrink = math.sqrt(max(budget, 16.0) / max(math.pi * rx * ry, 1e-9))
                if shrink < 1.0:
                    rx, ry = max(2.0, rx * shrink), max(2.0, ry * shrink)
            if math.pi * rx * ry > budget and placed > 0:
                continue
            rmax = max(rx, ry)
            for _ in range(64):
                bx = cx + (2.0 * rng.next_double() - 1.0) * (ax - rmax - margin)
                by = cy + (2.0 * rng.next_double() - 1.0) * (ay - rmax - margin)
                safe_x = max(ax - rmax - margin, 1e-6)
                safe_y = max(ay - rmax - margin, 1e-6)
                if ((bx - cx) / safe_x) ** 2 + ((by - cy) / safe_y) ** 2 <= 1.0:
                    blob = _ellipse_mask(s, bx, by, rx, ry) & fruit
                    if blob.any():
                        img[blob] = defect_color
                        budget -= blob.sum()
                        placed += 1
                    break
    return img


def generate_synthetic(params: SyntheticParams, seed: int, out_dir) -> DatasetManifest:
    """Write a deterministic corpus of P6 images plus its manifest.

    Healthy images are a flat-colored ellipse on a brighter flat background;
    defective ones add darker elliptical blobs strictly inside the fruit.
    A ``corrupted_fraction`` tail per class produces images the refinement
    filter must reject (tiny fruit, or fruit clipped by the border); their
    file names carry a ``_corrupt`` suffix.
    """
    out_dir = os.path.abspath(out_dir)
    rng = SplitMix64(seed)
    records = []
    n_corrupt = int(params.corrupted_fraction * params.per_class + 0.5)
    for label, cls in enumerate(LABEL_NAMES):
        cls_dir = os.path.join(out_dir, cls)
        os.makedirs(cls_dir, exist_ok=True)
        for i in range(params.per_class):
            corrupted = i >= params.per_class - n_corrupt
            mode = "tiny" if i % 2 == 0 else "clipped"
            img = _render_image(rng, params, defective=(label == 1),
                                corrupted=corrupted, corrupt_mode=mode)
            stem = f"{cls}_{i:04d}" + ("_corrupt" if corrupted else "")
            rel = os.path.join(cls, stem + ".ppm")
            write_image(os.path.join(out_dir, rel), img)
            records.append(SampleRecord(rel, None, label, "", "synthetic"))
    manifest = DatasetManifest(
        records,
        {
            "generator": "synthetic",
            "seed": seed,
            "per_class": params.per_class,
            "image_size": params.image_size,
            "defect_contrast": params.defect_contrast,
            "corrupted_fraction": params.corrupted_fraction,
        },
        out_dir,
    )
    write_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest
