"""Blue-to-red attention overlays on the slide footprint."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image

from .slideprep import RasterImage, downsample, write_ppm


class HeatmapInputError(ValueError):
    pass


@dataclass(frozen=True)
class HeatmapSpec:
    downsample: int = 1
    alpha: float = 0.4
    background: str = "white"  # or "source"

    def __post_init__(self):
        if int(self.downsample) != self.downsample or self.downsample < 1:
            raise HeatmapInputError("downsample must be an integer >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise HeatmapInputError("alpha must lie in [0, 1]")
        if self.background not in ("white", "source"):
            raise HeatmapInputError("background must be 'white' or 'source'")

    def output_size(self, slide_w: int, slide_h: int) -> tuple[int, int]:
        return math.ceil(slide_w / self.downsample), math.ceil(slide_h / self.downsample)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def colormap(score) -> tuple[int, int, int]:
    """Linear ramp from blue (0) to red (1); out-of-range scores are clamped."""
    s = float(score)
    if math.isnan(s):
        raise HeatmapInputError("attention score is NaN")
    # exact rationals: 255 * s in float64 can round up onto a .5 tie (s = 0.3)
    q = Fraction(min(1.0, max(0.0, s)))
    half = Fraction(1, 2)
    return math.floor(255 * q + half), 0, math.floor(255 * (1 - q) + half)


def normalize_attention(attention) -> np.ndarray:
    """Per-slide min-max scaling; a constant vector maps to 0.5 everywhere."""
    a = np.asarray(attention, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise HeatmapInputError("attention is empty")
    if not np.all(np.isfinite(a)):
        bad = int(np.flatnonzero(~np.isfinite(a))[0])
        raise HeatmapInputError(f"attention[{bad}] is not finite")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 0.5)
    return (a - lo) / (hi - lo)


def blend(color, background, alpha: float) -> np.ndarray:
    """round_half_up(alpha * color + (1 - alpha) * background), per channel."""
    c = np.asarray(color, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    return _round_half_up(alpha * c + (1.0 - alpha) * bg).astype(np.uint8)


def _background(spec: HeatmapSpec, out_w: int, out_h: int, source: RasterImage | None) -> np.ndarray:
    if spec.background == "white" or source is None:
        if spec.background == "source":
            raise HeatmapInputError("background 'source' needs a source raster")
        return np.full((out_h, out_w, 3), 255, dtype=np.uint8)
    if (source.width, source.height) == (out_w, out_h):
        return source.pixels.copy()
    small = downsample(source, spec.downsample)
    if (small.width, small.height) != (out_w, out_h):
        raise HeatmapInputError(
            f"source raster {source.width}x{source.height} matches neither the slide nor the output size")
    return small.pixels.copy()


def render(coords, attention, slide_w: int, slide_h: int, spec: HeatmapSpec | None = None,
           patch_size: int = 256, source: RasterImage | None = None) -> RasterImage:
    """Paint every patch footprint with its colour blended over the background.

    Patches are drawn in ascending attention order so that where footprints
    overlap the more attended patch ends up on top.
    """
    spec = spec or HeatmapSpec()
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    att = np.asarray(attention, dtype=np.float64).reshape(-1)
    if len(coords) != len(att) or len(att) == 0:
        raise HeatmapInputError(f"{len(coords)} coords vs {len(att)} attention values")
    if patch_size < 1:
        raise HeatmapInputError("patch_size must be positive")
    for i, (x, y) in enumerate(coords):
        if not (0 <= x < slide_w and 0 <= y < slide_h):
            raise HeatmapInputError(f"patch {i} at ({x}, {y}) lies outside the {slide_w}x{slide_h} slide")
    norm = normalize_attention(att)
    out_w, out_h = spec.output_size(slide_w, slide_h)
    canvas = _background(spec, out_w, out_h, source)
    base = canvas.copy()
    ds = spec.downsample
    for i in np.argsort(norm, kind="stable"):
        x, y = coords[i]
        x0, y0 = x // ds, y // ds
        x1 = min(out_w, -(-(x + patch_size) // ds))
        y1 = min(out_h, -(-(y + patch_size) // ds))
        color = np.array(colormap(norm[i]), dtype=np.float64)
        canvas[y0:y1, x0:x1] = blend(color, base[y0:y1, x0:x1], spec.alpha)
    return RasterImage(canvas)


def write_heatmap(image: RasterImage, coords, attention, out_dir: str | Path, stem: str = "heatmap",
                  png: bool = False) -> dict[str, Path]:
    """Write ``<stem>.ppm`` (and optionally ``.png``) plus the ``<stem>.csv`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"ppm": out / f"{stem}.ppm", "csv": out / f"{stem}.csv"}
    write_ppm(image, paths["ppm"])
    if png:
        paths["png"] = out / f"{stem}.png"
        Image.fromarray(image.pixels).save(paths["png"])
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    att = np.asarray(attention, dtype=np.float64).reshape(-1)
    norm = normalize_attention(att)
    with open(paths["csv"], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "attention_raw", "attention_norm"])
        for (x, y), raw, s in zip(coords, att, norm):
            writer.writerow([int(x), int(y), repr(float(raw)), repr(float(s))])
    return paths
