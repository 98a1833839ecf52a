"""Tissue segmentation, patch tiling and a toy patch featurizer.

Works on flat RGB rasters already at the desired processing resolution.
Pyramidal slide formats are not read here; convert or downsample first.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
FEATURE_DIMS = (16, 64, 256)


class DegenerateHistogramError(ValueError):
    pass


class FeatureConfigError(ValueError):
    pass


@dataclass
class RasterImage:
    pixels: np.ndarray  # (height, width, 3) uint8
    magnification: float = 40.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be a (height, width, 3) uint8 array")
        if self.magnification <= 0:
            raise ValueError("magnification must be positive")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def read_raster(path: str | Path, magnification: float = 40.0) -> RasterImage:
    """Read a PPM/PNG (or anything Pillow opens) as 8-bit RGB."""
    with Image.open(path) as im:
        return RasterImage(np.array(im.convert("RGB")), magnification)


def write_ppm(img: RasterImage | np.ndarray, path: str | Path) -> None:
    """P6 for RGB arrays, P5 for single-channel (e.g. masks as 0/255)."""
    arr = img.pixels if isinstance(img, RasterImage) else np.asarray(img)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    arr = arr.astype(np.uint8)
    magic = b"P6" if arr.ndim == 3 else b"P5"
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(arr).tobytes())


def downsample(img: RasterImage, factor: int) -> RasterImage:
    """Block-mean downsampling by an integer factor (partial edge blocks averaged too)."""
    if factor < 1:
        raise ValueError("downsample factor must be >= 1")
    if factor == 1:
        return img
    h, w = img.height, img.width
    hh, ww = -(-h // factor), -(-w // factor)
    padded = np.pad(img.pixels.astype(np.float64),
                    ((0, hh * factor - h), (0, ww * factor - w), (0, 0)), mode="edge")
    blocks = padded.reshape(hh, factor, ww, factor, 3).mean(axis=(1, 3))
    return RasterImage(np.floor(blocks + 0.5).astype(np.uint8), img.magnification / factor)


def rgb_to_saturation(img: RasterImage) -> np.ndarray:
    """HSV saturation scaled to 0..255, rounded half up; 0 where max is 0."""
    px = img.pixels.astype(np.int64)
    mx = px.max(axis=2)
    mn = px.min(axis=2)
    safe = np.where(mx == 0, 1, mx)
    # round(255 * (mx - mn) / mx) in integer arithmetic
    sat = (510 * (mx - mn) + safe) // (2 * safe)
    return np.where(mx == 0, 0, sat).astype(np.uint8)


def otsu_threshold(hist) -> int:
    """Threshold t maximising between-class variance of {<= t} vs {> t}.

    Uses exact integer arithmetic; ties go to the smallest t.
    """
    h = [int(c) for c in hist]
    if len(h) != 256 or any(c < 0 for c in h):
        raise ValueError("expected 256 non-negative bin counts")
    if sum(1 for c in h if c > 0) < 2:
        raise DegenerateHistogramError("histogram needs at least two non-empty bins")
    total = sum(h)
    total_sum = sum(i * c for i, c in enumerate(h))
    best_t, best_num, best_den = -1, -1, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += h[t]
        s0 += t * h[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # variance ~ (N*S0 - n0*S)^2 / (n0*n1); common 1/N^2 dropped
        num = (total * s0 - n0 * total_sum) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


@dataclass
class SegParams:
    median_kernel: int = 9
    close_kernel: int = 5
    sat_threshold: int | str = "auto"
    area_tissue: float = 80.0
    area_hole: float = 10.0
    max_holes: int = 20
    ref_patch: int = 256

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError("median_kernel must be a positive odd size")
        if self.close_kernel < 1:
            raise ValueError("close_kernel must be >= 1")
        if self.area_tissue < 0 or self.area_hole < 0:
            raise ValueError("area thresholds must be non-negative")
        if self.max_holes < 0:
            raise ValueError("max_holes must be non-negative")
        if self.sat_threshold != "auto" and not 0 <= int(self.sat_threshold) <= 255:
            raise ValueError("sat_threshold must be 'auto' or 0..255")

    @property
    def ref_area(self) -> float:
        return (self.ref_patch / 2) ** 2


@dataclass
class Region:
    area: int  # tissue pixels after hole handling
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive)
    holes: list[tuple[int, tuple[int, int, int, int]]] = field(default_factory=list)


@dataclass
class TissueMask:
    bits: np.ndarray  # (height, width) bool
    regions: list[Region]
    threshold: int | None = None

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def status(self) -> str:
        return "empty" if not self.regions else "ok"


def _bbox(sl: tuple[slice, slice]) -> tuple[int, int, int, int]:
    return sl[1].start, sl[0].start, sl[1].stop, sl[0].stop


def segment_tissue(img: RasterImage, params: SegParams | None = None) -> TissueMask:
    p = params or SegParams()
    if img.width == 0 or img.height == 0:
        raise ValueError("empty image")
    sat = rgb_to_saturation(img)
    blurred = ndimage.median_filter(sat, size=p.median_kernel, mode="nearest")
    if p.sat_threshold == "auto":
        hist = np.bincount(blurred.ravel(), minlength=256)
        try:
            thr = otsu_threshold(hist)
        except DegenerateHistogramError:
            # a single grey level: nothing stands out from it
            thr = int(blurred.flat[0])
    else:
        thr = int(p.sat_threshold)
    binary = blurred > thr
    if p.close_kernel > 1:
        binary = ndimage.grey_closing(binary.astype(np.uint8), size=(p.close_kernel, p.close_kernel),
                                      mode="nearest").astype(bool)

    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    min_area = p.area_tissue * p.ref_area
    min_hole = p.area_hole * p.ref_area
    bits = np.zeros_like(binary)
    regions = []
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None or areas[idx] < min_area:
            continue
        comp = labels[sl] == idx
        filled = ndimage.binary_fill_holes(comp, structure=FOUR_CONNECTED)
        hole_lab, n_holes = ndimage.label(filled & ~comp, structure=FOUR_CONNECTED)
        hole_areas = np.bincount(hole_lab.ravel(), minlength=n_holes + 1)
        hole_slices = ndimage.find_objects(hole_lab)
        candidates = [h for h in range(1, n_holes + 1) if hole_areas[h] >= min_hole]
        # largest first, lower label on ties
        candidates.sort(key=lambda h: (-hole_areas[h], h))
        kept = candidates[:p.max_holes]
        region_bits = filled.copy()
        holes = []
        for h in kept:
            region_bits[hole_lab == h] = False
            hs = hole_slices[h - 1]
            x0, y0, x1, y1 = _bbox(hs)
            holes.append((int(hole_areas[h]), (x0 + sl[1].start, y0 + sl[0].start,
                                               x1 + sl[1].start, y1 + sl[0].start)))
        bits[sl] |= region_bits
        regions.append(Region(area=int(region_bits.sum()), bbox=_bbox(sl), holes=holes))
    mask = TissueMask(bits=bits, regions=regions, threshold=thr)
    if not regions:
        log.warning("segmentation found no tissue")
    return mask


def mask_as_image(mask: TissueMask) -> RasterImage:
    """Tissue painted saturated red on white."""
    px = np.full((mask.height, mask.width, 3), 255, dtype=np.uint8)
    px[mask.bits] = (255, 0, 0)
    return RasterImage(px)


@dataclass
class PatchGrid:
    patch_size: int
    stride: int
    coords: np.ndarray  # (n, 2) x, y top-left at level 0
    coverage_min: float = 0.5

    def __len__(self) -> int:
        return len(self.coords)


def _mask_at_image_scale(bits: np.ndarray, width: int, height: int) -> np.ndarray:
    mh, mw = bits.shape
    if (mh, mw) == (height, width):
        return bits
    factor = -(-width // mw)
    if -(-width // factor) != mw or -(-height // factor) != mh:
        raise ValueError(f"mask {mw}x{mh} is not an integer downsample of {width}x{height}")
    return np.repeat(np.repeat(bits, factor, axis=0), factor, axis=1)[:height, :width]


def extract_patches(img: RasterImage, mask: TissueMask | np.ndarray, patch_size: int = 256,
                    stride: int | None = None, coverage_min: float = 0.5) -> PatchGrid:
    """Grid cells from (0, 0) whose mask coverage reaches ``coverage_min``.

    ``mask`` may be at a lower resolution (integer downsample of the image);
    it is upsampled by pixel replication first.
    """
    stride = patch_size if stride is None else stride
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be positive")
    if patch_size > min(img.width, img.height):
        raise ValueError("patch_size exceeds the image")
    bits = mask.bits if isinstance(mask, TissueMask) else np.asarray(mask, dtype=bool)
    bits = _mask_at_image_scale(bits, img.width, img.height)
    integral = np.zeros((img.height + 1, img.width + 1), dtype=np.int64)
    integral[1:, 1:] = bits.cumsum(axis=0).cumsum(axis=1)
    need = coverage_min * patch_size * patch_size
    coords = []
    for y in range(0, img.height - patch_size + 1, stride):
        for x in range(0, img.width - patch_size + 1, stride):
            inside = (integral[y + patch_size, x + patch_size] - integral[y, x + patch_size]
                      - integral[y + patch_size, x] + integral[y, x])
            if inside > 0 and inside >= need:
                coords.append((x, y))
    return PatchGrid(patch_size=patch_size, stride=stride,
                     coords=np.array(coords, dtype=np.int64).reshape(-1, 2),
                     coverage_min=coverage_min)


def write_grid_csv(grid: PatchGrid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y"])
        writer.writerows(grid.coords.tolist())


def read_grid_csv(path: str | Path, patch_size: int = 256) -> PatchGrid:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["x", "y"]:
            raise ValueError(f"{path}: expected header x,y")
        coords = [(int(x), int(y)) for x, y in reader]
    return PatchGrid(patch_size=patch_size, stride=patch_size,
                     coords=np.array(coords, dtype=np.int64).reshape(-1, 2))


def _block_hist(values: np.ndarray, bins: int, top: float) -> np.ndarray:
    idx = np.minimum((values * bins / top).astype(np.int64), bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins).astype(np.float64)
    return counts / counts.sum()


def patch_features(patch: np.ndarray, d: int) -> np.ndarray:
    """Histogram descriptor of one (s, s, 3) uint8 patch."""
    if d not in FEATURE_DIMS:
        raise FeatureConfigError(f"feature dimension {d} not in {FEATURE_DIMS}")
    bins = d // 4
    parts = [_block_hist(patch[..., c].astype(np.float64), bins, 256.0) for c in range(3)]
    gray = patch.astype(np.float64).mean(axis=2)
    # forward differences, zero at the far edge
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :-1] = gray[:, 1:] - gray[:, :-1]
    gy[:-1, :] = gray[1:, :] - gray[:-1, :]
    mag = np.hypot(gx, gy)
    parts.append(_block_hist(mag, bins, 255.0 * np.sqrt(2.0) + 1e-9))
    return np.concatenate(parts)


def toy_features(img: RasterImage, grid: PatchGrid, d: int = 64) -> np.ndarray:
    if d not in FEATURE_DIMS:
        raise FeatureConfigError(f"feature dimension {d} not in {FEATURE_DIMS}")
    s = grid.patch_size
    out = np.zeros((len(grid), d))
    for i, (x, y) in enumerate(grid.coords):
        out[i] = patch_features(img.pixels[y:y + s, x:x + s], d)
    return out
