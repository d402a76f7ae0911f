"""Grayscale image preprocessing: CLAHE, bilinear resize and affine augmentation.

Images are 2-D numpy arrays indexed ``[row, col]``: ``uint8`` on ingest and
floats in ``[0, 1]`` after :func:`to_unit`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import RngState

NBINS = 256

ROTATION_RANGE = 10.0
SHIFT_RANGE = 0.1
SCALE_RANGE = (0.95, 1.05)
APPLY_PROB = 0.8


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------- CLAHE

def _tile_edges(size: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * size) // tiles


def clip_histogram(hist: np.ndarray, clip: int) -> np.ndarray:
    """Clip integer histogram bins at ``clip`` and hand the excess back out.

    Excess is redistributed evenly over bins still below the limit, repeating
    until it is used up; the leftover that cannot be split evenly goes one
    count per bin at evenly spaced positions. If every bin is already at the
    limit the excess is spread over all bins.
    """
    h = np.minimum(hist, clip).astype(np.int64)
    excess = int(hist.sum() - h.sum())
    while excess > 0:
        room = clip - h
        open_bins = np.flatnonzero(room > 0)
        if open_bins.size == 0:
            h += excess // h.size
            rest = excess % h.size
            if rest:
                h[np.linspace(0, h.size - 1, rest).astype(int)] += 1
            break
        share = excess // open_bins.size
        if share == 0:
            picks = open_bins[np.linspace(0, open_bins.size - 1, excess).astype(int)]
            h[picks] += 1
            break
        add = np.minimum(room[open_bins], share)
        h[open_bins] += add
        excess -= int(add.sum())
    return h


def clip_count(clip_limit: float, npix: int) -> float:
    """Absolute per-bin limit for a tile with ``npix`` pixels."""
    if math.isinf(clip_limit):
        return math.inf
    return max(1, int(clip_limit * npix / NBINS))


def tile_mappings(img: np.ndarray, tiles=(8, 8), clip_limit: float = 2.0):
    """Per-tile lookup tables ``[ty, tx, 256]`` plus tile-center coordinates.

    Images whose sides are not multiples of the tile grid are reflect-padded
    at the bottom and right first; centers are in the padded coordinates,
    which coincide with the original ones for every real pixel.
    """
    img = _check_image(img)
    if img.dtype != np.uint8:
        raise ValueError(f"CLAHE expects uint8 pixels, got {img.dtype}")
    tx, ty = tiles
    if tx < 1 or ty < 1:
        raise ValueError("tile counts must be >= 1")
    if not clip_limit > 0:
        raise ValueError("clip_limit must be > 0")
    h, w = img.shape
    if h < ty or w < tx:
        raise ValueError(f"image {w}x{h} is smaller than the {tx}x{ty} tile grid")
    # reflect-pad bottom/right to a whole number of equal tiles so every tile
    # has the same pixel count and clip limit
    img = np.pad(img, ((0, -h % ty), (0, -w % tx)), mode="reflect")
    ey, ex = _tile_edges(img.shape[0], ty), _tile_edges(img.shape[1], tx)
    luts = np.empty((ty, tx, NBINS), dtype=np.uint8)
    for i in range(ty):
        for j in range(tx):
            tile = img[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=NBINS)
            limit = clip_count(clip_limit, tile.size)
            if not math.isinf(limit):
                hist = clip_histogram(hist, int(limit))
            cdf = np.cumsum(hist)
            # round(255 * cdf / n), halves rounded up, in exact integer arithmetic
            luts[i, j] = np.minimum((510 * cdf + tile.size) // (2 * tile.size), 255).astype(np.uint8)
    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    cx = (ex[:-1] + ex[1:] - 1) / 2.0
    return luts, cy, cx


def _interp_index(coords: np.ndarray, centers: np.ndarray):
    hi = np.searchsorted(centers, coords, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        wt = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1), 0.0)
    return lo, hi, np.clip(wt, 0.0, 1.0)


def clahe(img: np.ndarray, tiles=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast limited adaptive histogram equalization of a uint8 image.

    ``tiles`` is ``(tiles_x, tiles_y)``; ``clip_limit`` is a multiple of the
    uniform bin height (tile pixels / 256), ``math.inf`` disables clipping.
    Each pixel blends the four nearest tile mappings bilinearly; pixels
    outside the outermost tile centers use the nearest one or two tiles.
    """
    luts, cy, cx = tile_mappings(img, tiles, clip_limit)
    h, w = img.shape
    y0, y1, wy = _interp_index(np.arange(h, dtype=np.float64), cy)
    x0, x1, wx = _interp_index(np.arange(w, dtype=np.float64), cx)
    luts = luts.astype(np.float64)
    Y0, Y1, WY = y0[:, None], y1[:, None], wy[:, None]
    X0, X1, WX = x0[None, :], x1[None, :], wx[None, :]
    top0, top1 = luts[Y0, X0, img], luts[Y0, X1, img]
    bot0, bot1 = luts[Y1, X0, img], luts[Y1, X1, img]
    top = top0 + WX * (top1 - top0)
    bot = bot0 + WX * (bot1 - bot0)
    out = top + WY * (bot - top)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- resize

def _axis_coords(n_out: int, n_in: int):
    if n_out == n_in:
        idx = np.arange(n_in)
        return idx, idx, np.zeros(n_in)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize(img: np.ndarray, target=(128, 128)) -> np.ndarray:
    """Bilinear resize to ``target = (height, width)`` with half-pixel centers.

    Returns float64; same-size resize returns the input values unchanged.
    """
    img = _check_image(img).astype(np.float64)
    th, tw = target
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {target}")
    r0, r1, fr = _axis_coords(th, img.shape[0])
    c0, c1, fc = _axis_coords(tw, img.shape[1])
    top = img[r0][:, c0] + fc[None, :] * (img[r0][:, c1] - img[r0][:, c0])
    bot = img[r1][:, c0] + fc[None, :] * (img[r1][:, c1] - img[r1][:, c0])
    return top + fr[:, None] * (bot - top)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float = 0.0
    shift_frac: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    apply: bool = True

    def __post_init__(self):
        if not -ROTATION_RANGE <= self.rotation_deg <= ROTATION_RANGE:
            raise ValueError(f"rotation {self.rotation_deg} outside +/-{ROTATION_RANGE} degrees")
        if len(self.shift_frac) != 2 or any(abs(s) > SHIFT_RANGE for s in self.shift_frac):
            raise ValueError(f"shift {self.shift_frac} outside +/-{SHIFT_RANGE}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")
        object.__setattr__(self, "shift_frac", tuple(float(s) for s in self.shift_frac))


def draw_augment_params(rng: RngState) -> AugmentParams:
    g = rng.generator
    apply = bool(g.random() < APPLY_PROB)
    rot = float(g.uniform(-ROTATION_RANGE, ROTATION_RANGE))
    dx, dy = (float(v) for v in g.uniform(-SHIFT_RANGE, SHIFT_RANGE, size=2))
    scale = float(g.uniform(*SCALE_RANGE))
    return AugmentParams(rot, (dx, dy), scale, apply)


def sample_bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                    fill: float = 0.0) -> np.ndarray:
    """Bilinear lookup at fractional ``(rows, cols)``; out-of-image taps read ``fill``."""
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr, fc = rows - r0, cols - c0

    def tap(r, c):
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        return np.where(ok, img[np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)], fill)

    a, b = tap(r0, c0), tap(r0, c0 + 1)
    c, d = tap(r0 + 1, c0), tap(r0 + 1, c0 + 1)
    top = a + fc * (b - a)
    bot = c + fc * (d - c)
    return top + fr * (bot - top)


def augment(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotate about the center, scale about the center, then shift; one resampling pass.

    Positive rotation turns the image counter-clockwise as displayed; positive
    shifts move content right/down by a fraction of width/height. Pixels
    mapped from outside the source are 0.
    """
    img = _check_image(img)
    if not params.apply:
        return img.copy()
    src = img.astype(np.float64)
    h, w = src.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(params.rotation_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    dx, dy = params.shift_frac[0] * w, params.shift_frac[1] * h
    rr, cc_ = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                          indexing="ij")
    # invert out = c + s * R (p - c) + t
    u = (cc_ - cc - dx) / params.scale
    v = (rr - cr - dy) / params.scale
    # R rotates counter-clockwise on screen (rows grow downward); R^-1 = R^T
    src_c = cos * u - sin * v + cc
    src_r = sin * u + cos * v + cr
    out = sample_bilinear(src, src_r, src_c, 0.0)
    lo, hi = min(0.0, float(src.min())), float(src.max())
    return np.clip(out, lo, hi)


# ---------------------------------------------------------------- I/O

def read_image(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG or binary PGM into a uint8 array."""
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "1"):
            raise ValueError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
        return np.asarray(im.convert("L"), dtype=np.uint8).copy()


def write_image(path, img: np.ndarray) -> Path:
    """Write uint8 (or unit-interval float) image as PNG or PGM, chosen by suffix."""
    path = Path(path)
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    fmt = {".png": "PNG", ".pgm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image suffix {path.suffix!r}")
    Image.fromarray(arr, mode="L").save(path, format=fmt)
    return path


def to_unit(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


def preprocess(img: np.ndarray, size=(128, 128), tiles=(8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """CLAHE on the original image, then resize, returned in [0, 1]."""
    return np.clip(resize(clahe(img, tiles, clip_limit), size) / 255.0, 0.0, 1.0)
