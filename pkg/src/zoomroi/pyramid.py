"""Quadtree tile pyramid over an RGB raster.

An image is conceptually padded with white up to a square extent of
``tile_size * 2**max_depth`` pixels (anchored top-left), so that every tile
splits into exactly four children. Tiles are addressed by
``(level, col, row)``: level 0 is a single tile covering the whole extent
and each level doubles the grid in both directions. Rendering box-filters
the addressed square region down to ``tile_size`` pixels, which makes a
tile at ``max_depth`` a 1:1 crop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from PIL import Image

from ._common import load_json

# Quadrant actions in canonical order. The integer is the action id and the
# canonical tie-break order everywhere.
NW, NE, SW, SE = 0, 1, 2, 3
ACTIONS = (NW, NE, SW, SE)
ACTION_NAMES = ("NW", "NE", "SW", "SE")
_COL_OFFSET = (0, 1, 0, 1)
_ROW_OFFSET = (0, 0, 1, 1)

PAD_VALUE = 255

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

FEATURE_GRID = 8
FEATURE_DIM = FEATURE_GRID * FEATURE_GRID * 3 + 6
FEATURE_LAYOUT = "grid8+moments/1"


class TileAddr(NamedTuple):
    level: int
    col: int
    row: int


def max_depth_for(width, height, tile_size):
    """Smallest depth whose leaf grid covers the image at 1:1 scale."""
    n_tiles = -(-max(width, height) // tile_size)
    return (n_tiles - 1).bit_length()


def child(addr, action, max_depth=None):
    """Address of the quadrant child of ``addr``.

    ``max_depth`` is optional; when given, descending past it raises
    ValueError. The address arithmetic itself is unbounded.
    """
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    if max_depth is not None and addr.level >= max_depth:
        raise ValueError(f"tile {addr} is already at max depth {max_depth}")
    return TileAddr(
        addr.level + 1,
        2 * addr.col + _COL_OFFSET[action],
        2 * addr.row + _ROW_OFFSET[action],
    )


@dataclass(frozen=True)
class Tile:
    """A rendered tile.

    ``pixels`` is float64 of shape (tile_size, tile_size, 3) in [0, 255];
    values are exact box-filter means, so padding pixels are exactly 255.
    ``valid_w``/``valid_h`` count the output pixels that intersect the real
    image (the rest is pure padding).
    """

    addr: TileAddr
    pixels: np.ndarray
    valid_w: int
    valid_h: int


@dataclass(frozen=True)
class TilePyramid:
    """Tile addressing and rendering over one raster image."""

    pixels: np.ndarray  # (H, W, 3) uint8
    tile_size: int
    max_depth: int
    extent: int

    @classmethod
    def from_array(cls, pixels, tile_size=64):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {pixels.shape}")
        if pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise ValueError("image has a zero dimension")
        if int(tile_size) != tile_size or tile_size < 4:
            raise ValueError(f"tile_size must be an integer >= 4, got {tile_size}")
        tile_size = int(tile_size)
        depth = max_depth_for(pixels.shape[1], pixels.shape[0], tile_size)
        return cls(
            pixels=pixels.astype(np.uint8),
            tile_size=tile_size,
            max_depth=depth,
            extent=tile_size * (1 << depth),
        )

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def grid_size(self, level):
        return 1 << level

    def check_addr(self, addr):
        level, col, row = addr
        if not 0 <= level <= self.max_depth:
            raise ValueError(f"level {level} outside [0, {self.max_depth}]")
        n = self.grid_size(level)
        if not (0 <= col < n and 0 <= row < n):
            raise ValueError(f"tile ({level}, {col}, {row}) outside the {n}x{n} grid")

    def region(self, addr):
        """Extent-space square covered by ``addr`` as (x0, y0, size)."""
        self.check_addr(addr)
        size = self.extent >> addr.level
        return addr.col * size, addr.row * size, size

    def child(self, addr, action):
        self.check_addr(addr)
        return child(addr, action, max_depth=self.max_depth)

    def render_tile(self, addr):
        """Render ``addr`` to a tile_size square via an exact box filter.

        The region is an integer multiple of the output size, so each output
        pixel is the mean of an f x f block; blocks are accumulated in int64
        and divided once, making the result bit-deterministic. Out-of-image
        pixels contribute the white padding value.
        """
        x0, y0, size = self.region(addr)
        t = self.tile_size
        f = size // t
        ox = min(self.width - x0, size)
        oy = min(self.height - y0, size)
        sums = np.zeros((t, t, 3), dtype=np.int64)
        counts = np.zeros((t, t), dtype=np.int64)
        valid_w = valid_h = 0
        if ox > 0 and oy > 0:
            sub = self.pixels[y0 : y0 + oy, x0 : x0 + ox].astype(np.int64)
            col_idx = np.arange(0, ox, f)
            row_idx = np.arange(0, oy, f)
            block = np.add.reduceat(sub, row_idx, axis=0)
            block = np.add.reduceat(block, col_idx, axis=1)
            wcnt = np.minimum(ox - col_idx, f)
            hcnt = np.minimum(oy - row_idx, f)
            valid_w = len(col_idx)
            valid_h = len(row_idx)
            sums[:valid_h, :valid_w] = block
            counts[:valid_h, :valid_w] = hcnt[:, None] * wcnt[None, :]
        pad = (f * f - counts)[:, :, None] * PAD_VALUE
        pixels = (sums + pad) / float(f * f)
        return Tile(addr=TileAddr(*addr), pixels=pixels, valid_w=valid_w, valid_h=valid_h)


def load_slide(path, tile_size=64):
    """Load a PNG (RGB or RGBA; alpha dropped) into a TilePyramid."""
    with Image.open(path) as img:
        if img.mode == "RGBA":
            arr = np.asarray(img)[:, :, :3]
        else:
            arr = np.asarray(img.convert("RGB"))
    return TilePyramid.from_array(arr, tile_size=tile_size)


def normalize(tile, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Per-channel (x/255 - mean) / std of a tile's pixels."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (3,) or std.shape != (3,):
        raise ValueError("mean and std must have 3 channels")
    if np.any(std == 0):
        raise ValueError("std components must be nonzero")
    return (tile.pixels / 255.0 - mean) / std


def denormalize(values, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Inverse of :func:`normalize`, back to the [0, 255] scale."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return (np.asarray(values) * std + mean) * 255.0


@lru_cache(maxsize=None)
def _pool_matrix(n_in, n_out):
    # Area-weighted 1-D pooling weights with exact rational overlaps; row o
    # averages input cells over [o*n_in/n_out, (o+1)*n_in/n_out).
    step = Fraction(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo = o * step
        hi = lo + step
        for i in range(math.floor(lo), math.ceil(hi)):
            ov = min(hi, Fraction(i + 1)) - max(lo, Fraction(i))
            if ov > 0:
                m[o, i] = float(ov / step)
    return m


def features(tile, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Fixed-length descriptor of a tile.

    Layout (:data:`FEATURE_LAYOUT`): the normalized pixels box-downsampled
    to an 8x8x3 grid (row-major, channels last; 192 values), then the 3
    per-channel means and 3 per-channel population stds of the full
    normalized tile. Padding pixels participate as the background value.
    """
    norm = normalize(tile, mean=mean, std=std)
    pool = _pool_matrix(norm.shape[0], FEATURE_GRID)
    pooled = np.einsum("oi,ijc,pj->opc", pool, norm, pool)
    mu = norm.mean(axis=(0, 1))
    sd = norm.std(axis=(0, 1))
    return np.concatenate([pooled.ravel(), mu, sd])


class TileFeaturizer:
    """Renders and featurizes tiles of one pyramid, caching by address."""

    def __init__(self, pyramid, mean=IMAGENET_MEAN, std=IMAGENET_STD):
        self.pyramid = pyramid
        self.mean = tuple(float(v) for v in mean)
        self.std = tuple(float(v) for v in std)
        self._cache = {}

    @property
    def n_features(self):
        return FEATURE_DIM

    def __call__(self, addr):
        addr = TileAddr(*addr)
        got = self._cache.get(addr)
        if got is None:
            tile = self.pyramid.render_tile(addr)
            got = features(tile, mean=self.mean, std=self.std)
            self._cache[addr] = got
        return got


@dataclass(frozen=True)
class FeatureConfig:
    """Pyramid and feature settings, loadable from a JSON config file."""

    tile_size: int = 64
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    feature_layout: str = FEATURE_LAYOUT

    def __post_init__(self):
        if self.tile_size < 4:
            raise ValueError("tile_size must be >= 4")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std must have 3 channels")
        if any(v == 0 for v in self.std):
            raise ValueError("std components must be nonzero")
        if self.feature_layout != FEATURE_LAYOUT:
            raise ValueError(f"unknown feature layout {self.feature_layout!r}")

    @classmethod
    def from_dict(cls, data):
        known = {"tile_size", "mean", "std", "feature_layout"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("mean", "std"):
            if key in kwargs:
                kwargs[key] = tuple(float(v) for v in kwargs[key])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(load_json(path))

    def to_dict(self):
        return {
            "tile_size": self.tile_size,
            "mean": list(self.mean),
            "std": list(self.std),
            "feature_layout": self.feature_layout,
        }
