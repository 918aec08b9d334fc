"""Ground-truth reward maps: exact per-tile cancer pixel fractions.

Counts are integers at every level, computed once at the leaf grid and
summed upward, so a parent's counts are exactly the sum of its four
children and no resampling error can creep in. A tile's reward is
``cancer_px / in_image_px``, with reward 0 for fully padded tiles.
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .pyramid import ACTIONS, TileAddr, child

CSV_HEADER = "level,col,row,cancer_px,in_image_px"


def load_mask(path, expected_size=None, threshold=2):
    """Load a mask PNG into a boolean cancer raster (True = cancer).

    The image is converted to 8-bit grayscale and thresholded: pixels with
    value < threshold count as cancer. ``expected_size`` is (width, height)
    of the slide the mask must match.
    """
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    if expected_size is not None:
        width, height = expected_size
        if arr.shape != (height, width):
            raise ValueError(
                f"mask is {arr.shape[1]}x{arr.shape[0]}, expected {width}x{height}"
            )
    return arr < threshold


class RewardMap:
    """Per-tile integer counts for every level of one pyramid."""

    def __init__(self, max_depth, levels):
        if len(levels) != max_depth + 1:
            raise ValueError("need one (cancer, in_image) grid per level")
        self.max_depth = max_depth
        self.levels = [
            (np.asarray(c, dtype=np.int64), np.asarray(i, dtype=np.int64))
            for c, i in levels
        ]
        for lvl, (c, i) in enumerate(self.levels):
            n = 1 << lvl
            if c.shape != (n, n) or i.shape != (n, n):
                raise ValueError(f"level {lvl} grids must be {n}x{n}")

    def cancer_px(self, addr):
        level, col, row = addr
        return int(self.levels[level][0][row, col])

    def in_image_px(self, addr):
        level, col, row = addr
        return int(self.levels[level][1][row, col])

    def reward(self, addr):
        denom = self.in_image_px(addr)
        if denom == 0:
            return 0.0
        return self.cancer_px(addr) / denom

    def valid_children(self, addr):
        """Actions whose child tile overlaps the real image, in NW..SE order."""
        if addr[0] >= self.max_depth:
            return ()
        return tuple(
            a for a in ACTIONS if self.in_image_px(child(TileAddr(*addr), a)) > 0
        )

    def in_image_addrs(self, level):
        """Addresses with in_image_px > 0 at ``level``, sorted by (row, col)."""
        rows, cols = np.nonzero(self.levels[level][1] > 0)
        return [TileAddr(level, int(c), int(r)) for r, c in zip(rows, cols)]

    def __eq__(self, other):
        if not isinstance(other, RewardMap):
            return NotImplemented
        return self.max_depth == other.max_depth and all(
            np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
            for a, b in zip(self.levels, other.levels)
        )


def compute_reward_map(pyramid, mask):
    """Count cancer and in-image pixels for every tile of ``pyramid``.

    The leaf grid is counted directly from the mask (block sums over the
    tile grid); every coarser level is the exact 2x2 sum of the level below.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (pyramid.height, pyramid.width):
        raise ValueError(
            f"mask shape {mask.shape} does not match slide "
            f"{(pyramid.height, pyramid.width)}"
        )
    depth = pyramid.max_depth
    t = pyramid.tile_size
    n = 1 << depth

    cancer = np.zeros((n, n), dtype=np.int64)
    row_idx = np.arange(0, pyramid.height, t)
    col_idx = np.arange(0, pyramid.width, t)
    block = np.add.reduceat(mask.astype(np.int64), row_idx, axis=0)
    block = np.add.reduceat(block, col_idx, axis=1)
    cancer[: len(row_idx), : len(col_idx)] = block

    wpx = np.clip(pyramid.width - np.arange(n) * t, 0, t)
    hpx = np.clip(pyramid.height - np.arange(n) * t, 0, t)
    in_image = hpx[:, None] * wpx[None, :]

    levels = [None] * (depth + 1)
    levels[depth] = (cancer, in_image)
    for lvl in range(depth - 1, -1, -1):
        g = 1 << lvl
        c, i = levels[lvl + 1]
        levels[lvl] = (
            c.reshape(g, 2, g, 2).sum(axis=(1, 3)),
            i.reshape(g, 2, g, 2).sum(axis=(1, 3)),
        )
    return RewardMap(depth, levels)


def write_reward_csv(reward_map, path):
    """Serialize a RewardMap to CSV (one row per tile with in-image pixels)."""
    lines = [CSV_HEADER]
    for level in range(reward_map.max_depth + 1):
        cancer, in_image = reward_map.levels[level]
        rows, cols = np.nonzero(in_image > 0)
        for r, c in zip(rows, cols):
            lines.append(f"{level},{c},{r},{cancer[r, c]},{in_image[r, c]}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_reward_csv(path):
    """Parse a reward CSV back into a RewardMap, validating as it goes.

    A malformed row, duplicate address, count outside 0 <= cancer <=
    in_image, or a parent whose counts are not the exact sum of its
    children rejects the whole file with the offending line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    lines = text.splitlines()
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"line 1: expected header {CSV_HEADER!r}")

    entries = {}
    line_no = {}
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"line {ln}: expected 5 fields, got {len(parts)}")
        try:
            level, col, row, cancer, in_image = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f"line {ln}: non-integer field in {line!r}") from None
        if level < 0:
            raise ValueError(f"line {ln}: negative level")
        n = 1 << level
        if not (0 <= col < n and 0 <= row < n):
            raise ValueError(f"line {ln}: tile ({level},{col},{row}) outside grid")
        addr = TileAddr(level, col, row)
        if addr in entries:
            raise ValueError(f"line {ln}: duplicate tile ({level},{col},{row})")
        if in_image <= 0:
            raise ValueError(f"line {ln}: in_image_px must be positive")
        if not 0 <= cancer <= in_image:
            raise ValueError(f"line {ln}: cancer_px outside [0, in_image_px]")
        entries[addr] = (cancer, in_image)
        line_no[addr] = ln
    if not entries:
        raise ValueError("line 1: no tile rows")

    depth = max(a.level for a in entries)
    levels = []
    for lvl in range(depth + 1):
        n = 1 << lvl
        levels.append((np.zeros((n, n), np.int64), np.zeros((n, n), np.int64)))
    for addr, (cancer, in_image) in entries.items():
        levels[addr.level][0][addr.row, addr.col] = cancer
        levels[addr.level][1][addr.row, addr.col] = in_image

    for lvl in range(depth):
        c_par, i_par = levels[lvl]
        c_kid, i_kid = levels[lvl + 1]
        g = 1 << lvl
        c_sum = c_kid.reshape(g, 2, g, 2).sum(axis=(1, 3))
        i_sum = i_kid.reshape(g, 2, g, 2).sum(axis=(1, 3))
        bad = np.nonzero((c_sum != c_par) | (i_sum != i_par))
        if len(bad[0]):
            r, c = int(bad[0][0]), int(bad[1][0])
            addr = TileAddr(lvl, c, r)
            ln = line_no.get(addr, 1)
            raise ValueError(
                f"line {ln}: tile ({lvl},{c},{r}) counts do not equal the sum "
                f"of its children"
            )
    return RewardMap(depth, levels)
