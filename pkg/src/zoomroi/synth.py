"""Seeded synthetic slide/mask pairs built from ellipse blobs.

The point-in-ellipse test is pure integer arithmetic: rotation is encoded
as an integer direction vector (ux, uy), so pixel membership is decided by
comparing integer polynomials and rasterization is bit-identical across
platforms. Every generated pair ships with a manifest of exact pixel
counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._common import dump_json

SUITE_FORMAT = "zoomroi-suite/1"

BACKGROUND = (236, 205, 214)
TINT = (-48, -38, -18)
NOISE = 8
SLIDE_SIZE = 512

_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}
_AXES = ((1, 0), (2, 1), (1, 2), (1, 1), (3, 4))

# Half-axis presets per nominal cancer fraction of a 512x512 slide. Every
# blob is large enough to fully contain the 64x64 tile centered on it.
_FRACTION_BLOBS = {
    0.05: ((68, 61),),
    0.1: ((102, 82),),
    0.25: ((130, 115), (80, 74)),
    0.5: ((160, 140), (145, 130)),
}

TRAIN_FRACTIONS = (0.05, 0.1, 0.25, 0.5) * 3
VAL_FRACTIONS = (0.1, 0.25)
TEST_FRACTIONS = (0.25, 0.5)


@dataclass(frozen=True)
class Ellipse:
    cx: int
    cy: int
    rx: int
    ry: int
    axis: tuple = (1, 0)

    def __post_init__(self):
        if self.rx < 1 or self.ry < 1:
            raise ValueError("ellipse radii must be >= 1")
        if self.axis == (0, 0):
            raise ValueError("axis vector must be nonzero")

    def contains(self, xs, ys):
        """Exact membership for integer coordinate arrays."""
        ux, uy = self.axis
        dx = np.asarray(xs, dtype=np.int64) - self.cx
        dy = np.asarray(ys, dtype=np.int64) - self.cy
        s = dx * ux + dy * uy
        t = -dx * uy + dy * ux
        rx2 = self.rx * self.rx
        ry2 = self.ry * self.ry
        norm = ux * ux + uy * uy
        return ry2 * s * s + rx2 * t * t <= rx2 * ry2 * norm

    def contains_rect(self, x0, y0, x1, y1):
        """True when all four corners lie inside (ellipses are convex)."""
        xs = np.array([x0, x1, x0, x1])
        ys = np.array([y0, y0, y1, y1])
        return bool(np.all(self.contains(xs, ys)))

    def to_dict(self):
        return {
            "cx": self.cx,
            "cy": self.cy,
            "rx": self.rx,
            "ry": self.ry,
            "axis": list(self.axis),
        }


@dataclass(frozen=True)
class SynthSpec:
    width: int
    height: int
    blobs: tuple
    background: tuple = BACKGROUND
    tint: tuple = TINT
    noise: int = NOISE
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if not 0 <= self.noise <= 30:
            raise ValueError("noise amplitude must be in [0, 30]")
        for blob in self.blobs:
            if not (0 <= blob.cx < self.width and 0 <= blob.cy < self.height):
                raise ValueError(f"blob center {(blob.cx, blob.cy)} outside image")

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "blobs": [b.to_dict() for b in self.blobs],
            "background": list(self.background),
            "tint": list(self.tint),
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        blobs = tuple(
            Ellipse(b["cx"], b["cy"], b["rx"], b["ry"], tuple(b.get("axis", (1, 0))))
            for b in data.get("blobs", ())
        )
        return cls(
            width=data["width"],
            height=data["height"],
            blobs=blobs,
            background=tuple(data.get("background", BACKGROUND)),
            tint=tuple(data.get("tint", TINT)),
            noise=data.get("noise", NOISE),
            seed=data.get("seed", 0),
        )


def rasterize(spec):
    """Render (slide, mask, manifest). Mask is uint8, 0 inside any blob."""
    xs = np.arange(spec.width, dtype=np.int64)[None, :]
    ys = np.arange(spec.height, dtype=np.int64)[:, None]
    inside_any = np.zeros((spec.height, spec.width), dtype=bool)
    blob_counts = []
    for blob in spec.blobs:
        inside = blob.contains(xs, ys)
        blob_counts.append(int(inside.sum()))
        inside_any |= inside
    mask = np.where(inside_any, 0, 255).astype(np.uint8)

    slide = np.empty((spec.height, spec.width, 3), dtype=np.int64)
    slide[:] = np.asarray(spec.background, dtype=np.int64)
    slide[inside_any] += np.asarray(spec.tint, dtype=np.int64)
    if spec.noise > 0:
        rng = np.random.default_rng(spec.seed)
        slide += rng.integers(
            -spec.noise, spec.noise + 1, size=slide.shape, dtype=np.int64
        )
    slide = np.clip(slide, 0, 255).astype(np.uint8)

    manifest = {
        "spec": spec.to_dict(),
        "blob_pixels": blob_counts,
        "cancer_px": int(inside_any.sum()),
        "total_px": spec.width * spec.height,
    }
    return slide, mask, manifest


def generate(spec, out_dir, stem):
    """Write <stem>_slide.png, <stem>_mask.png and <stem>_manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    slide, mask, manifest = rasterize(spec)
    slide_path = out_dir / f"{stem}_slide.png"
    mask_path = out_dir / f"{stem}_mask.png"
    manifest_path = out_dir / f"{stem}_manifest.json"
    Image.fromarray(slide).save(slide_path)
    Image.fromarray(mask).save(mask_path)
    dump_json(manifest, manifest_path)
    return slide_path, mask_path, manifest


def _snapped_centers(radius, size, tile=64):
    """Tile-center positions keeping the blob's bounding box inside."""
    return [
        p
        for p in range(tile // 2, size, tile)
        if p - radius >= 0 and p + radius <= size
    ]


def _pick_axis(rng, blob_rx, blob_ry, cx, cy):
    # Prefer a seeded rotation, but only if the blob still fully contains
    # the tile centered on it; otherwise stay axis-aligned.
    axis = _AXES[int(rng.integers(len(_AXES)))]
    probe = Ellipse(cx, cy, blob_rx, blob_ry, axis)
    if probe.contains_rect(cx - 32, cy - 32, cx + 31, cy + 31):
        return axis
    return (1, 0)


def _place_blobs(fraction, rng, size=SLIDE_SIZE):
    radii = _FRACTION_BLOBS[fraction]
    centers = []
    if len(radii) == 1:
        rx, ry = radii[0]
        options = _snapped_centers(max(rx, ry), size)
        centers.append(
            (
                options[int(rng.integers(len(options)))],
                options[int(rng.integers(len(options)))],
            )
        )
    else:
        # Choose a near-maximally separated pair of snapped centers so the
        # blobs overlap as little as the canvas allows.
        opts = [_snapped_centers(max(rx, ry), size) for rx, ry in radii]
        pairs = []
        for x1 in opts[0]:
            for y1 in opts[0]:
                for x2 in opts[1]:
                    for y2 in opts[1]:
                        d2 = (x1 - x2) ** 2 + (y1 - y2) ** 2
                        pairs.append((d2, (x1, y1), (x2, y2)))
        best = max(p[0] for p in pairs)
        near = [p for p in pairs if p[0] >= best - 64 * 64]
        _, c1, c2 = near[int(rng.integers(len(near)))]
        centers = [c1, c2]
    blobs = []
    for (rx, ry), (cx, cy) in zip(radii, centers):
        axis = _pick_axis(rng, rx, ry, cx, cy)
        blobs.append(Ellipse(cx, cy, rx, ry, axis))
    return tuple(blobs)


def benchmark_specs(seed):
    """The fixed 16-slide catalog: 12 train, 2 val, 2 test."""
    catalog = []
    for split, fractions in (
        ("train", TRAIN_FRACTIONS),
        ("val", VAL_FRACTIONS),
        ("test", TEST_FRACTIONS),
    ):
        for index, fraction in enumerate(fractions):
            rng = np.random.default_rng([seed, _SPLIT_CODE[split], index])
            blobs = _place_blobs(fraction, rng)
            spec = SynthSpec(
                width=SLIDE_SIZE,
                height=SLIDE_SIZE,
                blobs=blobs,
                seed=seed * 1_000_000 + _SPLIT_CODE[split] * 1_000 + index,
            )
            catalog.append((split, index, fraction, spec))
    return catalog


def benchmark_suite(seed, out_dir):
    """Generate the benchmark catalog under ``out_dir`` and its manifest."""
    out_dir = Path(out_dir)
    entries = []
    for split, index, fraction, spec in benchmark_specs(seed):
        stem = f"{index:03d}"
        slide_path, mask_path, manifest = generate(spec, out_dir / split, stem)
        entries.append(
            {
                "split": split,
                "index": index,
                "nominal_fraction": fraction,
                "slide": f"{split}/{stem}_slide.png",
                "mask": f"{split}/{stem}_mask.png",
                "manifest": f"{split}/{stem}_manifest.json",
                "cancer_px": manifest["cancer_px"],
                "total_px": manifest["total_px"],
                "cancer_fraction": manifest["cancer_px"] / manifest["total_px"],
            }
        )
    suite = {
        "format": SUITE_FORMAT,
        "seed": seed,
        "entries": entries,
        "mean_cancer_fraction": float(
            np.mean([e["cancer_fraction"] for e in entries])
        ),
    }
    dump_json(suite, out_dir / "manifest.json")
    return suite
