"""Patient-level tiling geometry.

Tissue crops from all of a patient's slides are shelf-packed onto one
canvas. The canvas is cut into a grid of square regions anchored at the
origin (partial border regions are dropped); each region corresponds to
2048 px at 0.50 mpp and unrolls into 8 x 8 tiles of 256 px. Geometry works
on binary masks and sizes only; no pixels are decoded.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataError, NoValidSpacingError

TARGET_SPACING = 0.50
REGION_PX = 2048
TILE_PX = 256
TILES_PER_SIDE = REGION_PX // TILE_PX
SPACING_EPS = 1e-9


@dataclass(frozen=True)
class TissueCrop:
    """A tissue bounding box ``(x, y, width, height)`` on a source slide."""

    slide_id: str
    box: tuple
    spacing: float = TARGET_SPACING
    mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        x, y, w, h = self.box
        if w <= 0 or h <= 0 or x < 0 or y < 0:
            raise DataError(f"invalid crop box {self.box} on slide {self.slide_id}")
        if self.spacing <= 0:
            raise DataError("spacing must be positive")
        if self.mask is not None and self.mask.shape != (h, w):
            raise DataError(f"mask shape {self.mask.shape} does not match box {w}x{h}")

    @property
    def width(self) -> int:
        return int(self.box[2])

    @property
    def height(self) -> int:
        return int(self.box[3])


@dataclass(frozen=True)
class Packing:
    width: int
    height: int
    offsets: tuple  # (x, y) per crop, in input order


def pack(crops, max_width: int | None = None) -> Packing:
    """Shelf packing: tallest first, left to right, new shelf when full.

    The default shelf width is ``1.2 * sqrt(total area)``, widened to the
    widest crop if needed.
    """
    crops = list(crops)
    if not crops:
        raise DataError("nothing to pack")
    widest = max(c.width for c in crops)
    if max_width is None:
        max_width = math.ceil(1.2 * math.sqrt(sum(c.width * c.height for c in crops)))
    max_width = max(int(max_width), widest)

    order = sorted(range(len(crops)), key=lambda i: (-crops[i].height, i))
    offsets = [None] * len(crops)
    x = y = shelf_h = canvas_w = 0
    for i in order:
        c = crops[i]
        if x > 0 and x + c.width > max_width:
            y += shelf_h
            x = shelf_h = 0
        offsets[i] = (x, y)
        x += c.width
        shelf_h = max(shelf_h, c.height)
        canvas_w = max(canvas_w, x)
    return Packing(canvas_w, y + shelf_h, tuple(offsets))


def overlaps(packing: Packing, crops) -> bool:
    rects = [(ox, oy, ox + c.width, oy + c.height) for (ox, oy), c in zip(packing.offsets, crops)]
    for a in range(len(rects)):
        for b in range(a + 1, len(rects)):
            ax0, ay0, ax1, ay1 = rects[a]
            bx0, by0, bx1, by1 = rects[b]
            if ax0 < bx1 and bx0 < ax1 and ay0 < by1 and by0 < ay1:
                return True
    return False


@dataclass(frozen=True)
class SpacingPolicy:
    target: float = TARGET_SPACING
    tolerance: float = 0.05

    def __post_init__(self):
        if self.tolerance < 0 or self.target <= 0:
            raise DataError("tolerance must be >= 0 and target > 0")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.target * (1 - self.tolerance), self.target * (1 + self.tolerance)


@dataclass(frozen=True)
class SpacingChoice:
    spacing: float
    resize: float  # output px per source px
    extraction_px: int  # source px per region side

    @property
    def effective_spacing(self) -> float:
        return self.spacing / self.resize


def choose_spacing(spacings, policy: SpacingPolicy = SpacingPolicy()) -> SpacingChoice:
    """Pick the pyramid level to extract 2048-px regions from.

    A native spacing inside the tolerance band is used as is (closest to the
    target wins, finer on ties). Otherwise the finer level nearest the target
    is read over a larger box and downsampled by ``spacing / target``.
    """
    s = sorted(float(v) for v in spacings)
    if not s:
        raise DataError("no spacings given")
    lo, hi = policy.bounds
    inside = [v for v in s if lo - SPACING_EPS <= v <= hi + SPACING_EPS]
    if inside:
        best = min(inside, key=lambda v: (abs(v - policy.target), v))
        return SpacingChoice(best, 1.0, REGION_PX)
    finer = [v for v in s if v < lo]
    if not finer:
        raise NoValidSpacingError(
            f"no native spacing within [{lo:.4g}, {hi:.4g}] mpp and none finer: {s}")
    best = max(finer)
    resize = best / policy.target
    return SpacingChoice(best, resize, int(round(REGION_PX / resize)))


@dataclass
class Region:
    x: int
    y: int
    size: int
    coverage: float
    tile_coverage: list
    tile_keep: list

    def tiles(self) -> list[tuple[int, int, int]]:
        """Row-major ``(x, y, size)`` of the 64 tile slots in canvas pixels."""
        step = self.size // TILES_PER_SIDE
        return [(self.x + c * step, self.y + r * step, step)
                for r in range(TILES_PER_SIDE) for c in range(TILES_PER_SIDE)]


@dataclass
class TilePlan:
    canvas: tuple
    offsets: list
    spacing: float
    resize: float
    region_px: int
    regions: list

    @property
    def n_tiles(self) -> int:
        return TILES_PER_SIDE**2 * len(self.regions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["canvas"] = list(self.canvas)
        d["offsets"] = [list(o) for o in self.offsets]
        d["tiles_per_region"] = TILES_PER_SIDE**2
        d["output_region_px"] = REGION_PX
        d["output_tile_px"] = TILE_PX
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TilePlan":
        try:
            regions = [Region(**{k: r[k] for k in ("x", "y", "size", "coverage", "tile_coverage", "tile_keep")})
                       for r in d["regions"]]
            return cls(tuple(d["canvas"]), [tuple(o) for o in d["offsets"]], float(d["spacing"]),
                       float(d["resize"]), int(d["region_px"]), regions)
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed tile plan: {exc}") from None


def compose_mask(packing: Packing, crops) -> np.ndarray:
    """Boolean canvas mask with each crop's mask pasted at its offset.

    Crops without a mask count as fully tissue.
    """
    canvas = np.zeros((packing.height, packing.width), dtype=bool)
    for (ox, oy), c in zip(packing.offsets, crops):
        m = np.ones((c.height, c.width), bool) if c.mask is None else c.mask.astype(bool)
        canvas[oy:oy + c.height, ox:ox + c.width] |= m
    return canvas


def _block_sums(mask: np.ndarray, size: int) -> np.ndarray:
    rows, cols = mask.shape[0] // size, mask.shape[1] // size
    trimmed = mask[: rows * size, : cols * size]
    return trimmed.reshape(rows, size, cols, size).sum(axis=(1, 3))


def plan_tiles(mask: np.ndarray, choice: SpacingChoice, *, offsets=(), region_min_coverage=0.01,
               tile_min_coverage=None) -> TilePlan:
    """Region/tile grid over a canvas mask.

    ``mask`` is the composed canvas tissue mask at the chosen source level.
    Regions with coverage below ``region_min_coverage`` are dropped; when
    ``tile_min_coverage`` is set (pretraining mode), tiles below it are
    flagged ``keep=False`` but still occupy their slot.
    """
    mask = np.asarray(mask, dtype=bool)
    size = choice.extraction_px
    if size % TILES_PER_SIDE:
        size -= size % TILES_PER_SIDE  # tiles must partition the region exactly
    step = size // TILES_PER_SIDE
    region_area = size * size
    tile_area = step * step
    region_sums = _block_sums(mask, size)
    regions = []
    for r in range(region_sums.shape[0]):
        for c in range(region_sums.shape[1]):
            cov = region_sums[r, c] / region_area
            if cov <= 0 or cov < region_min_coverage:
                continue
            block = mask[r * size:(r + 1) * size, c * size:(c + 1) * size]
            tile_cov = (_block_sums(block, step) / tile_area).ravel()
            keep = (tile_cov >= tile_min_coverage) if tile_min_coverage is not None else np.ones(tile_cov.size, bool)
            regions.append(Region(c * size, r * size, size, float(cov),
                                  [float(v) for v in tile_cov], [bool(k) for k in keep]))
    return TilePlan((mask.shape[1], mask.shape[0]), [tuple(o) for o in offsets],
                    choice.spacing, choice.resize, size, regions)


def plan_patient(crops, spacings, policy: SpacingPolicy = SpacingPolicy(), *, max_width=None,
                 region_min_coverage=0.01, tile_min_coverage=None) -> TilePlan:
    """Pack a patient's crops and plan regions at the level chosen from ``spacings``."""
    choice = choose_spacing(spacings, policy)
    packing = pack(crops, max_width)
    mask = compose_mask(packing, crops)
    return plan_tiles(mask, choice, offsets=packing.offsets,
                      region_min_coverage=region_min_coverage, tile_min_coverage=tile_min_coverage)
