"""Occlusion contributions and factorized attention maps.

A tile's contribution is the drop in patient risk when the tile is removed
from its region (softmax pooling renormalizes over the remaining tiles), so
positive values mark risk-increasing tissue. Cohort-wide contributions are
clipped to their 5th/95th percentiles and scaled into [-1, 1].

Attention maps multiply per-level attention rasters; frozen levels can be
neutralized through the exponent weight ``gamma``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError
from .mil import TILES_PER_REGION, AggregatorParams, FeatureBag, attention, predict_risk

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_SIGMA = 2.0
OVERLAY_ALPHA = 128


@dataclass(frozen=True)
class ContributionScore:
    patient_id: str
    tile: int  # flat index over present tiles, region-major
    region: int
    slot: int
    raw: float
    clipped: float | None = None
    normalized: float | None = None


@dataclass(frozen=True)
class Occlusion:
    """All per-tile contributions of one bag plus the selected extremes."""

    scores: tuple
    top: tuple  # tile indices, most positive first
    bottom: tuple  # tile indices, most negative first

    @property
    def raw(self) -> np.ndarray:
        return np.array([s.raw for s in self.scores])

    def selected(self) -> list[ContributionScore]:
        return [self.scores[i] for i in (*self.top, *self.bottom)]


def model_risk(params: AggregatorParams) -> Callable[[FeatureBag], float]:
    return lambda bag: predict_risk(bag, params)


def occlusion_scores(bag: FeatureBag, model: Callable[[FeatureBag], float], k: int = DEFAULT_K) -> Occlusion:
    """Leave-one-tile-out contributions ``risk(bag) - risk(bag without tile)``.

    The ``k`` most positive and ``k`` most negative tiles are selected; the
    two sets are disjoint, so bags with fewer than ``2k`` tiles get
    ``n_tiles // 2`` of each.
    """
    if k < 1:
        raise DataError("k must be at least 1")
    index = bag.tile_index()
    n = len(index)
    if n < 2:
        raise DataError(f"occlusion needs at least 2 tiles, bag {bag.patient_id!r} has {n}")
    base = float(model(bag))
    scores = []
    for t, (m, s) in enumerate(index):
        c = base - float(model(bag.without_tile(m, s)))
        scores.append(ContributionScore(bag.patient_id, t, int(m), int(s), c))
    raw = np.array([s.raw for s in scores])
    k_eff = min(k, n // 2)
    if k_eff < k:
        logger.info("bag %s has %d tiles; selecting %d per side", bag.patient_id, n, k_eff)
    order = np.lexsort((np.arange(n), -raw))  # descending raw, stable by index
    top = order[:k_eff]
    bottom = order[::-1][:k_eff]  # tail of the same order keeps the sets disjoint under ties
    return Occlusion(tuple(scores), tuple(int(i) for i in top), tuple(int(i) for i in bottom))


@dataclass(frozen=True)
class Normalized:
    clipped: np.ndarray
    normalized: np.ndarray
    q_low: float
    q_high: float


def normalize_contributions(raw, lower: float = 5.0, upper: float = 95.0) -> Normalized:
    """Clip to the ``lower``/``upper`` percentiles (linear interpolation), then
    divide by the largest clipped magnitude. All-zero input stays zero."""
    c = np.asarray(raw, dtype=float).ravel()
    if c.size == 0:
        raise DataError("no contribution scores to normalize")
    if not np.all(np.isfinite(c)):
        raise DataError("contribution scores must be finite")
    q_low, q_high = np.percentile(c, [lower, upper])
    clipped = np.clip(c, q_low, q_high)
    peak = np.max(np.abs(clipped))
    normalized = clipped / peak if peak > 0 else np.zeros_like(clipped)
    return Normalized(clipped, normalized, float(q_low), float(q_high))


def normalize_cohort(occlusions: Sequence[Occlusion], **kw) -> list[Occlusion]:
    """Normalize every tile of every bag against the pooled cohort quantiles."""
    pooled = np.concatenate([o.raw for o in occlusions]) if occlusions else np.empty(0)
    norm = normalize_contributions(pooled, **kw)
    out, pos = [], 0
    for o in occlusions:
        scores = tuple(replace(s, clipped=float(norm.clipped[pos + i]), normalized=float(norm.normalized[pos + i]))
                       for i, s in enumerate(o.scores))
        pos += len(o.scores)
        out.append(replace(o, scores=scores))
    return out


def write_contributions(path, occlusions: Sequence[Occlusion], header_lines: Sequence[str] = (),
                        selected_only: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "tile", "region", "slot", "raw", "clipped", "normalized", "side"])
        for o in occlusions:
            side = {i: "positive" for i in o.top} | {i: "negative" for i in o.bottom}
            rows = [o.scores[i] for i in side] if selected_only else list(o.scores)
            for s in rows:
                w.writerow([s.patient_id, s.tile, s.region, s.slot, repr(s.raw),
                            "" if s.clipped is None else repr(s.clipped),
                            "" if s.normalized is None else repr(s.normalized),
                            side.get(s.tile, "")])


@dataclass(frozen=True)
class AttentionStack:
    rasters: tuple
    frozen: tuple
    gamma: float = 1.0

    def __post_init__(self):
        rasters = tuple(np.asarray(r, dtype=float) for r in self.rasters)
        if not rasters:
            raise DataError("attention stack is empty")
        if len(self.frozen) != len(rasters):
            raise DataError("one frozen flag per raster is required")
        if len({r.shape for r in rasters}) != 1:
            raise DataError(f"attention rasters differ in shape: {[r.shape for r in rasters]}")
        if any(np.any(r < 0) or not np.all(np.isfinite(r)) for r in rasters):
            raise DataError("attention values must be finite and non-negative")
        if not 0 <= self.gamma <= 1:
            raise DataError("gamma must lie in [0, 1]")
        object.__setattr__(self, "rasters", rasters)
        object.__setattr__(self, "frozen", tuple(bool(f) for f in self.frozen))


def factorized_attention(stack: AttentionStack) -> np.ndarray:
    """Per-pixel product of level attentions, min-max scaled to [0, 1].

    Level ``j`` enters as ``a_j ** w_j`` with ``w_j = gamma`` when trained and
    ``1 - gamma`` when frozen, so at ``gamma = 1`` a frozen level contributes
    exactly 1. A constant product maps to all zeros.
    """
    out = np.ones_like(stack.rasters[0])
    for r, frozen in zip(stack.rasters, stack.frozen):
        w = 1.0 - stack.gamma if frozen else stack.gamma
        if w != 0:
            out = out * np.power(r, w)
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def attention_rasters(bag: FeatureBag, params: AggregatorParams, plan) -> tuple[np.ndarray, np.ndarray]:
    """Tile-level and region-level attention painted on the plan's tile grid.

    Bag regions must follow ``plan.regions`` in order with 64 row-major tile
    slots each. Cells outside any region are 0.
    """
    if bag.n_regions != len(plan.regions) or bag.tiles.shape[1] != TILES_PER_REGION:
        raise DataError(f"bag has {bag.n_regions} regions of {bag.tiles.shape[1]} tiles, "
                        f"plan has {len(plan.regions)} regions of {TILES_PER_REGION}")
    a, b = attention(bag, params)
    side = int(round(np.sqrt(TILES_PER_REGION)))
    step = plan.region_px // side
    w, h = plan.canvas
    tile_r = np.zeros((h // step, w // step))
    region_r = np.zeros_like(tile_r)
    for m, reg in enumerate(plan.regions):
        r0, c0 = reg.y // step, reg.x // step
        tile_r[r0:r0 + side, c0:c0 + side] = a[m].reshape(side, side)
        region_r[r0:r0 + side, c0:c0 + side] = b[m]
    return tile_r, region_r


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray  # smoothed scores with values below threshold set to 0
    rgba: np.ndarray  # (H, W, 4) uint8

    def save(self, path) -> None:
        """PNG keeps the RGBA overlay; PGM stores the grid as 8-bit grey."""
        from PIL import Image

        path = str(path)
        if path.lower().endswith(".pgm"):
            Image.fromarray(np.round(self.grid * 255).astype(np.uint8), mode="L").save(path)
        else:
            Image.fromarray(self.rgba, mode="RGBA").save(path)

    def grid_json(self, **extra) -> str:
        return json.dumps({**extra, "shape": list(self.grid.shape), "grid": self.grid.tolist()})


def diverging_ramp(t: np.ndarray) -> np.ndarray:
    """Blue -> white -> red for ``t`` in [0, 1]; returns float RGB in [0, 1]."""
    t = np.clip(np.asarray(t, float), 0, 1)[..., None]
    blue = np.array([0.23, 0.30, 0.75])
    white = np.array([0.87, 0.87, 0.87])
    red = np.array([0.71, 0.02, 0.15])
    lower = blue + (white - blue) * (t / 0.5)
    upper = white + (red - white) * ((t - 0.5) / 0.5)
    return np.where(t < 0.5, lower, upper)


def smooth(raster, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    r = np.asarray(raster, dtype=float)
    return gaussian_filter(r, sigma, mode="constant") if sigma > 0 else r.copy()


def render_heatmap(raster, threshold: float = 0.5, sigma: float = DEFAULT_SIGMA) -> Heatmap:
    """Blur (``sigma`` in raster cells), drop values below ``threshold`` and
    color the survivors over ``[threshold, 1]``; dropped cells are transparent."""
    s = smooth(raster, sigma)
    keep = s >= threshold
    grid = np.where(keep, s, 0.0)
    span = max(1.0 - threshold, 1e-12)
    rgb = diverging_ramp((grid - threshold) / span)
    rgba = np.zeros(grid.shape + (4,), np.uint8)
    rgba[..., :3] = np.round(rgb * 255).astype(np.uint8)
    rgba[..., 3] = np.where(keep, OVERLAY_ALPHA, 0)
    rgba[~keep, :3] = 0
    return Heatmap(grid, rgba)
