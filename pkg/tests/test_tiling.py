import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bcrkit import tiling
from bcrkit.errors import DataError, NoValidSpacingError
from bcrkit.tiling import SpacingChoice, SpacingPolicy, TilePlan, TissueCrop

NATIVE = SpacingChoice(0.5, 1.0, 2048)


def crop(w, h, sid="s", mask=None):
    return TissueCrop(sid, (0, 0, w, h), mask=mask)


def test_full_canvas_regions_and_tiles():
    plan = tiling.plan_tiles(np.ones((4096, 4096), bool), NATIVE)
    assert len(plan.regions) == 4 and plan.n_tiles == 256
    assert all(r.coverage == 1.0 and len(r.tiles()) == 64 for r in plan.regions)


def test_empty_canvas_has_no_regions():
    assert tiling.plan_tiles(np.zeros((4096, 4096), bool), NATIVE).regions == []


def test_partial_border_regions_dropped():
    plan = tiling.plan_tiles(np.ones((5000, 3000), bool), NATIVE)
    assert [(r.x, r.y) for r in plan.regions] == [(0, 0), (0, 2048)]


def test_checkerboard_coverage_matches_pixel_count():
    yy, xx = np.mgrid[:4096, :4096]
    mask = ((yy // 16 + xx // 16) % 2 == 0)
    plan = tiling.plan_tiles(mask, NATIVE)
    assert len(plan.regions) == 4
    for r in plan.regions:
        block = mask[r.y:r.y + 2048, r.x:r.x + 2048]
        assert r.coverage == block.mean()
        for (tx, ty, size), cov in zip(r.tiles(), r.tile_coverage):
            assert cov == mask[ty:ty + size, tx:tx + size].mean()


def test_region_threshold():
    mask = np.zeros((2048, 4096), bool)
    mask[:20, :20] = True  # 400 px, below 1% of a region
    mask[:, 2048:2048 + 41] = True  # 41 * 2048 px, about 2%
    plan = tiling.plan_tiles(mask, NATIVE)
    assert [r.x for r in plan.regions] == [2048]


def test_tile_threshold_flags_but_keeps_slots():
    mask = np.zeros((2048, 2048), bool)
    mask[:, :512] = True
    plan = tiling.plan_tiles(mask, NATIVE, tile_min_coverage=0.25)
    (r,) = plan.regions
    assert len(r.tile_keep) == 64 and sum(r.tile_keep) == 16


def test_tiles_partition_region():
    plan = tiling.plan_tiles(np.ones((2048, 2048), bool), NATIVE)
    cover = np.zeros((2048, 2048), int)
    for x, y, s in plan.regions[0].tiles():
        cover[y:y + s, x:x + s] += 1
    assert np.all(cover == 1)


@pytest.mark.parametrize("spacings,expected", [
    ([0.51], (0.51, 1.0, 2048)),
    ([0.25, 0.55], (0.25, 0.5, 4096)),
    ([0.49, 0.52, 0.25], (0.49, 1.0, 2048)),
    ([0.125, 0.25, 1.0], (0.25, 0.5, 4096)),
])
def test_choose_spacing(spacings, expected):
    c = tiling.choose_spacing(spacings)
    assert (c.spacing, c.resize, c.extraction_px) == expected


def test_spacing_too_coarse():
    with pytest.raises(NoValidSpacingError):
        tiling.choose_spacing([0.60])


def test_tolerance_band():
    assert tiling.choose_spacing([0.475]).resize == 1.0
    assert tiling.choose_spacing([0.525]).resize == 1.0
    assert tiling.choose_spacing([0.474, 0.2]).spacing == 0.474
    assert tiling.choose_spacing([0.55], SpacingPolicy(tolerance=0.1)).spacing == 0.55


@given(st.lists(st.floats(0.05, 2.0), min_size=1, max_size=5))
def test_effective_spacing_in_band(spacings):
    try:
        c = tiling.choose_spacing(spacings)
    except NoValidSpacingError:
        assert min(spacings) > 0.525
        return
    if c.resize == 1.0:
        assert 0.475 - 1e-9 <= c.spacing <= 0.525 + 1e-9
    else:
        assert abs(c.effective_spacing - 0.5) < 1e-9


def test_single_crop_identity_packing():
    p = tiling.pack([crop(300, 200)])
    assert (p.width, p.height, p.offsets) == (300, 200, ((0, 0),))


def test_two_crops_side_by_side():
    p = tiling.pack([crop(100, 100, "a"), crop(100, 100, "b")], max_width=250)
    assert (p.width, p.height) == (200, 100)
    assert p.offsets == ((0, 0), (100, 0))


def test_packing_overlap_free_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        crops = [crop(int(w), int(h)) for w, h in rng.integers(1, 500, (int(rng.integers(1, 12)), 2))]
        p = tiling.pack(crops)
        assert not tiling.overlaps(p, crops)
        for (x, y), c in zip(p.offsets, crops):
            assert x + c.width <= p.width and y + c.height <= p.height
        assert p == tiling.pack(crops)


def test_overlap_detector_catches_overlap():
    crops = [crop(10, 10), crop(10, 10)]
    assert tiling.overlaps(tiling.Packing(10, 10, ((0, 0), (5, 5))), crops)


def test_crop_validation():
    with pytest.raises(DataError):
        TissueCrop("s", (0, 0, 0, 5))
    with pytest.raises(DataError):
        TissueCrop("s", (0, 0, 4, 4), mask=np.ones((3, 3), bool))


def test_plan_patient_with_masks_and_json_round_trip():
    m = np.zeros((2048, 2048), bool)
    m[100:900, 100:900] = True
    crops = [crop(2048, 2048, "a", m), crop(2048, 2048, "b")]
    plan = tiling.plan_patient(crops, [0.5])
    assert len(plan.regions) == 2
    covered = sorted(r.coverage for r in plan.regions)
    assert covered == [m.mean(), 1.0]
    back = TilePlan.from_dict(json.loads(plan.to_json()))
    assert back == plan


def test_covered_pixels_never_exceed_canvas_tissue():
    rng = np.random.default_rng(3)
    mask = rng.random((5000, 4500)) < 0.3
    plan = tiling.plan_tiles(mask, NATIVE)
    assert sum(r.coverage * r.size**2 for r in plan.regions) <= mask.sum()
