import time

import numpy as np
import pytest

import oracles
from neuronseg.tiling import (
    TilingError,
    assemble,
    axis_origins,
    extract_patches,
    make_weight_map,
    plan_tiling,
)


def test_default_plan_on_5000():
    plan = plan_tiling(5000, 5000, 1340, 1220)
    assert plan.xs == plan.ys == (0, 1220, 2440, 3660)
    assert plan.n_tiles == 16 and plan.overlap == 120
    assert plan.xs[-1] + plan.window == 5000


def test_last_origin_clamped():
    assert axis_origins(5001, 1340, 1220) == [0, 1220, 2440, 3660, 3661]


def test_window_equal_to_length_is_one_origin():
    assert axis_origins(700, 700, 300) == [0]


@pytest.mark.parametrize("length,window,stride", [(10, 11, 5), (20, 10, 0), (20, 10, 11)])
def test_bad_geometry_rejected(length, window, stride):
    with pytest.raises(TilingError):
        axis_origins(length, window, stride)


@pytest.mark.parametrize("length", range(40, 90))
def test_origins_cover_axis(length):
    o = axis_origins(length, 32, 20)
    covered = np.zeros(length, bool)
    for s in o:
        covered[s : s + 32] = True
    assert covered.all() and o == sorted(set(o))


def test_plan_json_has_positions():
    d = plan_tiling(30, 20, 20, 10).to_dict()
    assert d["n_tiles"] == 2 and d["positions"] == [[0, 0], [10, 0]]


def test_constant_image_gives_constant_patches():
    img = np.full((50, 60), 7, np.uint8)
    for _, p in extract_patches(img, plan_tiling(60, 50, 20, 15)):
        assert (p == 7).all()


def test_first_patch_is_top_left_crop():
    img = np.arange(50 * 60).reshape(50, 60)
    (origin, p), *_ = extract_patches(img, plan_tiling(60, 50, 20, 15))
    assert origin == (0, 0) and (p == img[:20, :20]).all()


def test_plan_shape_mismatch():
    with pytest.raises(TilingError):
        list(extract_patches(np.zeros((10, 10)), plan_tiling(12, 10, 5, 5)))


@pytest.mark.parametrize("seed", range(3))
def test_roundtrip_identity(seed):
    img = np.random.default_rng(seed).random((97, 131, 3))
    plan = plan_tiling(131, 97, 40, 28)
    wm = make_weight_map(40, plan.overlap)
    out = assemble(extract_patches(img, plan), plan, wm)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_single_tile_output_is_patch():
    img = np.random.default_rng(0).random((16, 16))
    plan = plan_tiling(16, 16, 16, 16)
    assert (assemble(extract_patches(img, plan), plan, make_weight_map(16, 0)) == img).all()


def test_weight_map_no_overlap_is_ones():
    assert (make_weight_map(10, 0) == 1).all()


def test_weight_map_shape_properties():
    wm = make_weight_map(40, 12, 0.01)
    assert wm[0, 0] == pytest.approx(0.01**2)
    assert (wm > 0).all() and wm.max() == 1.0
    assert (wm == wm.T).all() and (wm == wm[::-1, ::-1]).all()
    half = wm[:, :20]
    assert (np.diff(half, axis=1) >= 0).all()
    assert (np.diff(wm[:20], axis=0) >= 0).all()
    assert (wm[12:28, 12:28] == 1).all()


def test_weight_map_argument_checks():
    with pytest.raises(ValueError):
        make_weight_map(10, 10)
    with pytest.raises(ValueError):
        make_weight_map(10, 2, 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_random_patches_match_naive_accumulation(seed):
    rng = np.random.default_rng(seed)
    plan = plan_tiling(37, 29, 14, 9)
    wm = make_weight_map(14, plan.overlap, 0.05)
    patches = [((x, y), rng.random((14, 14))) for x, y in plan.positions]
    got = assemble(patches, plan, wm)
    want = oracles.naive_assemble(
        [(o, p.tolist()) for o, p in patches], 29, 37, 14, wm.tolist()
    )
    np.testing.assert_allclose(got, want, atol=1e-6)
    # accumulation order does not matter
    again = assemble(patches[::-1], plan, wm)
    np.testing.assert_allclose(again, got, atol=1e-12)


def test_constant_patches_give_constant_output():
    plan = plan_tiling(50, 50, 20, 13)
    wm = make_weight_map(20, plan.overlap)
    out = assemble([(o, np.full((20, 20), 0.37)) for o in plan.positions], plan, wm)
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_uncovered_pixel_raises():
    plan = plan_tiling(40, 20, 20, 20)
    with pytest.raises(TilingError):
        assemble([((0, 0), np.zeros((20, 20)))], plan, make_weight_map(20, 0))


def test_plan_is_fast():
    t = time.perf_counter()
    plan_tiling(5000, 5000, 1340, 1220)
    assert time.perf_counter() - t < 1e-3
