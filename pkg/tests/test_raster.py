import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from neuronseg.raster import (
    DimensionError,
    connected_components,
    dilate,
    disk,
    distance_transform,
    erode,
    read_labels,
    read_labels_rle,
    rgb_to_gray,
    rgb_to_hsv,
    write_labels,
    write_labels_rle,
)


def px(r, g, b):
    return rgb_to_hsv(np.array([[[r, g, b]]], dtype=np.uint8))[0, 0].tolist()


def test_hsv_pure_red():
    assert px(255, 0, 0) == [0, 255, 255]


def test_hsv_gray_has_no_saturation():
    assert px(128, 128, 128) == [0, 0, 128]


def test_hsv_rejects_single_channel():
    with pytest.raises(DimensionError):
        rgb_to_hsv(np.zeros((4, 4), dtype=np.uint8))


def test_hsv_matches_textbook_on_random_sample():
    rng = np.random.default_rng(7)
    pixels = rng.integers(0, 256, size=(3000, 3))
    # include the classic tie cases and extremes
    extra = np.array([[0, 0, 0], [255, 255, 255], [170, 169, 169], [1, 0, 0], [0, 255, 0], [255, 0, 1]])
    pixels = np.concatenate([pixels, extra])
    got = rgb_to_hsv(pixels.reshape(1, -1, 3).astype(np.uint8))[0]
    for (r, g, b), hsv in zip(pixels.tolist(), got.tolist()):
        assert tuple(hsv) == oracles.hsv_textbook(r, g, b), (r, g, b)


def test_hsv_matches_textbook_on_full_channel_grid():
    vals = list(range(0, 256, 17)) + [1, 254]
    grid = np.array(list(itertools.product(vals, repeat=3)))
    got = rgb_to_hsv(grid.reshape(1, -1, 3).astype(np.uint8))[0]
    for (r, g, b), hsv in zip(grid.tolist(), got.tolist()):
        assert tuple(hsv) == oracles.hsv_textbook(r, g, b)


def test_gray_is_rounded_channel_mean():
    img = np.array([[[1, 1, 0], [2, 1, 1], [255, 255, 255]]], dtype=np.uint8)
    # 2/3 -> 1, 4/3 -> 1, 255
    assert rgb_to_gray(img).tolist() == [[1, 1, 255]]


def test_cc_empty():
    labels, n = connected_components(np.zeros((5, 5), bool))
    assert n == 0 and not labels.any()


def test_cc_two_squares():
    m = np.zeros((10, 10), bool)
    m[1:4, 1:4] = True
    m[6:9, 5:8] = True
    labels, n = connected_components(m)
    assert n == 2
    assert labels.dtype == np.uint32
    assert set(np.unique(labels)) == {0, 1, 2}


def test_cc_diagonal_touch_depends_on_connectivity():
    m = np.eye(4, dtype=bool)
    assert connected_components(m, 8)[1] == 1
    assert connected_components(m, 4)[1] == 4


@pytest.mark.parametrize("connectivity", [4, 8])
@pytest.mark.parametrize("seed", range(4))
def test_cc_matches_flood_fill(connectivity, seed):
    rng = np.random.default_rng(seed)
    m = rng.random((64, 64)) < 0.45
    labels, n = connected_components(m, connectivity)
    expected = oracles.flood_fill_partition(m, connectivity)
    assert oracles.partition_of(labels) == expected
    assert n == len(expected)
    assert ((labels > 0) == m).all()


def test_disk_radius_one_is_plus():
    assert disk(1).astype(int).tolist() == [[0, 1, 0], [1, 1, 1], [0, 1, 0]]


def test_dilate_single_pixel_gives_structuring_element():
    m = np.zeros((9, 9), bool)
    m[4, 4] = True
    out = dilate(m, 3)
    assert (out[1:8, 1:8] == disk(3)).all()
    assert out.sum() == disk(3).sum()


def test_dilate_radius_zero_identity():
    m = np.random.default_rng(0).random((20, 20)) < 0.3
    assert (dilate(m, 0) == m).all()
    assert (erode(m, 0) == m).all()


def test_closing_of_disk_is_extensive():
    yy, xx = np.mgrid[:41, :41]
    m = (yy - 20) ** 2 + (xx - 20) ** 2 <= 15**2
    closed = erode(dilate(m, 3), 3)
    assert (closed >= m).all()


@pytest.mark.parametrize("radius", [1, 2, 3])
def test_morphology_matches_naive_filters(radius):
    rng = np.random.default_rng(radius)
    m = rng.random((24, 24)) < 0.4
    assert (dilate(m, radius) == oracles.naive_dilate(m, radius)).all()
    assert (erode(m, radius) == oracles.naive_erode(m, radius)).all()


@settings(max_examples=30, deadline=None)
@given(arrays(bool, (12, 12)), st.integers(0, 3), st.integers(0, 3))
def test_morphology_extensive_and_monotone(m, r1, r2):
    lo, hi = sorted((r1, r2))
    assert (dilate(m, lo) >= m).all()
    assert (erode(m, lo) <= m).all()
    assert (dilate(m, hi) >= dilate(m, lo)).all()
    assert (erode(m, hi) <= erode(m, lo)).all()


def test_edt_all_foreground_square():
    d = distance_transform(np.ones((5, 5), bool))
    # outside the image is background: centre is 3 pixels from the ring
    assert d[2, 2] == 3.0
    assert d[0, 0] == 1.0


def test_edt_single_pixel_is_one():
    m = np.zeros((7, 7), bool)
    m[3, 3] = True
    d = distance_transform(m)
    assert d[3, 3] == 1.0 and d.sum() == 1.0


@pytest.mark.parametrize("seed", range(3))
def test_edt_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((32, 40)) < 0.8
    d = distance_transform(m)
    np.testing.assert_allclose(d, oracles.brute_edt(m), atol=1e-12)
    assert (d[~m] == 0).all() and (d[m] > 0).all()


def test_label_png_roundtrip(tmp_path):
    lab = np.random.default_rng(1).integers(0, 65536, size=(30, 20)).astype(np.uint32)
    out = write_labels(tmp_path / "labels.png", lab)
    assert out.suffix == ".png"
    assert (read_labels(out) == lab).all()


def test_large_ids_go_to_rle_sidecar(tmp_path):
    lab = np.zeros((6, 9), dtype=np.uint32)
    lab[1, 2:6] = 70000
    lab[4, 0:9] = 3
    out = write_labels(tmp_path / "labels.png", lab)
    assert out.name == "labels.rle.txt"
    lines = out.read_text().splitlines()
    assert lines[0] == "# 9 6"
    assert "70000 2 1 4" in lines and "3 0 4 9" in lines
    assert (read_labels(out) == lab).all()


def test_rle_roundtrip_random(tmp_path):
    lab = np.random.default_rng(3).integers(0, 4, size=(17, 23)).astype(np.uint32) * 100000
    write_labels_rle(tmp_path / "x.rle.txt", lab)
    assert (read_labels_rle(tmp_path / "x.rle.txt") == lab).all()
