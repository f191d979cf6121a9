import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from rfpm.errors import DegenerateInputError, FormatError, NumericError, ShapeError
from rfpm.flowio import (
    decode_flo,
    encode_flo,
    encode_ppm,
    flow_to_color,
    make_colorwheel,
    read_flo,
    read_ppm,
    write_flo,
    write_ppm,
)
from rfpm.metrics import aepe, evaluate, f1_all, outliers


def brute_f1(pred, gt):
    """Per-pixel loop over the outlier rule."""
    n = bad = 0
    for y in range(gt.shape[1]):
        for x in range(gt.shape[2]):
            e = ((pred[0, y, x] - gt[0, y, x]) ** 2 + (pred[1, y, x] - gt[1, y, x]) ** 2) ** 0.5
            m = (gt[0, y, x] ** 2 + gt[1, y, x] ** 2) ** 0.5
            bad += e > 3.0 and e > 0.05 * m
            n += 1
    return 100.0 * bad / n


# -- metrics ------------------------------------------------------------------


def test_aepe_examples(rng):
    gt = rng.normal(size=(2, 5, 6))
    assert aepe(gt, gt) == 0.0
    shifted = gt + np.array([3.0, 4.0])[:, None, None]
    assert aepe(shifted, gt) == 5.0
    half = gt.copy()
    half[0, :, :3] += 1.0
    assert aepe(half, gt) == pytest.approx(0.5, abs=1e-15)


def test_f1_rule_cases():
    gt_far = np.zeros((2, 4, 4))
    gt_far[0] = 100.0
    assert f1_all(gt_far + np.array([0.0, 4.0])[:, None, None], gt_far) == 0.0
    gt_near = np.zeros((2, 4, 4))
    gt_near[0] = 10.0
    pred = gt_near + np.array([0.0, 4.0])[:, None, None]
    assert f1_all(pred, gt_near) == 100.0
    assert f1_all(gt_near, gt_near) == 0.0
    assert brute_f1(pred, gt_near) == 100.0 and brute_f1(gt_far + np.array([0.0, 4.0])[:, None, None], gt_far) == 0.0


def test_f1_matches_brute_force(rng):
    gt = rng.normal(scale=40.0, size=(2, 9, 11))
    pred = gt + rng.normal(scale=4.0, size=gt.shape)
    assert f1_all(pred, gt) == pytest.approx(brute_f1(pred, gt), abs=1e-12)


def test_valid_mask_and_batch(rng):
    gt = np.zeros((3, 2, 4, 4))
    pred = gt.copy()
    pred[:, 0, :, :2] = 3.0
    pred[:, 1, :, :2] = 4.0
    valid = np.zeros((3, 4, 4))
    valid[:, :, :2] = 1
    res = evaluate(pred, gt, valid)
    assert res.aepe == 5.0 and res.count == 24
    assert res.f1_all == 100.0
    with pytest.raises(DegenerateInputError):
        aepe(pred, gt, np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        aepe(pred, gt[:, :, :3])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-50, 50)),
       hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-10, 10)),
       st.floats(1.0, 5.0))
def test_f1_monotone_under_error_scaling(gt, err, k):
    assert f1_all(gt + k * err, gt) >= f1_all(gt + err, gt)
    res = evaluate(gt + err, gt)
    assert 0.0 <= res.f1_all <= 100.0 and res.aepe >= 0.0


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-50, 50)),
       hnp.arrays(np.float64, (2, 3, 4), elements=st.floats(-50, 50)))
def test_aepe_flip_invariant(pred, gt):
    def flip(f):
        g = f[:, :, ::-1].copy()
        g[0] = -g[0]
        return g

    assert aepe(flip(pred), flip(gt)) == pytest.approx(aepe(pred, gt), rel=1e-12, abs=1e-12)


def test_outlier_map_shape(rng):
    assert outliers(rng.normal(size=(2, 3, 5)), rng.normal(size=(2, 3, 5))).shape == (3, 5)


# -- .flo ----------------------------------------------------------------------


def test_flo_zero_2x2_is_44_bytes(tmp_path):
    write_flo(np.zeros((2, 2, 2)), tmp_path / "z.flo")
    raw = (tmp_path / "z.flo").read_bytes()
    assert len(raw) == 44
    assert raw[:4] == b"PIEH"
    assert raw[4:12] == b"\x02\x00\x00\x00\x02\x00\x00\x00"


def test_flo_layout_interleaved_row_major():
    flow = np.zeros((2, 2, 3))
    flow[0] = np.arange(6).reshape(2, 3)
    flow[1] = -np.arange(6).reshape(2, 3)
    raw = encode_flo(flow)
    body = np.frombuffer(raw[12:], "<f4")
    assert body.tolist() == [0, 0, 1, -1, 2, -2, 3, -3, 4, -4, 5, -5]
    assert np.frombuffer(raw[4:12], "<i4").tolist() == [3, 2]


def test_flo_roundtrip_bit_exact(tmp_path, rng):
    flow = rng.normal(scale=10.0, size=(2, 7, 9)).astype(np.float32).astype(np.float64)
    write_flo(flow, tmp_path / "f.flo")
    assert np.array_equal(read_flo(tmp_path / "f.flo"), flow)
    write_flo(flow[None], tmp_path / "g.flo")
    assert (tmp_path / "g.flo").read_bytes() == (tmp_path / "f.flo").read_bytes()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6)
                  .map(lambda s: (2, *s)), elements=st.floats(-1e6, 1e6, width=32)))
def test_flo_roundtrip_property(flow):
    back = decode_flo(encode_flo(flow.astype(np.float64)))
    assert np.array_equal(back, flow.astype(np.float64))


def test_flo_errors(tmp_path):
    with pytest.raises(FormatError):
        decode_flo(b"PIEH\x01")
    with pytest.raises(FormatError):
        decode_flo(b"XXXX" + b"\x01\x00\x00\x00" * 2 + b"\x00" * 8)
    with pytest.raises(FormatError):
        decode_flo(encode_flo(np.zeros((2, 2, 2)))[:-1])
    with pytest.raises(NumericError):
        encode_flo(np.full((2, 1, 1), np.nan))
    with pytest.raises(ShapeError):
        encode_flo(np.zeros((3, 2, 2)))


# -- PPM -----------------------------------------------------------------------


def test_ppm_parses_with_independent_reader(tmp_path, rng):
    img = rng.uniform(size=(3, 5, 7))
    write_ppm(img, tmp_path / "a.ppm")
    with Image.open(tmp_path / "a.ppm") as im:
        assert im.format == "PPM" and im.size == (7, 5) and im.mode == "RGB"
        pixels = np.asarray(im)
    assert np.array_equal(pixels, np.round(img * 255).astype(np.uint8).transpose(1, 2, 0))
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), pixels)


def test_ppm_reads_foreign_file(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(4, 6, 3), dtype=np.uint8)
    Image.fromarray(pixels, "RGB").save(tmp_path / "b.ppm")
    assert np.array_equal(read_ppm(tmp_path / "b.ppm"), pixels)


def test_ppm_errors(tmp_path):
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "p3.ppm")
    (tmp_path / "short.ppm").write_bytes(b"P6\n2 2\n255\n\x00\x00")
    with pytest.raises(FormatError):
        read_ppm(tmp_path / "short.ppm")
    with pytest.raises(ShapeError):
        encode_ppm(np.zeros((4, 4)))


# -- colour coding ----------------------------------------------------------------


def test_colorwheel_layout():
    wheel = make_colorwheel()
    assert wheel.shape == (55, 3)
    assert wheel[0].tolist() == [255, 0, 0]
    assert wheel[15].tolist() == [255, 255, 0]
    assert wheel[21].tolist() == [0, 255, 0]
    assert wheel.min() >= 0 and wheel.max() <= 255


def test_zero_flow_is_white():
    img = flow_to_color(np.zeros((2, 3, 4)))
    assert img.shape == (3, 4, 3) and np.all(img == 255)


def test_opposite_flows_have_opposite_hues():
    flow = np.zeros((2, 1, 2))
    flow[0, 0, 0], flow[0, 0, 1] = 5.0, -5.0
    img = flow_to_color(flow).astype(float) / 255
    h1 = colorsys.rgb_to_hsv(*img[0, 0])[0]
    h2 = colorsys.rgb_to_hsv(*img[0, 1])[0]
    gap = abs(h1 - h2) % 1.0
    assert min(gap, 1 - gap) == pytest.approx(0.5, abs=0.05)


def test_color_saturation_clamps():
    flow = np.zeros((2, 1, 2))
    flow[0] = [[2.0, 50.0]]
    img = flow_to_color(flow, max_magnitude=2.0)
    assert np.array_equal(img[0, 0], img[0, 1])
    assert flow_to_color(flow).shape == (1, 2, 3)
