import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfpm.errors import ShapeError
from rfpm.matching import correlate, cost_volume, displacement_index, pixel_grid, warp
from rfpm.tensor import constant


def brute_correlation(f1, f2, d, normalize=True):
    """Per-pixel, per-displacement loop with explicit bounds checks."""
    B, C, H, W = f1.shape
    k = 2 * d + 1
    out = np.zeros((B, k * k, H, W))
    for b in range(B):
        for dy in range(-d, d + 1):
            for dx in range(-d, d + 1):
                ch = (dy + d) * k + (dx + d)
                for y in range(H):
                    for x in range(W):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < H and 0 <= xx < W:
                            out[b, ch, y, x] = sum(f1[b, c, y, x] * f2[b, c, yy, xx] for c in range(C))
    return out / C if normalize else out


def test_pixel_grid_layout():
    g = pixel_grid(2, 3, 4)
    assert g.shape == (2, 2, 3, 4)
    assert g[1, 0, 2, 3] == 3 and g[1, 1, 2, 3] == 2


def test_warp_zero_flow_is_identity(rng):
    f = rng.normal(size=(2, 5, 6, 7))
    assert np.array_equal(warp(constant(f), constant(np.zeros((2, 2, 6, 7)))).value, f)


def test_warp_integer_shift(rng):
    f = rng.normal(size=(1, 2, 6, 6))
    flow = np.zeros((1, 2, 6, 6))
    flow[:, 0] = 1.0
    out = warp(constant(f), constant(flow)).value
    assert np.array_equal(out[..., :5], f[..., 1:])
    assert np.all(out[..., 5] == 0.0)


def test_warp_shape_check():
    with pytest.raises(ShapeError):
        warp(constant(np.zeros((1, 2, 4, 4))), constant(np.zeros((1, 2, 4, 5))))


def test_displacement_index_ordering():
    assert displacement_index(-3, -3, 3) == 0
    assert displacement_index(0, 0, 3) == 24
    assert displacement_index(3, 3, 3) == 48
    assert displacement_index(1, 0, 1) == 5


@pytest.mark.parametrize("normalize", [True, False])
def test_correlate_matches_brute_force(rng, normalize):
    f1, f2 = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(2, 3, 7, 6))
    ours = correlate(constant(f1), constant(f2), 2, normalize).value
    assert np.allclose(ours, brute_correlation(f1, f2, 2, normalize), rtol=0, atol=1e-12)


def test_correlate_constant_maps():
    f = constant(np.ones((1, 4, 9, 9)))
    v = correlate(f, f, 3).value
    assert v.shape == (1, 49, 9, 9)
    assert np.all(v[:, :, 3:6, 3:6] == 1.0)
    # corner pixel: only displacements staying inside the map count
    assert v[0, displacement_index(-1, -1, 3), 0, 0] == 0.0
    assert v[0, displacement_index(1, 1, 3), 0, 0] == 1.0


def test_correlate_errors():
    with pytest.raises(ShapeError):
        correlate(constant(np.zeros((1, 2, 4, 4))), constant(np.zeros((1, 3, 4, 4))), 1)
    with pytest.raises(ValueError):
        correlate(constant(np.zeros((1, 2, 4, 4))), constant(np.zeros((1, 2, 4, 4))), -1)


@pytest.mark.parametrize("shift", [(1, 0), (0, 1), (-1, 0), (0, -1), (1, -1)])
def test_shifted_copy_peaks_at_shift(rng, shift):
    d = 3
    sx, sy = shift
    f1 = rng.normal(size=(1, 16, 20, 20))
    f1 /= np.linalg.norm(f1, axis=1, keepdims=True)  # unit vectors: the exact match is the unique maximum
    f2 = np.roll(f1, (sy, sx), axis=(2, 3))  # f2(p + s) = f1(p)
    vol = correlate(constant(f1), constant(f2), d).value
    ref = brute_correlation(f1, f2, d)
    inner = (slice(None), slice(d + 1, 20 - d - 1), slice(d + 1, 20 - d - 1))
    best = np.argmax(ref[0][inner], axis=0)
    assert np.all(best == displacement_index(sx, sy, d))
    assert np.array_equal(np.argmax(vol[0][inner], axis=0), best)


def test_self_correlation_center_channel_and_cauchy_schwarz(rng):
    d = 2
    f = rng.normal(size=(1, 5, 10, 10))
    v = correlate(constant(f), constant(f), d).value[0]
    center = (f[0] ** 2).sum(0) / 5
    assert np.allclose(v[displacement_index(0, 0, d)], center, rtol=0, atol=1e-12)
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            for y in range(d, 10 - d):
                for x in range(d, 10 - d):
                    bound = np.sqrt(center[y, x] * center[y + dy, x + dx])
                    assert v[displacement_index(dx, dy, d), y, x] <= bound + 1e-12


def test_cost_volume_with_true_flow_aligns(rng):
    """Warping frame t+1 back with the true flow makes the zero displacement the best match."""
    f1 = rng.normal(size=(1, 8, 16, 16))
    f1 /= np.linalg.norm(f1, axis=1, keepdims=True)
    f2 = np.roll(f1, (0, 2), axis=(2, 3))
    flow = np.zeros((1, 2, 16, 16))
    flow[:, 0] = 2.0
    vol = cost_volume(constant(f1), constant(f2), constant(flow), 1).value[0]
    inner = (slice(None), slice(2, 14), slice(2, 13))
    assert np.all(np.argmax(vol[inner], axis=0) == displacement_index(0, 0, 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2), st.integers(1, 3), st.integers(2, 6), st.integers(2, 6), st.integers(0, 10_000))
def test_correlate_property_against_brute_force(d, c, h, w, seed):
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(1, c, h, w)), rng.normal(size=(1, c, h, w))
    assert np.allclose(correlate(constant(f1), constant(f2), d).value, brute_correlation(f1, f2, d), atol=1e-12)
