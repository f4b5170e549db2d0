import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from helpers import trilinear_corner_oracle

from scbct.dataio import (
    TruncatedVolumeError, Volume, VolumeFormatError, grid_coords, load_volume, make_phantom,
    normalize_volume, sample_points, save_volume, shipped_phantom_path, trilinear_sample,
)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.tuples(*[st.floats(0.01, 10.0)] * 3))
def test_roundtrip_bit_exact(tmp_path_factory, data, spacing):
    path = tmp_path_factory.mktemp("v") / "a.vol"
    save_volume(Volume(data, spacing), path)
    back = load_volume(path)
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing_mm == tuple(float(s) for s in spacing)


def test_roundtrip_non_cubic_layout(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    save_volume(Volume(data, (1.0, 2.0, 3.0)), tmp_path / "v.vol")
    raw = np.fromfile(tmp_path / "v.raw", dtype="<f4")
    # x-fastest: the first two values differ along x
    assert raw[0] == data[0, 0, 0] and raw[1] == data[1, 0, 0] and raw[2] == data[0, 1, 0]
    np.testing.assert_array_equal(load_volume(tmp_path / "v.raw").data, data)


def test_truncated_payload(tmp_path):
    save_volume(Volume(np.zeros((64, 64, 64), np.float32), (1.0, 1.0, 1.0)), tmp_path / "t.vol")
    raw = tmp_path / "t.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(TruncatedVolumeError):
        load_volume(tmp_path / "t.vol")


@pytest.mark.parametrize("key", ["dims", "spacing_mm", "dtype", "order"])
def test_missing_header_key_named(tmp_path, key):
    save_volume(Volume(np.zeros((2, 2, 2), np.float32), (1.0, 1.0, 1.0)), tmp_path / "h.vol")
    hdr = tmp_path / "h.vol"
    hdr.write_text("".join(l + "\n" for l in hdr.read_text().splitlines() if not l.startswith(key + "=")))
    with pytest.raises(VolumeFormatError, match=key):
        load_volume(hdr)


def test_bad_header_value_named(tmp_path):
    save_volume(Volume(np.zeros((2, 2, 2), np.float32), (1.0, 1.0, 1.0)), tmp_path / "h.vol")
    hdr = tmp_path / "h.vol"
    hdr.write_text(hdr.read_text().replace("dtype=f32le", "dtype=f64be"))
    with pytest.raises(VolumeFormatError, match="dtype"):
        load_volume(hdr)


def test_shipped_sphere():
    v = load_volume(shipped_phantom_path())
    assert v.shape == (32, 32, 32)
    assert v.data[16, 16, 16] == 1.0
    assert v.data[0, 0, 0] == 0.0
    np.testing.assert_array_equal(v.data, make_phantom("sphere", 32).data)


def test_normalize_endpoints_and_clamp():
    v = Volume(np.array([-5.0, 0.0, 2.0, 4.0, 9.0]).reshape(5, 1, 1), (1.0, 1.0, 1.0))
    out = normalize_volume(v, 0.0, 4.0).data.ravel()
    np.testing.assert_allclose(out, [0.0, 0.0, 0.5, 1.0, 1.0])


def test_normalize_idempotent():
    rng = np.random.default_rng(0)
    v = Volume(rng.uniform(0, 1, (5, 5, 5)), (1.0, 1.0, 1.0))
    np.testing.assert_array_equal(normalize_volume(v, 0.0, 1.0).data, v.data)


@pytest.mark.parametrize("lo,hi", [(1.0, 1.0), (2.0, 1.0)])
def test_normalize_rejects_empty_range(lo, hi):
    with pytest.raises(ValueError):
        normalize_volume(Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)), lo, hi)


def test_trilinear_at_voxel_centers():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(5, 6, 7))
    coords = grid_coords(data.shape)
    np.testing.assert_allclose(trilinear_sample(data, coords), data.ravel(order="F"), atol=1e-12)


def test_trilinear_midpoint_x():
    data = np.zeros((4, 3, 3))
    data[1] = 2.0
    data[2] = 5.0
    # voxel centers x=1 and x=2 sit at -1/3 and +1/3
    assert trilinear_sample(data, [0.0, 0.3, -0.7]) == pytest.approx(3.5, abs=1e-12)


def test_trilinear_matches_corner_oracle():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(8, 8, 8))
    p = rng.uniform(-1, 1, size=(1000, 3))
    np.testing.assert_allclose(trilinear_sample(data, p), trilinear_corner_oracle(data, p), rtol=0, atol=1e-12)


def test_trilinear_clamps_outside():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(4, 4, 4))
    inside = np.array([[1.0, -1.0, 0.2]])
    outside = np.array([[3.0, -7.0, 0.2]])
    np.testing.assert_array_equal(trilinear_sample(data, outside), trilinear_sample(data, inside))


@settings(max_examples=40, deadline=None)
@given(st.tuples(*[st.floats(-10, 10)] * 4), st.tuples(*[st.integers(2, 9)] * 3))
def test_trilinear_exact_on_linear_field(coef, dims):
    a, b, c, d = coef
    g = grid_coords(dims)
    f = lambda p: a * p[:, 0] + b * p[:, 1] + c * p[:, 2] + d
    data = f(g).reshape(dims, order="F")
    q = np.random.default_rng(0).uniform(-1, 1, size=(200, 3))
    np.testing.assert_allclose(trilinear_sample(data, q), f(q), atol=1e-9)


def test_sample_points_deterministic():
    v = make_phantom("shells", 16, seed=2)
    a, b = sample_points(v, 500, 9), sample_points(v, 500, 9)
    np.testing.assert_array_equal(a.coords, b.coords)
    np.testing.assert_array_equal(a.gt_values, b.gt_values)
    assert not np.array_equal(a.coords, sample_points(v, 500, 10).coords)


def test_sample_points_constant_volume():
    v = Volume(np.full((6, 6, 6), 0.37), (1.0, 1.0, 1.0))
    pts = sample_points(v, 1000, 0)
    np.testing.assert_allclose(pts.gt_values, 0.37, atol=1e-15)
    assert len(pts) == 1000 and pts.gt_values.shape == (1000,)


@pytest.mark.parametrize("strategy", ["uniform", "foreground"])
def test_sample_points_strictly_inside(strategy):
    pts = sample_points(make_phantom("sphere", 16), 5000, 4, strategy)
    assert np.all(pts.coords > -1.0) and np.all(pts.coords < 1.0)


def test_sample_points_uniformity_chi_square():
    pts = sample_points(Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)), 100_000, 7)
    for ax in range(3):
        counts, _ = np.histogram(pts.coords[:, ax], bins=20, range=(-1, 1))
        assert stats.chisquare(counts).pvalue > 0.001


def test_sample_points_rejects_zero():
    with pytest.raises(ValueError):
        sample_points(make_phantom("sphere", 8), 0, 0)


def test_phantoms_in_unit_range():
    for kind in ("sphere", "cube", "shells"):
        v = make_phantom(kind, 24, seed=5)
        assert v.data.min() >= 0.0 and v.data.max() <= 1.0
        assert v.spacing_mm == pytest.approx((409.6 / 24,) * 3)
    with pytest.raises(ValueError):
        make_phantom("torus", 8)


def test_shells_vary_with_seed():
    assert not np.array_equal(make_phantom("shells", 16, 0).data, make_phantom("shells", 16, 1).data)
    np.testing.assert_array_equal(make_phantom("shells", 16, 3).data, make_phantom("shells", 16, 3).data)
