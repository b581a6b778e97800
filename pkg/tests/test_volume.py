import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from needleloc.phantom import SceneSpec, generate_scene, rasterize
from needleloc.volume import (
    ConstantVolume,
    OutOfBounds,
    Slice2D,
    VoxelVolume,
    ball_mean_positive,
    clamp_normalize,
    disk_footprint,
    grey_opening,
    read_volume,
    sample_trilinear,
    segment_profile,
    top_hat_volume,
    white_top_hat,
    write_volume,
)


def shifted_extreme(img, radius, reduce, pad):
    """Brute-force erosion/dilation: pad, then reduce over every disk offset."""
    r = radius
    padded = np.pad(img, r, constant_values=pad)
    out = np.full(img.shape, pad, dtype=float)
    ny, nx = img.shape
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx * dx + dy * dy > r * r:
                continue
            window = padded[r + dy : r + dy + ny, r + dx : r + dx + nx]
            out = reduce(out, window)
    return out


def oracle_top_hat(img, radius):
    eroded = shifted_extreme(img, radius, np.minimum, np.inf)
    opened = shifted_extreme(eroded, radius, np.maximum, -np.inf)
    return img - opened


def ramp_line_slice(n=256, width=2, line_hu=900.0):
    ramp = np.tile(np.linspace(0.0, 300.0, n), (n, 1))
    img = ramp.copy()
    c = n // 2
    img[:, c : c + width] += line_hu
    return img, c


class TestTrilinear:
    def test_voxel_centre_is_exact(self):
        data = np.zeros((3, 4, 5))
        data[1, 2, 3] = 500.0
        vol = VoxelVolume(data, (0.5, 0.7, 2.0), (1.0, -2.0, 3.0))
        p = vol.to_world([3, 2, 1])
        assert sample_trilinear(vol, p) == 500.0

    def test_linear_between_voxels(self):
        data = np.zeros((1, 1, 2))
        data[0, 0, 1] = 100.0
        vol = VoxelVolume(data, (2.0, 1.0, 1.0))
        assert sample_trilinear(vol, [1.0, 0.0, 0.0]) == pytest.approx(50.0)

    @given(st.floats(-500, 500), st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)))
    def test_constant_volume(self, value, frac):
        vol = VoxelVolume(np.full((4, 5, 6), value), (0.8, 0.8, 5.0))
        p = vol.lower + np.array(frac) * (vol.upper - vol.lower)
        assert sample_trilinear(vol, p) == pytest.approx(value, abs=1e-9 * (1 + abs(value)))

    def test_affine_field_reproduced(self):
        z, y, x = np.mgrid[0:4, 0:5, 0:6].astype(float)
        vol = VoxelVolume(3 * x - 2 * y + 7 * z + 1, (1.0, 1.0, 1.0))
        rng = np.random.default_rng(0)
        pts = rng.uniform(vol.lower, vol.upper, size=(200, 3))
        expected = 3 * pts[:, 0] - 2 * pts[:, 1] + 7 * pts[:, 2] + 1
        np.testing.assert_allclose(sample_trilinear(vol, pts), expected, atol=1e-9)

    def test_out_of_bounds(self):
        vol = VoxelVolume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0))
        with pytest.raises(OutOfBounds):
            sample_trilinear(vol, [1.5, 0.0, 0.0])

    def test_single_voxel_axis(self):
        vol = VoxelVolume(np.full((1, 3, 3), 7.0), (1.0, 1.0, 1.0))
        assert sample_trilinear(vol, [1.2, 0.4, 0.0]) == 7.0


class TestProfile:
    def test_count_arithmetic(self):
        vol = VoxelVolume(np.zeros((3, 20, 20)), (1.0, 1.0, 1.0))
        assert len(segment_profile(vol, ((1, 1, 1), (11, 1, 1)), step=1.0)) == 11
        assert len(segment_profile(vol, ((1, 1, 1), (11.5, 1, 1)), step=1.0)) == 12

    def test_constant_region(self):
        vol = VoxelVolume(np.full((3, 20, 20), 800.0), (1.0, 1.0, 1.0))
        prof = segment_profile(vol, ((1, 1, 0), (15, 12, 2)), step=0.7)
        assert np.all(prof == 800.0)

    def test_reversed_segment_reverses_profile(self):
        rng = np.random.default_rng(3)
        vol = VoxelVolume(rng.normal(size=(5, 12, 12)), (0.8, 0.8, 2.0))
        a, b = np.array([0.5, 1.0, 0.3]), np.array([7.9, 8.1, 7.5])
        np.testing.assert_allclose(segment_profile(vol, (a, b)), segment_profile(vol, (b, a))[::-1], atol=1e-12)

    def test_needle_profile_beats_background(self):
        spec = SceneSpec(n_needles=1, rng_seed=4)
        gt = generate_scene(spec)
        vol = rasterize(gt)
        n = gt.needles[0]
        on_axis = segment_profile(vol, (n.tip, n.handle)).mean()
        # a parallel segment 10 mm away, kept inside the volume
        for shift in ([10, 0, 0], [-10, 0, 0], [0, 10, 0], [0, -10, 0]):
            a, b = n.tip + shift, n.handle + shift
            if vol.contains(a) and vol.contains(b):
                assert on_axis > segment_profile(vol, (a, b)).mean()
                break
        else:
            pytest.skip("no in-bounds parallel segment")


class TestTopHat:
    @pytest.mark.parametrize("radius", [1, 2, 5])
    def test_matches_shifted_min_max_oracle(self, radius):
        rng = np.random.default_rng(radius)
        img = rng.uniform(0, 2000, size=(23, 31))
        np.testing.assert_allclose(white_top_hat(img, radius), oracle_top_hat(img, radius), atol=1e-9)

    def test_constant_slice_is_zero(self):
        out = white_top_hat(Slice2D(np.full((40, 40), 123.0)), 5)
        assert isinstance(out, Slice2D)
        assert np.all(out.data == 0.0)

    def test_single_bright_pixel_retained(self):
        img = np.zeros((21, 21))
        img[10, 10] = 1234.0
        out = white_top_hat(img, 5)
        assert out[10, 10] == 1234.0
        assert out.sum() == 1234.0

    def test_line_on_ramp(self):
        img, c = ramp_line_slice()
        out = white_top_hat(img, 5)
        oracle = oracle_top_hat(img, 5)
        np.testing.assert_allclose(out, oracle, atol=1e-9)
        assert out[:, c : c + 2].min() >= 850.0
        background = np.delete(out, [c, c + 1], axis=1)
        assert background.max() <= 10.0

    @given(hnp.arrays(np.float64, (12, 14), elements=st.floats(0, 3000)), st.integers(1, 4))
    @settings(max_examples=50)
    def test_bounded_by_input(self, img, radius):
        out = white_top_hat(img, radius)
        assert np.all(out >= 0)
        assert np.all(out <= img + 1e-9)

    @given(hnp.arrays(np.float64, (10, 10), elements=st.floats(-1000, 3000)), st.integers(1, 3))
    @settings(max_examples=50)
    def test_opening_idempotent(self, img, radius):
        once = grey_opening(img, radius)
        np.testing.assert_allclose(grey_opening(once, radius), once, atol=1e-9)

    def test_volume_is_slicewise(self):
        rng = np.random.default_rng(1)
        vol = VoxelVolume(rng.uniform(0, 100, (3, 16, 16)), (1.0, 1.0, 3.0))
        th = top_hat_volume(vol, 2)
        for k in range(3):
            np.testing.assert_allclose(th.data[k], white_top_hat(vol.data[k], 2))

    def test_disk_footprint_shape(self):
        fp = disk_footprint(5)
        assert fp.shape == (11, 11)
        assert fp[5, 0] and fp[5, 10] and not fp[0, 0]

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            white_top_hat(np.zeros((5, 5)), 0)


class TestClampNormalize:
    def _vol(self, values):
        return VoxelVolume(np.asarray(values, dtype=float).reshape(1, 1, -1), (1.0, 1.0, 1.0))

    def test_fixed_points(self):
        out = clamp_normalize(self._vol([800.0, 1500.0, -1000.0, -3000.0, -100.0])).data.ravel()
        assert out[0] == 1.0 and out[1] == 1.0
        assert out[2] == -1.0 and out[3] == -1.0
        assert out[4] == pytest.approx(0.0)

    @given(st.lists(st.floats(-5000, 5000), min_size=2, max_size=50))
    def test_range_and_monotone(self, values):
        out = clamp_normalize(self._vol(values)).data.ravel()
        assert out.min() >= -1.0 and out.max() <= 1.0
        order = np.argsort(values, kind="stable")
        assert np.all(np.diff(out[order]) >= 0)

    def test_collapsed_range(self):
        with pytest.raises(ConstantVolume):
            clamp_normalize(self._vol([1.0, 2.0]), max_hu=-1000.0)


class TestVolumeIO:
    def test_roundtrip_f32(self, tmp_path):
        rng = np.random.default_rng(0)
        vol = VoxelVolume(rng.normal(0, 300, (4, 5, 6)).astype(np.float32), (0.8, 0.9, 5.0), (1.0, 2.0, -3.0))
        header = write_volume(vol, tmp_path, "a")
        back = read_volume(header)
        np.testing.assert_array_equal(back.data, vol.data)
        assert back.spacing == vol.spacing and back.origin == vol.origin
        write_volume(back, tmp_path, "b")
        assert (tmp_path / "a.vol.raw").read_bytes() == (tmp_path / "b.vol.raw").read_bytes()

    def test_header_and_order(self, tmp_path):
        data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
        header = write_volume(VoxelVolume(data, (1.0, 1.0, 1.0)), tmp_path, "v", dtype="i16")
        meta = json.loads(header.read_text())
        assert meta == {
            "dims": [4, 3, 2],
            "spacing_mm": [1.0, 1.0, 1.0],
            "origin_mm": [0.0, 0.0, 0.0],
            "dtype": "i16",
            "data_file": "v.vol.raw",
        }
        raw = np.frombuffer((tmp_path / "v.vol.raw").read_bytes(), dtype="<i2")
        # x fastest, z slowest
        assert raw[1] == data[0, 0, 1] and raw[4] == data[0, 1, 0] and raw[12] == data[1, 0, 0]
        np.testing.assert_array_equal(read_volume(header).data, data)

    def test_truncated_raw(self, tmp_path):
        header = write_volume(VoxelVolume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0)), tmp_path, "t")
        (tmp_path / "t.vol.raw").write_bytes(b"\0" * 5)
        with pytest.raises(ValueError):
            read_volume(header)


class TestVolumeType:
    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            VoxelVolume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            VoxelVolume(np.full((2, 2, 2), math.nan), (1.0, 1.0, 1.0))

    def test_dims_and_bounds(self):
        vol = VoxelVolume(np.zeros((30, 20, 10)), (0.5, 0.5, 2.0), (1.0, 1.0, 1.0))
        assert vol.dims == (10, 20, 30)
        np.testing.assert_allclose(vol.upper, [5.5, 10.5, 59.0])


def test_ball_mean_positive_ignores_non_positive():
    data = np.full((5, 9, 9), -50.0)
    data[2, 4, 4] = 200.0
    vol = VoxelVolume(data, (1.0, 1.0, 1.0))
    w = ball_mean_positive(vol, [4.0, 4.0, 2.0], 1.5)
    assert 0 < w <= 200.0
    assert ball_mean_positive(VoxelVolume(np.zeros((3, 3, 3)), (1.0, 1.0, 1.0)), [1, 1, 1], 1.0) == 0.0
