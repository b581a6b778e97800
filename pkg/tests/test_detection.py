import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from needleloc.detection import (
    LOG_EPS,
    DetectionNoise,
    FocalParams,
    HeatmapGeometry,
    Keypoint,
    LossWeights,
    ZeroKeypoints,
    cosine_angle_loss,
    decode_via_heatmaps,
    encode_targets,
    extract_peaks,
    focal_loss,
    fuse_slices,
    heatmap_gt,
    offset_decode,
    offset_encode,
    offset_loss,
    project_to_slices,
    simulate_detections,
    smooth_l1,
    total_loss,
)
from needleloc.keypoints import (
    HANDLE,
    TIP,
    Detection2D,
    read_detections,
    read_detections_2d,
    write_detections,
    write_detections_2d,
)
from needleloc.phantom import SceneSpec, generate_scene, rasterize
from needleloc.volume import VoxelVolume

GEOM = HeatmapGeometry(slice_dims=(64, 64), spacing=(1.0, 1.0), downsample=4)


class TestHeatmap:
    def test_on_grid_centre_is_one(self):
        hm = heatmap_gt([Keypoint(TIP, 20.0, 12.0)], GEOM)
        assert hm.tip[3, 5] == 1.0
        assert hm.tip.max() == 1.0
        assert hm.handle.max() == 0.0

    def test_half_height(self):
        # sigma_px * sqrt(2 ln 2) == 3 heatmap pixels
        radius = 9.0 / math.sqrt(2 * math.log(2))
        geom = HeatmapGeometry((32, 32), (1.0, 1.0), downsample=1, tip_radius_mm=radius)
        hm = heatmap_gt([Keypoint(TIP, 10.0, 10.0)], geom)
        assert hm.tip[10, 13] == pytest.approx(0.5, abs=1e-6)
        assert hm.tip[7, 10] == pytest.approx(0.5, abs=1e-6)

    def test_sigma_is_third_of_radius(self):
        geom = HeatmapGeometry((64, 64), (0.5, 0.8), downsample=4, tip_radius_mm=3.0, handle_radius_mm=4.0)
        assert geom.sigma_px(TIP) == pytest.approx((1.0 / 2.0, 1.0 / 3.2))
        assert geom.sigma_px(HANDLE) == pytest.approx((4.0 / 3.0 / 2.0, 4.0 / 3.0 / 3.2))

    def test_overlap_is_max_not_sum(self):
        a, b = Keypoint(TIP, 16.0, 16.0), Keypoint(TIP, 24.0, 16.0)
        both = heatmap_gt([a, b], GEOM).tip
        ha, hb = heatmap_gt([a], GEOM).tip, heatmap_gt([b], GEOM).tip
        np.testing.assert_array_equal(both, np.maximum(ha, hb))

    @given(st.lists(st.tuples(st.floats(0, 63.9), st.floats(0, 63.9), st.sampled_from([TIP, HANDLE])), max_size=8))
    @settings(max_examples=50)
    def test_values_in_unit_interval(self, pts):
        hm = heatmap_gt([Keypoint(c, x, y) for x, y, c in pts], GEOM)
        for m in (hm.tip, hm.handle):
            assert m.min() >= 0.0 and m.max() <= 1.0

    def test_outside_slice_rejected(self):
        with pytest.raises(ValueError):
            heatmap_gt([Keypoint(TIP, 80.0, 1.0)], GEOM)


class TestFocal:
    def test_perfect_prediction(self):
        t = encode_targets([Keypoint(TIP, 20.0, 20.0), Keypoint(HANDLE, 40.0, 8.0)], GEOM)
        gt = t.heatmap.stacked()
        pred = np.where(gt == 1.0, 1.0 - LOG_EPS, LOG_EPS)
        assert focal_loss(pred, gt) <= 1e-5

    def test_single_pixel_hand_value(self):
        expected = -(0.1**2) * math.log(0.9)
        got = focal_loss(np.array([[0.9]]), np.array([[1.0]]), FocalParams(2.0, 4.0), n_keypoints=1)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(1.054e-3, abs=1e-6)

    def test_negative_pixel_term(self):
        # H = 0.5, prediction 0.2: (1-H)^4 * 0.2^2 * -log(0.8)
        got = focal_loss(np.array([0.9, 0.2]), np.array([1.0, 0.5]), n_keypoints=1)
        expected = -(0.01 * math.log(0.9)) - (0.5**4 * 0.04 * math.log(0.8))
        assert got == pytest.approx(expected, rel=1e-12)

    @given(hnp.arrays(np.float64, (2, 6, 6), elements=st.floats(0, 1)), st.integers(0, 71))
    @settings(max_examples=60)
    def test_non_negative(self, pred, pos):
        gt = np.zeros((2, 6, 6))
        gt.flat[pos] = 1.0
        assert focal_loss(pred, gt) >= 0.0

    def test_decreases_as_keypoint_prediction_rises(self):
        gt = heatmap_gt([Keypoint(TIP, 20.0, 20.0)], GEOM).stacked()
        pred = np.full_like(gt, 0.1)
        losses = []
        for v in np.linspace(0.05, 0.999, 25):
            pred[gt == 1.0] = v
            losses.append(focal_loss(pred, gt))
        assert np.all(np.diff(losses) < 0)

    def test_zero_keypoints(self):
        with pytest.raises(ZeroKeypoints):
            focal_loss(np.full((3, 3), 0.5), np.zeros((3, 3)))


class TestOffsets:
    def test_examples(self):
        base, off = offset_encode(10.0, 4)
        assert int(base) == 2 and float(off) == 0.5
        base, off = offset_encode(12.0, 4)
        assert int(base) == 3 and float(off) == 0.0

    @pytest.mark.parametrize("d", [1, 2, 3, 4, 8])
    def test_roundtrip(self, d):
        x = np.random.default_rng(d).uniform(0, 512, 1000)
        base, off = offset_encode(x, d)
        assert np.all((off >= 0) & (off < 1))
        np.testing.assert_allclose(offset_decode(base, off, d), x, atol=1e-9, rtol=0)

    def test_invalid_factor(self):
        with pytest.raises(ValueError):
            offset_encode(1.0, 0)


class TestRegressionLosses:
    def test_smooth_l1_branches(self):
        assert smooth_l1([1.0], [1.0]) == 0.0
        assert smooth_l1([0.5], [0.0]) == 0.125
        assert smooth_l1([2.0], [0.0]) == 1.5
        assert smooth_l1([0.5, 2.0], [0.0, 0.0]) == pytest.approx((0.125 + 1.5) / 2)

    def test_smooth_l1_length_mismatch(self):
        with pytest.raises(ValueError):
            smooth_l1([1.0, 2.0], [1.0])

    def test_offset_loss_sums_components(self):
        pred = [[0.5, 2.0], [0.0, 0.0]]
        gt = [[0.0, 0.0], [0.0, 0.0]]
        assert offset_loss(pred, gt) == pytest.approx((0.125 + 1.5) / 2)

    def test_cosine_examples(self):
        assert cosine_angle_loss([1.0], [1.0]) == 0.0
        assert cosine_angle_loss([0.0], [math.pi]) == pytest.approx(2.0)
        assert cosine_angle_loss([0.1], [2 * math.pi + 0.1]) == pytest.approx(0.0, abs=1e-15)

    @given(st.floats(-20, 20), st.floats(-20, 20), st.integers(-3, 3))
    def test_cosine_periodic_and_bounded(self, a, b, k):
        base = cosine_angle_loss([a], [b])
        assert 0.0 <= base <= 2.0
        assert cosine_angle_loss([a + 2 * math.pi * k], [b]) == pytest.approx(base, abs=1e-12)

    def test_cosine_empty(self):
        with pytest.raises(ValueError):
            cosine_angle_loss([], [])

    def test_total_loss(self):
        assert total_loss(1.0, 1.0, 1.0) == 4.0
        assert total_loss(0.0, 0.0, 0.0) == 0.0
        w = LossWeights()
        w2 = LossWeights(2 * w.lambda_hm, 2 * w.lambda_off, 2 * w.lambda_ang)
        assert total_loss(0.3, 0.7, 1.1, w2) == pytest.approx(2 * total_loss(0.3, 0.7, 1.1, w))


class TestPeaks:
    def test_exact_decoding(self):
        kps = [Keypoint(TIP, 13.37, 41.2, 1.0), Keypoint(TIP, 50.1, 9.9, 2.0), Keypoint(HANDLE, 30.5, 30.25, 4.0)]
        t = encode_targets(kps, GEOM)
        dets = extract_peaks(t.heatmap, t.offsets, t.angles, 0.3, slice_index=7)
        assert len(dets) == 3
        for k in kps:
            match = [d for d in dets if d.cls == k.cls and abs(d.center[0] - k.x) < 1e-6 and abs(d.center[1] - k.y) < 1e-6]
            assert len(match) == 1
            assert match[0].angle == pytest.approx(k.angle)
            assert match[0].z == 7 and match[0].confidence == 1.0

    def test_uniform_below_threshold(self):
        hm = heatmap_gt([], GEOM)
        hm.tip[:] = 0.2
        hm.handle[:] = 0.2
        z = np.zeros((2,) + GEOM.shape)
        assert extract_peaks(hm, z, z[0], 0.3) == []

    def test_plateau_emits_first_in_scan_order(self):
        hm = heatmap_gt([], GEOM)
        hm.tip[4, 5] = hm.tip[4, 6] = hm.tip[5, 5] = 0.8
        z = np.zeros((2,) + GEOM.shape)
        dets = extract_peaks(hm, z, z[0], 0.3)
        assert len(dets) == 1
        assert dets[0].center == (5 * 4.0, 4 * 4.0)

    def test_adjacent_keypoints(self):
        # one heatmap pixel apart: both base pixels reach 1, forming a plateau
        kps = [Keypoint(TIP, 20.0, 20.0), Keypoint(TIP, 24.0, 20.0)]
        t = encode_targets(kps, GEOM)
        dets = extract_peaks(t.heatmap, t.offsets, t.angles, 0.3)
        assert len(dets) == 1 and dets[0].center == (20.0, 20.0)

    def test_threshold_range(self):
        z = np.zeros((2,) + GEOM.shape)
        with pytest.raises(ValueError):
            extract_peaks(heatmap_gt([], GEOM), z, z[0], 1.0)


class TestFusion:
    def vol(self, nz=4):
        return VoxelVolume(np.full((nz, 20, 20), 100.0), (1.0, 1.0, 5.0))

    def test_singleton(self):
        fused = fuse_slices([Detection2D(TIP, 2, (3.0, 4.0), 0.5)], self.vol())
        assert len(fused.tips) == 1
        np.testing.assert_allclose(fused.tips[0].pos, [3.0, 4.0, 10.0])

    def test_equal_weights_midpoint(self):
        dets = [Detection2D(HANDLE, 1, (5.0, 5.0), 0.2), Detection2D(HANDLE, 2, (5.0, 5.0), 0.4)]
        fused = fuse_slices(dets, self.vol())
        assert len(fused.handles) == 1
        assert fused.handles[0].pos[2] == pytest.approx(7.5)
        assert fused.handles[0].angle == pytest.approx(0.3)

    def test_weighted_centroid(self):
        data = np.zeros((2, 20, 20))
        data[0], data[1] = 300.0, 100.0
        vol = VoxelVolume(data, (1.0, 1.0, 5.0))
        dets = [Detection2D(TIP, 0, (5.0, 5.0), 0.0), Detection2D(TIP, 1, (5.0, 5.0), 0.0)]
        assert fuse_slices(dets, vol).tips[0].pos[2] == pytest.approx(1.25)

    def test_far_or_non_adjacent_not_linked(self):
        dets = [
            Detection2D(TIP, 0, (5.0, 5.0), 0.0),
            Detection2D(TIP, 1, (9.0, 5.0), 0.0),
            Detection2D(TIP, 3, (5.0, 5.0), 0.0),
            Detection2D(HANDLE, 1, (5.0, 5.0), 0.0),
        ]
        fused = fuse_slices(dets, self.vol())
        assert len(fused.tips) == 3 and len(fused.handles) == 1

    def test_chain_across_three_slices(self):
        dets = [Detection2D(TIP, k, (5.0 + 0.5 * k, 5.0), 0.0) for k in range(3)]
        fused = fuse_slices(dets, self.vol())
        assert len(fused.tips) == 1
        np.testing.assert_allclose(fused.tips[0].pos, [5.5, 5.0, 5.0])


class TestSimulatedDetector:
    gt = generate_scene(SceneSpec(n_needles=10, rng_seed=4))

    def test_zero_noise_identity(self):
        dets = simulate_detections(self.gt, DetectionNoise(), seed=1)
        got = sorted(map(tuple, dets.tip_positions.tolist()))
        assert got == sorted(map(tuple, self.gt.tips.tolist()))
        got = sorted(map(tuple, dets.handle_positions.tolist()))
        assert got == sorted(map(tuple, self.gt.handles.tolist()))

    def test_all_dropped(self):
        dets = simulate_detections(self.gt, DetectionNoise(p_fn=1.0), seed=1)
        assert dets.tips == [] and dets.handles == []

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_duplicate_count(self, k):
        dets = simulate_detections(self.gt, DetectionNoise(n_dup=k), seed=2)
        assert len(dets.tips) == 10 + k and len(dets.handles) == 10 + k

    def test_duplicates_sit_at_sigma_dup(self):
        dets = simulate_detections(self.gt, DetectionNoise(n_dup=2, sigma_dup=1.0), seed=2)
        gap = np.linalg.norm(dets.tip_positions[:, None] - self.gt.tips[None], axis=2)
        nearest = np.sort(gap.min(axis=1))
        np.testing.assert_allclose(nearest[-2:], 1.0, atol=1e-9)

    def test_deterministic(self):
        noise = DetectionNoise(sigma_pos=0.5, sigma_angle=0.05, p_fp=0.2, p_fn=0.1, n_dup=1)
        a = simulate_detections(self.gt, noise, seed=3)
        b = simulate_detections(self.gt, noise, seed=3)
        assert a.as_dict() == b.as_dict()

    def test_rms_jitter(self):
        gt = generate_scene(SceneSpec(n_needles=15, rng_seed=1))
        errs = []
        for s in range(30):
            dets = simulate_detections(gt, DetectionNoise(sigma_pos=0.5), seed=s)
            d = np.linalg.norm(dets.tip_positions[:, None] - gt.tips[None], axis=2).min(axis=1)
            errs.extend(d.tolist())
        assert np.sqrt(np.mean(np.square(errs))) == pytest.approx(0.5, rel=0.1)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            DetectionNoise(p_fp=1.5)


def test_json_roundtrips(tmp_path):
    gt = generate_scene(SceneSpec(n_needles=5, rng_seed=2))
    dets = simulate_detections(gt, DetectionNoise(sigma_pos=0.4, p_fp=0.2), seed=5)
    p1 = write_detections(dets, tmp_path / "a.det.json")
    p2 = write_detections(read_detections(p1), tmp_path / "b.det.json")
    assert p1.read_bytes() == p2.read_bytes()
    d2 = gt.keypoints_2d()
    q1 = write_detections_2d(d2, tmp_path / "a.det2d.json")
    q2 = write_detections_2d(read_detections_2d(q1), tmp_path / "b.det2d.json")
    assert q1.read_bytes() == q2.read_bytes()


def test_heatmap_decode_then_fuse_recovers_endpoints():
    spec = SceneSpec(n_needles=6, rng_seed=8)
    gt = generate_scene(spec)
    vol = rasterize(gt)
    geom = HeatmapGeometry.for_volume(vol)
    decoded = decode_via_heatmaps(gt.keypoints_2d(), geom)
    fused = fuse_slices(decoded, vol)
    assert len(fused.tips) == 6 and len(fused.handles) == 6
    for p in gt.tips:
        d = np.linalg.norm(fused.tip_positions - p, axis=1).min()
        # in-plane exact; through-plane snapped to the nearest slice centre
        assert d <= spec.spacing[2] / 2 + 1e-9


def test_projection_to_slices():
    gt = generate_scene(SceneSpec(n_needles=3, rng_seed=2))
    vol = rasterize(gt)
    dets = simulate_detections(gt, DetectionNoise(), seed=0)
    proj = project_to_slices(dets, vol)
    key = lambda d: (d.cls, d.z, d.center)
    assert sorted(proj, key=key) == sorted(gt.keypoints_2d(), key=key)
