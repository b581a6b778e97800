"""
Detection-stage mathematics as pure functions.

Covers the centre-point target encoding (Gaussian heatmaps, sub-pixel
offsets, per-pixel polar angles), the three training losses and their
weighted sum, peak decoding, fusion of per-slice detections into 3D
endpoints, and a seeded detector simulator that perturbs ground truth in
place of a trained network.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage

from .geometry import circular_mean, unit, wrap_angle
from .keypoints import CLASSES, HANDLE, TIP, Detection2D, DetectionSet3D, Endpoint3D
from .phantom import GroundTruth, stage_rng
from .volume import VoxelVolume, sample_trilinear

DEFAULT_DOWNSAMPLE = 4
DEFAULT_PEAK_THRESHOLD = 0.3
DEFAULT_LINK_RADIUS_MM = 2.5
DEFAULT_TIP_RADIUS_MM = 3.0
DEFAULT_HANDLE_RADIUS_MM = 4.0
SIGMA_PER_RADIUS = 1.0 / 3.0
LOG_EPS = 1e-7

STAGE_DETECT = 2


class ZeroKeypoints(ValueError):
    """Focal loss normaliser N must be at least 1."""


@dataclass(frozen=True)
class HeatmapGeometry:
    """Input slice grid plus the heatmap down-sampling factor."""

    slice_dims: tuple[int, int] = (256, 256)
    spacing: tuple[float, float] = (0.8, 0.8)
    origin: tuple[float, float] = (0.0, 0.0)
    downsample: int = DEFAULT_DOWNSAMPLE
    tip_radius_mm: float = DEFAULT_TIP_RADIUS_MM
    handle_radius_mm: float = DEFAULT_HANDLE_RADIUS_MM

    def __post_init__(self) -> None:
        if int(self.downsample) != self.downsample or self.downsample < 1:
            raise ValueError("downsample must be an integer >= 1")
        if self.tip_radius_mm <= 0 or self.handle_radius_mm <= 0:
            raise ValueError("class radii must be positive")

    @classmethod
    def for_volume(cls, vol: VoxelVolume, **kw) -> "HeatmapGeometry":
        return cls(vol.dims[:2], vol.spacing[:2], vol.origin[:2], **kw)

    @property
    def shape(self) -> tuple[int, int]:
        """Heatmap array shape (rows, cols) = (ny', nx')."""
        nx, ny = self.slice_dims
        d = self.downsample
        return -(-ny // d), -(-nx // d)

    def radius(self, cls: str) -> float:
        return self.tip_radius_mm if cls == TIP else self.handle_radius_mm

    def sigma_px(self, cls: str) -> tuple[float, float]:
        """Gaussian sigma in heatmap pixels along (x, y)."""
        sigma_mm = self.radius(cls) * SIGMA_PER_RADIUS
        return sigma_mm / (self.spacing[0] * self.downsample), sigma_mm / (self.spacing[1] * self.downsample)

    def mm_to_px(self, xy: Sequence[float]) -> tuple[float, float]:
        return (xy[0] - self.origin[0]) / self.spacing[0], (xy[1] - self.origin[1]) / self.spacing[1]

    def px_to_mm(self, xy: Sequence[float]) -> tuple[float, float]:
        return self.origin[0] + xy[0] * self.spacing[0], self.origin[1] + xy[1] * self.spacing[1]


@dataclass
class Heatmap2D:
    tip: NDArray[np.float64]
    handle: NDArray[np.float64]
    geometry: HeatmapGeometry

    def __getitem__(self, cls: str) -> NDArray[np.float64]:
        return self.tip if cls == TIP else self.handle

    def stacked(self) -> NDArray[np.float64]:
        return np.stack([self.tip, self.handle])


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0


@dataclass(frozen=True)
class LossWeights:
    lambda_hm: float = 2.0
    lambda_off: float = 1.0
    lambda_ang: float = 1.0


@dataclass(frozen=True)
class Keypoint:
    """A labelled 2D centre (mm) with its polar angle, used for encoding."""

    cls: str
    x: float
    y: float
    angle: float = 0.0


@dataclass
class EncodedTargets:
    heatmap: Heatmap2D
    offsets: NDArray[np.float64]  # (2, H, W): x then y
    angles: NDArray[np.float64]  # (H, W)
    mask: NDArray[np.bool_] = field(repr=False)


# --- offsets ---------------------------------------------------------------


def offset_encode(x: float | NDArray, d: int) -> tuple[NDArray, NDArray]:
    """Split input-pixel coordinate(s) into heatmap base pixel and [0, 1) offset."""
    if d < 1:
        raise ValueError("d must be >= 1")
    scaled = np.asarray(x, dtype=float) / d
    base = np.floor(scaled)
    return base.astype(np.int64), scaled - base


def offset_decode(base: ArrayLike, offset: ArrayLike, d: int) -> NDArray[np.float64]:
    return (np.asarray(base, dtype=float) + np.asarray(offset, dtype=float)) * d


# --- target encoding -------------------------------------------------------


def _gaussian_on_grid(shape: tuple[int, int], cx: int, cy: int, sx: float, sy: float) -> NDArray[np.float64]:
    rows, cols = shape
    xs = np.arange(cols) - cx
    ys = np.arange(rows) - cy
    return np.exp(-(ys[:, None] ** 2) / (2 * sy * sy)) * np.exp(-(xs[None, :] ** 2) / (2 * sx * sx))


def heatmap_gt(keypoints: Iterable[Keypoint], geom: HeatmapGeometry) -> Heatmap2D:
    """Max-composited Gaussian targets centred on each keypoint's base pixel."""
    return encode_targets(keypoints, geom).heatmap


def encode_targets(keypoints: Iterable[Keypoint], geom: HeatmapGeometry) -> EncodedTargets:
    shape = geom.shape
    maps = {c: np.zeros(shape) for c in CLASSES}
    offsets = np.zeros((2,) + shape)
    angles = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    d = geom.downsample
    for kp in keypoints:
        px, py = geom.mm_to_px((kp.x, kp.y))
        (bx, by), (ox, oy) = offset_encode(np.array([px, py]), d)
        bx, by = int(bx), int(by)
        if not (0 <= by < shape[0] and 0 <= bx < shape[1]):
            raise ValueError(f"keypoint ({kp.x}, {kp.y}) mm falls outside the slice")
        sx, sy = geom.sigma_px(kp.cls)
        np.maximum(maps[kp.cls], _gaussian_on_grid(shape, bx, by, sx, sy), out=maps[kp.cls])
        offsets[:, by, bx] = (ox, oy)
        angles[by, bx] = kp.angle
        mask[by, bx] = True
    return EncodedTargets(Heatmap2D(maps[TIP], maps[HANDLE], geom), offsets, angles, mask)


# --- losses ----------------------------------------------------------------


def _as_array(h) -> NDArray[np.float64]:
    return h.stacked() if isinstance(h, Heatmap2D) else np.asarray(h, dtype=float)


def focal_loss(pred, gt, params: FocalParams = FocalParams(), n_keypoints: int | None = None) -> float:
    """Penalty-reduced pixel-wise focal loss over heatmaps.

    Pixels with ``gt == 1`` are positives. ``n_keypoints`` defaults to the
    number of positives.
    """
    p = np.clip(_as_array(pred), LOG_EPS, 1.0 - LOG_EPS)
    h = _as_array(gt)
    if p.shape != h.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {h.shape}")
    pos = h == 1.0
    n = int(pos.sum()) if n_keypoints is None else int(n_keypoints)
    if n < 1:
        raise ZeroKeypoints("focal loss needs at least one keypoint")
    a, b = params.alpha, params.beta
    pos_term = (1.0 - p[pos]) ** a * np.log(p[pos])
    neg = ~pos
    neg_term = (1.0 - h[neg]) ** b * p[neg] ** a * np.log(1.0 - p[neg])
    return float(-(pos_term.sum() + neg_term.sum()) / n)


def smooth_l1(pred: ArrayLike, gt: ArrayLike) -> float:
    """Mean elementwise smooth-L1 (quadratic below |diff| = 1)."""
    p = np.asarray(pred, dtype=float).ravel()
    g = np.asarray(gt, dtype=float).ravel()
    if p.shape != g.shape:
        raise ValueError(f"length mismatch {p.size} vs {g.size}")
    if p.size == 0:
        return 0.0
    diff = np.abs(p - g)
    return float(np.mean(np.where(diff < 1.0, 0.5 * diff * diff, diff - 0.5)))


def offset_loss(pred: ArrayLike, gt: ArrayLike) -> float:
    """Smooth-L1 summed over (dx, dy), averaged over the N keypoints."""
    p = np.asarray(pred, dtype=float).reshape(-1, 2)
    g = np.asarray(gt, dtype=float).reshape(-1, 2)
    if p.shape != g.shape:
        raise ValueError("length mismatch")
    if len(p) == 0:
        raise ZeroKeypoints("offset loss needs at least one keypoint")
    return 2.0 * smooth_l1(p, g)


def cosine_angle_loss(pred: ArrayLike, gt: ArrayLike) -> float:
    p = np.asarray(pred, dtype=float).ravel()
    g = np.asarray(gt, dtype=float).ravel()
    if p.shape != g.shape:
        raise ValueError("length mismatch")
    if p.size == 0:
        raise ValueError("cosine loss needs at least one angle pair")
    # wrapping the difference makes 2*pi shifts exact rather than approximate
    diff = wrap_angle(p - g)
    return float(np.mean(1.0 - np.cos(diff)))


def total_loss(hm: float, off: float, ang: float, w: LossWeights = LossWeights()) -> float:
    if min(hm, off, ang) < 0:
        raise ValueError("loss components must be non-negative")
    return w.lambda_hm * hm + w.lambda_off * off + w.lambda_ang * ang


# --- decoding --------------------------------------------------------------


def local_maxima(values: NDArray, threshold: float) -> NDArray[np.bool_]:
    """Pixels >= all 8 neighbours and > threshold (borders see fewer neighbours)."""
    neigh = ndimage.maximum_filter(values, size=3, mode="constant", cval=-np.inf)
    return (values >= neigh) & (values > threshold)


def _first_of_plateaus(qual: NDArray[np.bool_]) -> list[tuple[int, int]]:
    # adjacent qualifiers are necessarily equal-valued; keep the first of
    # each 8-connected group in row-major order
    labels, n = ndimage.label(qual, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return []
    flat = labels.ravel()
    order = np.flatnonzero(flat)
    _, first = np.unique(flat[order], return_index=True)
    keep = np.sort(order[first])
    rows, cols = np.unravel_index(keep, labels.shape)
    return list(zip(rows.tolist(), cols.tolist()))


def extract_peaks(
    pred: Heatmap2D,
    offsets: NDArray,
    angles: NDArray,
    threshold: float = DEFAULT_PEAK_THRESHOLD,
    slice_index: int = 0,
) -> list[Detection2D]:
    """Decode both heatmap channels into offset-corrected detections (mm)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    geom = pred.geometry
    d = geom.downsample
    out = []
    for cls in CLASSES:
        hm = pred[cls]
        for r, c in _first_of_plateaus(local_maxima(hm, threshold)):
            px = offset_decode(c, offsets[0, r, c], d)
            py = offset_decode(r, offsets[1, r, c], d)
            x, y = geom.px_to_mm((float(px), float(py)))
            out.append(Detection2D(cls, slice_index, (x, y), wrap_angle(float(angles[r, c])), float(hm[r, c])))
    return out


def decode_via_heatmaps(
    keypoints: Sequence[Detection2D],
    geom: HeatmapGeometry,
    threshold: float = DEFAULT_PEAK_THRESHOLD,
) -> list[Detection2D]:
    """Run per-slice keypoints through target encoding and peak decoding.

    Stands in for a network whose heads reproduce their targets exactly.
    """
    by_slice: dict[int, list[Keypoint]] = defaultdict(list)
    for k in keypoints:
        by_slice[k.z].append(Keypoint(k.cls, k.center[0], k.center[1], k.angle))
    out = []
    for z in sorted(by_slice):
        t = encode_targets(by_slice[z], geom)
        out.extend(extract_peaks(t.heatmap, t.offsets, t.angles, threshold, slice_index=z))
    return out


# --- 2D -> 3D fusion -------------------------------------------------------


def _local_hu(vol: VoxelVolume, det: Detection2D) -> float:
    p = vol.clip(np.array([det.center[0], det.center[1], vol.slice_center_z(det.z)]))
    return float(sample_trilinear(vol, p))


def fuse_slices(
    dets: Sequence[Detection2D],
    vol: VoxelVolume,
    link_radius: float = DEFAULT_LINK_RADIUS_MM,
    weights: Sequence[float] | None = None,
) -> DetectionSet3D:
    """Group same-class detections on adjacent slices and take weighted centroids.

    Weights default to the volume HU under each detection; negative weights
    count as zero and an all-zero group falls back to equal weights.
    """
    dets = list(dets)
    w = np.array([_local_hu(vol, d) for d in dets] if weights is None else weights, dtype=float)
    parent = list(range(len(dets)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, a in enumerate(dets):
        for j in range(i + 1, len(dets)):
            b = dets[j]
            if a.cls != b.cls or abs(a.z - b.z) != 1:
                continue
            if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) <= link_radius:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = defaultdict(list)
    for i in range(len(dets)):
        groups[find(i)].append(i)

    result = DetectionSet3D()
    for root in sorted(groups):
        members = groups[root]
        gw = np.maximum(w[members], 0.0)
        if gw.sum() <= 0:
            gw = np.ones(len(members))
        pts = np.array([[dets[i].center[0], dets[i].center[1], vol.slice_center_z(dets[i].z)] for i in members])
        pos = (gw[:, None] * pts).sum(axis=0) / gw.sum()
        angle = circular_mean([dets[i].angle for i in members])
        conf = max(dets[i].confidence for i in members)
        ep = Endpoint3D(pos, angle, conf)
        (result.tips if dets[root].cls == TIP else result.handles).append(ep)
    return result


# --- simulated detector ----------------------------------------------------


@dataclass(frozen=True)
class DetectionNoise:
    """Perturbation model for the simulated detector.

    ``sigma_pos`` is the RMS 3D displacement (each axis gets
    ``sigma_pos / sqrt(3)``). Each true endpoint is dropped with ``p_fn`` and
    spawns a false endpoint of its class with ``p_fp``. ``n_dup`` needles get
    a ghost copy translated by ``sigma_dup`` perpendicular to their axis.
    """

    sigma_pos: float = 0.0
    sigma_angle: float = 0.0
    p_fp: float = 0.0
    p_fn: float = 0.0
    n_dup: int = 0
    sigma_dup: float = 1.0

    def __post_init__(self) -> None:
        for name in ("p_fp", "p_fn"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.sigma_pos < 0 or self.sigma_angle < 0 or self.sigma_dup < 0 or self.n_dup < 0:
            raise ValueError("noise magnitudes must be non-negative")


def _perpendicular(rng: np.random.Generator, axis: NDArray) -> NDArray[np.float64]:
    v = rng.normal(size=3)
    v -= (v @ axis) * axis
    return unit(v)


def simulate_detections(gt: GroundTruth, noise: DetectionNoise = DetectionNoise(), seed: int = 0) -> DetectionSet3D:
    """Seeded perturbation of ground-truth endpoints.

    Random draws happen in a fixed pattern per needle so that changing one
    probability does not reshuffle the other perturbations.
    """
    rng = stage_rng(seed, STAGE_DETECT)
    spec = gt.spec
    lo, hi = spec.lower, spec.upper
    per_axis = noise.sigma_pos / math.sqrt(3.0)
    tips: list[Endpoint3D] = []
    handles: list[Endpoint3D] = []

    def jitter(p: NDArray, ang: float, draws: NDArray) -> Endpoint3D:
        pos = np.clip(p + per_axis * draws[:3], lo, hi)
        return Endpoint3D(pos, wrap_angle(ang + noise.sigma_angle * draws[3]), 1.0)

    for n in gt.needles:
        a_tip = gt.keypoint_angle(n)
        a_hdl = wrap_angle(a_tip + math.pi)
        drop = rng.random(2)
        draws = rng.normal(size=(2, 4))
        if drop[0] >= noise.p_fn:
            tips.append(jitter(n.tip, a_tip, draws[0]))
        if drop[1] >= noise.p_fn:
            handles.append(jitter(n.handle, a_hdl, draws[1]))

    if noise.n_dup and gt.needles:
        replace = noise.n_dup > len(gt.needles)
        chosen = rng.choice(len(gt.needles), size=noise.n_dup, replace=replace)
        for i in sorted(chosen.tolist()):
            n = gt.needles[i]
            shift = noise.sigma_dup * _perpendicular(rng, n.orientation)
            a_tip = gt.keypoint_angle(n)
            draws = rng.normal(size=(2, 4))
            tips.append(jitter(n.tip + shift, a_tip, draws[0]))
            handles.append(jitter(n.handle + shift, wrap_angle(a_tip + math.pi), draws[1]))

    if noise.p_fp > 0:
        lo_m = lo + spec.margin_mm
        hi_m = np.maximum(hi - spec.margin_mm, lo_m)
        for target in (tips, handles):
            n_fp = int(rng.binomial(len(gt.needles), noise.p_fp))
            for _ in range(n_fp):
                pos = rng.uniform(lo_m, hi_m)
                target.append(Endpoint3D(pos, float(rng.uniform(0.0, 2.0 * math.pi)), 0.5))

    tip_order = rng.permutation(len(tips))
    hdl_order = rng.permutation(len(handles))
    return DetectionSet3D([tips[i] for i in tip_order], [handles[i] for i in hdl_order])


def project_to_slices(dets: DetectionSet3D, vol: VoxelVolume) -> list[Detection2D]:
    """Nearest-slice 2D view of 3D endpoints (for 2D evaluation)."""
    out = []
    nz = vol.dims[2]
    for cls, eps in ((TIP, dets.tips), (HANDLE, dets.handles)):
        for e in eps:
            k = int(np.clip(round((e.pos[2] - vol.origin[2]) / vol.spacing[2]), 0, nz - 1))
            out.append(Detection2D(cls, k, (float(e.pos[0]), float(e.pos[1])), e.angle, e.confidence))
    return out
