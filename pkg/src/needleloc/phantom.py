"""
Synthetic needle scenes with known ground truth, and their rasterisation.

Needles are placed by seeded rejection sampling so that every pair keeps a
minimum 3D segment distance. Rendering uses a thick-slice model: on slice
``k`` each needle contributes a Gaussian ridge around the in-plane
projection of the part of its axis that falls inside that slice's slab,
which is what makes an oblique needle show up as a short streak per slice
instead of vanishing between slice centres.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .geometry import as_point, polar_angle, segment_min_distance, unit, wrap_angle
from .keypoints import HANDLE, TIP, Detection2D, dump_json, load_json
from .volume import VoxelVolume

STAGE_SCENE = 0
STAGE_RASTER = 1


class PlacementInfeasible(RuntimeError):
    """Needles could not be placed within the retry budget."""


@dataclass(frozen=True)
class SceneSpec:
    n_needles: int = 15
    l_prior: float = 150.0
    length_jitter: float = 5.0
    min_pair_separation: float = 5.0
    dims: tuple[int, int, int] = (256, 256, 30)
    spacing: tuple[float, float, float] = (0.8, 0.8, 5.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    background_hu: float = 40.0
    noise_sigma: float = 20.0
    n_distractor_seeds: int = 0
    rng_seed: int = 0
    # rendering
    peak_hu: float = 1500.0
    peak_jitter: float = 0.2
    radius_mm: float = 1.5
    handle_length_mm: float = 20.0
    handle_boost: float = 1.5
    handle_radius_scale: float = 2.0
    seed_hu: float = 2500.0
    seed_semi_axes_mm: tuple[float, float, float] = (0.4, 0.4, 2.25)
    # placement
    tilt_deg: tuple[float, float] = (25.0, 40.0)
    azimuth_spread_deg: float = 15.0
    margin_mm: float = 5.0
    max_retries: int = 1000

    def __post_init__(self) -> None:
        if self.n_needles < 0:
            raise ValueError("n_needles must be >= 0")
        if self.min_pair_separation <= 0:
            raise ValueError("min_pair_separation must be > 0")
        if self.radius_mm <= 0:
            raise ValueError("radius_mm must be > 0")

    @property
    def lower(self) -> NDArray[np.float64]:
        return np.asarray(self.origin, dtype=float)

    @property
    def upper(self) -> NDArray[np.float64]:
        return self.lower + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
        return cls(**kw)


@dataclass(frozen=True)
class NeedleSpec:
    tip: NDArray[np.float64]
    handle: NDArray[np.float64]
    peak_hu: float
    radius_mm: float

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.handle - self.tip))

    @property
    def orientation(self) -> NDArray[np.float64]:
        """Unit vector from tip to handle."""
        return unit(self.handle - self.tip)


@dataclass(frozen=True)
class SeedSpec:
    center: NDArray[np.float64]
    axis: NDArray[np.float64]


@dataclass
class GroundTruth:
    needles: list[NeedleSpec]
    spec: SceneSpec
    seeds: list[SeedSpec] = field(default_factory=list)

    @property
    def orientations(self) -> list[NDArray[np.float64]]:
        return [n.orientation for n in self.needles]

    @property
    def tips(self) -> NDArray[np.float64]:
        return np.array([n.tip for n in self.needles], dtype=float).reshape(-1, 3)

    @property
    def handles(self) -> NDArray[np.float64]:
        return np.array([n.handle for n in self.needles], dtype=float).reshape(-1, 3)

    @staticmethod
    def keypoint_angle(n: NeedleSpec) -> float:
        """In-plane polar angle at the tip, pointing towards the handle."""
        return polar_angle(n.tip[:2], n.handle[:2])

    def keypoints_2d(self) -> list[Detection2D]:
        """Per-slice tip/handle centres with their in-plane polar angles.

        Each endpoint is reported on its nearest slice.
        """
        out = []
        oz, sz = self.spec.origin[2], self.spec.spacing[2]
        nz = self.spec.dims[2]
        for n in self.needles:
            a_tip = self.keypoint_angle(n)
            for cls, p, ang in ((TIP, n.tip, a_tip), (HANDLE, n.handle, wrap_angle(a_tip + math.pi))):
                k = int(np.clip(round((p[2] - oz) / sz), 0, nz - 1))
                out.append(Detection2D(cls, k, (float(p[0]), float(p[1])), ang, 1.0))
        return out

    def to_dict(self) -> dict:
        return {
            "needles": [
                {
                    "tip_mm": [float(v) for v in n.tip],
                    "handle_mm": [float(v) for v in n.handle],
                    "peak_hu": float(n.peak_hu),
                    "radius_mm": float(n.radius_mm),
                }
                for n in self.needles
            ],
            "seeds": [
                {"center_mm": [float(v) for v in s.center], "axis": [float(v) for v in s.axis]}
                for s in self.seeds
            ],
            "scene": self.spec.to_dict(),
            "seed": int(self.spec.rng_seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        needles = [
            NeedleSpec(np.asarray(n["tip_mm"], float), np.asarray(n["handle_mm"], float), n["peak_hu"], n["radius_mm"])
            for n in d["needles"]
        ]
        seeds = [SeedSpec(np.asarray(s["center_mm"], float), np.asarray(s["axis"], float)) for s in d.get("seeds", [])]
        return cls(needles, SceneSpec.from_dict(d["scene"]), seeds)


def write_ground_truth(gt: GroundTruth, path: str | Path) -> Path:
    return dump_json(gt.to_dict(), path)


def read_ground_truth(path: str | Path) -> GroundTruth:
    return GroundTruth.from_dict(load_json(path))


def stage_rng(seed: int, stage: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stage)]))


def _random_direction(rng: np.random.Generator, spec: SceneSpec, azimuth0: float) -> NDArray[np.float64]:
    tilt = math.radians(rng.uniform(*spec.tilt_deg))
    spread = math.radians(spec.azimuth_spread_deg)
    az = azimuth0 + rng.uniform(-spread, spread)
    # handle -> tip points towards +z
    return np.array([math.sin(tilt) * math.cos(az), math.sin(tilt) * math.sin(az), math.cos(tilt)])


def generate_scene(spec: SceneSpec) -> GroundTruth:
    """Seeded needle layout honouring length and pairwise-separation limits."""
    rng = stage_rng(spec.rng_seed, STAGE_SCENE)
    lo = spec.lower + spec.margin_mm
    hi = spec.upper - spec.margin_mm
    azimuth0 = rng.uniform(0.0, 2.0 * math.pi)
    needles: list[NeedleSpec] = []
    for idx in range(spec.n_needles):
        for _ in range(spec.max_retries):
            length = spec.l_prior + rng.uniform(-spec.length_jitter, spec.length_jitter)
            u = _random_direction(rng, spec, azimuth0)
            span = length * u
            h_lo = lo - np.minimum(span, 0.0)
            h_hi = hi - np.maximum(span, 0.0)
            if np.any(h_hi < h_lo):
                continue
            handle = rng.uniform(h_lo, h_hi)
            tip = handle + span
            if all(
                segment_min_distance((tip, handle), (n.tip, n.handle)) >= spec.min_pair_separation
                for n in needles
            ):
                peak = spec.peak_hu * (1.0 + rng.uniform(-spec.peak_jitter, spec.peak_jitter))
                needles.append(NeedleSpec(tip, handle, float(peak), spec.radius_mm))
                break
        else:
            raise PlacementInfeasible(
                f"placed {idx} of {spec.n_needles} needles before exhausting {spec.max_retries} retries"
            )
    seeds = []
    for _ in range(spec.n_distractor_seeds):
        center = rng.uniform(lo, hi)
        seeds.append(SeedSpec(center, unit(rng.normal(size=3))))
    return GroundTruth(needles, spec, seeds)


def _clip_to_slab(a: NDArray, b: NDArray, z_lo: float, z_hi: float) -> tuple[NDArray, NDArray] | None:
    dz = b[2] - a[2]
    if abs(dz) < 1e-12:
        return (a, b) if z_lo <= a[2] <= z_hi else None
    t0 = (z_lo - a[2]) / dz
    t1 = (z_hi - a[2]) / dz
    t0, t1 = max(0.0, min(t0, t1)), min(1.0, max(t0, t1))
    if t0 > t1:
        return None
    return a + t0 * (b - a), a + t1 * (b - a)


def _render_tube(out: NDArray, a: NDArray, b: NDArray, peak: float, sigma: float, spec: SceneSpec) -> None:
    """Max-composite one Gaussian tube into ``out`` (nz, ny, nx), in place."""
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    ox, oy, oz = spec.origin
    reach = 4.0 * sigma
    for k in range(nz):
        zc = oz + k * sz
        clipped = _clip_to_slab(a, b, zc - sz / 2.0, zc + sz / 2.0)
        if clipped is None:
            continue
        p, q = clipped
        x_lo = max(0, int(math.floor((min(p[0], q[0]) - reach - ox) / sx)))
        x_hi = min(nx - 1, int(math.ceil((max(p[0], q[0]) + reach - ox) / sx)))
        y_lo = max(0, int(math.floor((min(p[1], q[1]) - reach - oy) / sy)))
        y_hi = min(ny - 1, int(math.ceil((max(p[1], q[1]) + reach - oy) / sy)))
        if x_lo > x_hi or y_lo > y_hi:
            continue
        xs = ox + np.arange(x_lo, x_hi + 1) * sx
        ys = oy + np.arange(y_lo, y_hi + 1) * sy
        gx, gy = np.meshgrid(xs, ys)
        d = q[:2] - p[:2]
        dd = float(d @ d)
        if dd > 0:
            t = np.clip(((gx - p[0]) * d[0] + (gy - p[1]) * d[1]) / dd, 0.0, 1.0)
        else:
            t = 0.0
        r2 = (gx - (p[0] + t * d[0])) ** 2 + (gy - (p[1] + t * d[1])) ** 2
        val = peak * np.exp(-r2 / (2.0 * sigma * sigma))
        region = out[k, y_lo : y_hi + 1, x_lo : x_hi + 1]
        np.maximum(region, val, out=region)


def _render_seed(out: NDArray, seed: SeedSpec, spec: SceneSpec) -> None:
    nx, ny, nz = spec.dims
    spacing = np.asarray(spec.spacing)
    semi = np.asarray(spec.seed_semi_axes_mm, dtype=float)
    # extend the through-plane axis so a seed is never lost between slice centres
    semi = np.array([semi[0], semi[1], max(semi[2], spacing[2] / 2.0)])
    axis = seed.axis
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = unit(np.cross(axis, helper))
    e2 = np.cross(axis, e1)
    frame = np.stack([e1, e2, axis])
    reach = 3.0 * semi.max()
    lo_idx = np.maximum(0, np.floor((seed.center - reach - spec.lower) / spacing)).astype(int)
    hi_idx = np.minimum(np.asarray(spec.dims) - 1, np.ceil((seed.center + reach - spec.lower) / spacing)).astype(int)
    xs, ys, zs = (spec.lower[i] + np.arange(lo_idx[i], hi_idx[i] + 1) * spacing[i] for i in range(3))
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    rel = np.stack([gx, gy, gz], axis=-1) - seed.center
    local = rel @ frame.T
    m2 = np.sum((local / semi) ** 2, axis=-1)
    val = spec.seed_hu * np.exp(-0.5 * m2)
    region = out[lo_idx[2] : hi_idx[2] + 1, lo_idx[1] : hi_idx[1] + 1, lo_idx[0] : hi_idx[0] + 1]
    np.maximum(region, val, out=region)


def needle_foreground(gt: GroundTruth, spec: SceneSpec | None = None) -> NDArray[np.float64]:
    """Noise-free needle and seed contribution (HU above background)."""
    spec = gt.spec if spec is None else spec
    nx, ny, nz = spec.dims
    fg = np.zeros((nz, ny, nx))
    for n in gt.needles:
        sigma = n.radius_mm / 2.0
        _render_tube(fg, n.tip, n.handle, n.peak_hu, sigma, spec)
        h_len = min(spec.handle_length_mm, n.length)
        if h_len > 0:
            start = n.handle - h_len * n.orientation
            _render_tube(fg, start, n.handle, n.peak_hu * spec.handle_boost, sigma * spec.handle_radius_scale, spec)
    for s in gt.seeds:
        _render_seed(fg, s, spec)
    return fg


def rasterize(gt: GroundTruth, spec: SceneSpec | None = None) -> VoxelVolume:
    """Render needles (and distractor seeds) over a noisy constant background."""
    spec = gt.spec if spec is None else spec
    nx, ny, nz = spec.dims
    fg = needle_foreground(gt, spec)
    rng = stage_rng(spec.rng_seed, STAGE_RASTER)
    bg = np.full((nz, ny, nx), float(spec.background_hu))
    if spec.noise_sigma > 0:
        bg += rng.normal(0.0, spec.noise_sigma, size=bg.shape)
    return VoxelVolume(bg + fg, spec.spacing, spec.origin)


def needle_from_points(tip, handle, peak_hu: float = 1500.0, radius_mm: float = 1.5) -> NeedleSpec:
    return NeedleSpec(as_point(tip), as_point(handle), float(peak_hu), float(radius_mm))


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, rng_seed=int(seed))
