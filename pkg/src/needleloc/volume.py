"""
Voxel volumes: HU sampling, per-slice morphology, normalisation and file I/O.

Data is held as a ``(nz, ny, nx)`` array so that C order is x-fastest /
z-slowest, which is also the on-disk order of ``.vol.raw`` files. World
coordinates of voxel ``(i, j, k)`` are ``origin + (i, j, k) * spacing``
(voxel centres).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import ndimage

from .geometry import Segment3, as_point

DEFAULT_CLAMP_MAX_HU = 800.0
DEFAULT_CLAMP_MIN_HU = -1000.0
DEFAULT_TOPHAT_RADIUS_PX = 5

_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2")}


class OutOfBounds(ValueError):
    """A query point lies outside the sampled grid."""


class ConstantVolume(ValueError):
    """The clamp range collapsed to a single value."""


@dataclass(frozen=True)
class VoxelVolume:
    data: NDArray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with non-empty axes, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def lower(self) -> NDArray[np.float64]:
        return np.asarray(self.origin)

    @property
    def upper(self) -> NDArray[np.float64]:
        return np.asarray(self.origin) + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def to_index(self, p: ArrayLike) -> NDArray[np.float64]:
        """Continuous (x, y, z) voxel index of world point(s)."""
        return (np.asarray(p, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def to_world(self, idx: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * np.asarray(self.spacing)

    def slice_center_z(self, k: int | NDArray) -> float | NDArray:
        return self.origin[2] + np.asarray(k) * self.spacing[2]

    def contains(self, p: ArrayLike, tol: float = 1e-9) -> NDArray[np.bool_] | bool:
        u = self.to_index(p)
        hi = np.asarray(self.dims) - 1
        ok = np.all((u >= -tol) & (u <= hi + tol), axis=-1)
        return bool(ok) if np.ndim(ok) == 0 else ok

    def clip(self, p: ArrayLike) -> NDArray[np.float64]:
        return np.clip(np.asarray(p, dtype=float), self.lower, self.upper)

    def with_data(self, data: NDArray) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing, self.origin)

    def slice2d(self, k: int) -> "Slice2D":
        return Slice2D(self.data[k], self.spacing[:2], self.origin[:2])


@dataclass(frozen=True)
class Slice2D:
    """One axial slice, stored ``(ny, nx)``."""

    data: NDArray
    spacing: tuple[float, float] = (1.0, 1.0)
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2 or min(data.shape) < 1:
            raise ValueError(f"slice data must be 2D, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int]:
        ny, nx = self.data.shape
        return nx, ny


def sample_trilinear(vol: VoxelVolume, p: ArrayLike, tol: float = 1e-9) -> float | NDArray[np.float64]:
    """Trilinear HU at world point(s) ``p`` of shape (3,) or (N, 3)."""
    pts = np.asarray(p, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    u = vol.to_index(pts)
    hi = np.asarray(vol.dims, dtype=float) - 1
    bad = np.any((u < -tol) | (u > hi + tol), axis=1)
    if np.any(bad):
        raise OutOfBounds(f"point {pts[np.argmax(bad)]} outside volume bounds {vol.lower}..{vol.upper}")
    u = np.clip(u, 0.0, hi)
    i0 = np.minimum(np.floor(u).astype(np.intp), np.maximum(hi.astype(np.intp) - 1, 0))
    t = u - i0
    i1 = np.minimum(i0 + 1, hi.astype(np.intp))
    d = vol.data
    x0, y0, z0 = i0.T
    x1, y1, z1 = i1.T
    tx, ty, tz = t.T
    c00 = d[z0, y0, x0] * (1 - tx) + d[z0, y0, x1] * tx
    c10 = d[z0, y1, x0] * (1 - tx) + d[z0, y1, x1] * tx
    c01 = d[z1, y0, x0] * (1 - tx) + d[z1, y0, x1] * tx
    c11 = d[z1, y1, x0] * (1 - tx) + d[z1, y1, x1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    out = (c0 * (1 - tz) + c1 * tz).astype(float)
    return float(out[0]) if single else out


def default_profile_step(vol: VoxelVolume) -> float:
    return min(vol.spacing) / 2.0


def profile_count(length: float, step: float) -> int:
    # guard against 10.000000000001 / 1.0 rounding up to an extra sample
    return int(math.ceil(length / step - 1e-9)) + 1


def segment_points(seg, step: float) -> NDArray[np.float64]:
    if step <= 0:
        raise ValueError("step must be positive")
    if not isinstance(seg, Segment3):
        seg = Segment3(*seg)
    n = profile_count(seg.length, step)
    return seg.point_at(np.linspace(0.0, 1.0, n))


def segment_profile(vol: VoxelVolume, seg, step: float | None = None) -> NDArray[np.float64]:
    """HU samples at uniform arclength along ``seg``, both endpoints included."""
    step = default_profile_step(vol) if step is None else step
    return np.atleast_1d(sample_trilinear(vol, segment_points(seg, step)))


def disk_footprint(radius_px: int) -> NDArray[np.bool_]:
    r = int(radius_px)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def grey_opening(image: NDArray, radius_px: int) -> NDArray[np.float64]:
    """Opening by a disk; pixels outside the image are ignored (no padding bias)."""
    fp = disk_footprint(radius_px)
    if image.ndim == 3:
        fp = fp[None]
    img = np.asarray(image, dtype=float)
    eroded = ndimage.grey_erosion(img, footprint=fp, mode="constant", cval=np.inf)
    return ndimage.grey_dilation(eroded, footprint=fp, mode="constant", cval=-np.inf)


def white_top_hat(image: Slice2D | NDArray, radius_px: int = DEFAULT_TOPHAT_RADIUS_PX):
    """Input minus its disk opening.

    A ``Slice2D`` returns a ``Slice2D``; a raw 2D or 3D array is processed
    slice by slice along axis 0 and returned as an array.
    """
    if radius_px < 1:
        raise ValueError("radius_px must be >= 1")
    if isinstance(image, Slice2D):
        out = white_top_hat(image.data, radius_px)
        return Slice2D(out, image.spacing, image.origin)
    img = np.asarray(image, dtype=float)
    out = img - grey_opening(img, radius_px)
    # opening <= input holds exactly; clamp guards float noise only
    return np.maximum(out, 0.0)


def top_hat_volume(vol: VoxelVolume, radius_px: int = DEFAULT_TOPHAT_RADIUS_PX) -> VoxelVolume:
    return vol.with_data(white_top_hat(vol.data, radius_px))


def clamp_normalize(
    vol: VoxelVolume,
    max_hu: float = DEFAULT_CLAMP_MAX_HU,
    min_hu: float = DEFAULT_CLAMP_MIN_HU,
) -> VoxelVolume:
    """Clamp to ``[min_hu, max_hu]`` and map that range affinely onto [-1, 1]."""
    if not max_hu > min_hu:
        raise ConstantVolume(f"clamp range [{min_hu}, {max_hu}] is empty")
    clipped = np.clip(np.asarray(vol.data, dtype=float), min_hu, max_hu)
    out = 2.0 * (clipped - min_hu) / (max_hu - min_hu) - 1.0
    return vol.with_data(np.clip(out, -1.0, 1.0))


def write_volume(vol: VoxelVolume, directory: str | Path, name: str, dtype: str = "f32") -> Path:
    """Write ``{name}.vol.json`` + ``{name}.vol.raw``; returns the header path."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    raw_name = f"{name}.vol.raw"
    data = np.asarray(vol.data)
    if dtype == "i16":
        data = np.clip(np.rint(data), -32768, 32767)
    (directory / raw_name).write_bytes(np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes())
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": dtype,
        "data_file": raw_name,
    }
    path = directory / f"{name}.vol.json"
    path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    return path


def read_volume(header_path: str | Path) -> VoxelVolume:
    header_path = Path(header_path)
    header = json.loads(header_path.read_text(encoding="utf-8"))
    nx, ny, nz = (int(v) for v in header["dims"])
    dt = _DTYPES[header["dtype"]]
    raw = (header_path.parent / header["data_file"]).read_bytes()
    if len(raw) != nx * ny * nz * dt.itemsize:
        raise ValueError(f"{header['data_file']}: expected {nx * ny * nz} voxels of {dt}")
    data = np.frombuffer(raw, dtype=dt).reshape(nz, ny, nx)
    if header["dtype"] == "f32":
        data = data.astype(np.float32)
    return VoxelVolume(data, tuple(header["spacing_mm"]), tuple(header["origin_mm"]))


def ball_mean_positive(vol: VoxelVolume, center: ArrayLike, radius: float, step: float | None = None) -> float:
    """Mean of the strictly positive values sampled inside a ball.

    The ball is sampled on a regular lattice (``step`` defaults to half the
    finest spacing) clipped to the volume; returns 0.0 when nothing is
    positive.
    """
    c = as_point(center)
    step = default_profile_step(vol) if step is None else step
    n = int(math.floor(radius / step))
    offs = np.arange(-n, n + 1) * step
    gx, gy, gz = np.meshgrid(offs, offs, offs, indexing="ij")
    lattice = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    lattice = lattice[np.einsum("ij,ij->i", lattice, lattice) <= radius * radius]
    pts = c + lattice
    pts = pts[vol.contains(pts)]
    if len(pts) == 0:
        return 0.0
    vals = np.asarray(sample_trilinear(vol, pts))
    vals = vals[vals > 0]
    return float(vals.mean()) if len(vals) else 0.0
