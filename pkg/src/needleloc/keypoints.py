"""Detection records (2D per-slice and fused 3D) and their JSON files."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import NDArray

TIP = "tip"
HANDLE = "handle"
CLASSES = (TIP, HANDLE)

KeypointClass = Literal["tip", "handle"]


@dataclass(frozen=True)
class Detection2D:
    cls: KeypointClass
    z: int
    center: tuple[float, float]
    angle: float
    confidence: float = 1.0

    def as_dict(self) -> dict:
        return {
            "class": self.cls,
            "slice": int(self.z),
            "center_mm": [float(self.center[0]), float(self.center[1])],
            "angle_rad": float(self.angle),
            "confidence": float(self.confidence),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection2D":
        return cls(d["class"], int(d["slice"]), tuple(d["center_mm"]), float(d["angle_rad"]), float(d["confidence"]))


@dataclass(frozen=True)
class Endpoint3D:
    pos: NDArray[np.float64]
    angle: float
    confidence: float = 1.0

    def as_dict(self) -> dict:
        return {
            "pos_mm": [float(v) for v in self.pos],
            "angle_rad": float(self.angle),
            "confidence": float(self.confidence),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Endpoint3D":
        return cls(np.asarray(d["pos_mm"], dtype=float), float(d["angle_rad"]), float(d["confidence"]))


@dataclass
class DetectionSet3D:
    tips: list[Endpoint3D] = field(default_factory=list)
    handles: list[Endpoint3D] = field(default_factory=list)

    @property
    def tip_positions(self) -> NDArray[np.float64]:
        return np.array([e.pos for e in self.tips], dtype=float).reshape(-1, 3)

    @property
    def handle_positions(self) -> NDArray[np.float64]:
        return np.array([e.pos for e in self.handles], dtype=float).reshape(-1, 3)

    @property
    def tip_angles(self) -> NDArray[np.float64]:
        return np.array([e.angle for e in self.tips], dtype=float)

    @property
    def handle_angles(self) -> NDArray[np.float64]:
        return np.array([e.angle for e in self.handles], dtype=float)

    def as_dict(self) -> dict:
        return {
            "tips": [e.as_dict() for e in self.tips],
            "handles": [e.as_dict() for e in self.handles],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionSet3D":
        return cls(
            [Endpoint3D.from_dict(e) for e in d.get("tips", [])],
            [Endpoint3D.from_dict(e) for e in d.get("handles", [])],
        )


def dump_json(obj: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    return path


def load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_detections(dets: DetectionSet3D, path: str | Path) -> Path:
    return dump_json(dets.as_dict(), path)


def read_detections(path: str | Path) -> DetectionSet3D:
    return DetectionSet3D.from_dict(load_json(path))


def write_detections_2d(dets: list[Detection2D], path: str | Path) -> Path:
    return dump_json({"detections": [d.as_dict() for d in dets]}, path)


def read_detections_2d(path: str | Path) -> list[Detection2D]:
    return [Detection2D.from_dict(d) for d in load_json(path)["detections"]]
