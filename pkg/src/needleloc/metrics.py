"""2D keypoint and 3D needle evaluation against ground truth."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .geometry import angle_between, circular_diff, unit
from .keypoints import CLASSES, Detection2D, dump_json, load_json
from .matcher import MatchSolution
from .phantom import GroundTruth

POS2D_TOL_MM = 2.0
ANGLE2D_TOL_DEG = 5.0
ENDPOINT3D_TOL_MM = 2.5


def _prf(tp: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    recall = tp / n_gt if n_gt else 0.0
    precision = tp / n_pred if n_pred else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return recall, precision, f1


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def _jsonable(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}


@dataclass
class Eval2DReport:
    mae_pos2d: float
    mae_agl2d: float  # degrees
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    fn: int

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


@dataclass
class Eval3DReport:
    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    fn: int
    mae_tip3d: float
    mae_hdl3d: float
    mae_tip_relx: float
    mae_tip_rely: float
    mae_tip_relz: float
    mae_hdl_relx: float
    mae_hdl_rely: float
    mae_hdl_relz: float
    mae_agl3d: float  # radians
    per_needle: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = _jsonable({f.name: getattr(self, f.name) for f in fields(self) if f.name != "per_needle"})
        d["per_needle"] = self.per_needle
        return d


def _greedy_one_to_one(cost: NDArray[np.float64], allowed: NDArray[np.bool_]) -> list[tuple[int, int]]:
    """Consume (row, col) cells in ascending cost; ties by index."""
    ii, jj = np.nonzero(allowed)
    order = np.lexsort((jj, ii, cost[ii, jj]))
    used_r, used_c, out = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_r or j in used_c:
            continue
        used_r.add(i)
        used_c.add(j)
        out.append((i, j))
    return out


def eval_2d(
    pred: Sequence[Detection2D],
    gt: Sequence[Detection2D],
    pos_tol: float = POS2D_TOL_MM,
    angle_tol_deg: float = ANGLE2D_TOL_DEG,
) -> Eval2DReport:
    """Per-slice, per-class keypoint scoring.

    Predictions and annotations of the same class on the same slice are
    paired greedily by centre distance; a pair counts only when it is within
    both the position and the angle tolerance. MAEs average the true
    positives.
    """
    pred, gt = list(pred), list(gt)
    n_p, n_g = len(pred), len(gt)
    tp_d, tp_a = [], []
    if n_p and n_g:
        P = np.array([d.center for d in pred], dtype=float)
        G = np.array([d.center for d in gt], dtype=float)
        dist = np.linalg.norm(P[:, None, :] - G[None, :, :], axis=2)
        same = np.array([[a.cls == b.cls and a.z == b.z for b in gt] for a in pred])
        for i, j in _greedy_one_to_one(dist, same):
            dang = math.degrees(circular_diff(pred[i].angle, gt[j].angle))
            if dist[i, j] <= pos_tol and dang <= angle_tol_deg:
                tp_d.append(float(dist[i, j]))
                tp_a.append(dang)
    tp = len(tp_d)
    recall, precision, f1 = _prf(tp, n_p, n_g)
    return Eval2DReport(_mean(tp_d), _mean(tp_a), recall, precision, f1, tp, n_p - tp, n_g - tp)


def eval_2d_by_class(pred: Sequence[Detection2D], gt: Sequence[Detection2D], **kw) -> dict[str, Eval2DReport]:
    return {c: eval_2d([d for d in pred if d.cls == c], [d for d in gt if d.cls == c], **kw) for c in CLASSES}


def _needle_arrays(pred) -> tuple[NDArray, NDArray]:
    if isinstance(pred, MatchSolution):
        pairs = [(p.tip, p.handle) for p in pred.pairs]
    else:
        pairs = [(np.asarray(t, float), np.asarray(h, float)) for t, h in pred]
    tips = np.array([t for t, _ in pairs], dtype=float).reshape(-1, 3)
    hdls = np.array([h for _, h in pairs], dtype=float).reshape(-1, 3)
    return tips, hdls


def eval_3d(
    pred,
    gt: GroundTruth,
    spacing: Sequence[float] | None = None,
    tol: float = ENDPOINT3D_TOL_MM,
) -> Eval3DReport:
    """Needle-level scoring of a solution (or list of (tip, handle) pairs).

    Candidate pairs need both endpoints within ``tol``; they are assigned
    one-to-one in ascending order of summed endpoint distance.
    """
    spacing = np.asarray(gt.spec.spacing if spacing is None else spacing, dtype=float)
    if np.any(spacing <= 0):
        raise ValueError("spacing must be positive")
    pt, ph = _needle_arrays(pred)
    gtips, ghdls = gt.tips, gt.handles
    n_p, n_g = len(pt), len(gtips)
    matches: list[tuple[int, int]] = []
    if n_p and n_g:
        dt = np.linalg.norm(pt[:, None, :] - gtips[None, :, :], axis=2)
        dh = np.linalg.norm(ph[:, None, :] - ghdls[None, :, :], axis=2)
        matches = _greedy_one_to_one(dt + dh, (dt <= tol) & (dh <= tol))
    tip_err, hdl_err, agl = [], [], []
    tip_rel, hdl_rel = [], []
    per_needle = []
    for i, j in sorted(matches, key=lambda m: m[1]):
        et = pt[i] - gtips[j]
        eh = ph[i] - ghdls[j]
        a = angle_between(unit(ph[i] - pt[i]), unit(ghdls[j] - gtips[j]))
        tip_err.append(float(np.linalg.norm(et)))
        hdl_err.append(float(np.linalg.norm(eh)))
        tip_rel.append(np.abs(et) / spacing)
        hdl_rel.append(np.abs(eh) / spacing)
        agl.append(a)
        per_needle.append(
            {"gt": j, "pred": i, "tip_err_mm": tip_err[-1], "hdl_err_mm": hdl_err[-1], "angle_err_rad": a}
        )
    tp = len(matches)
    recall, precision, f1 = _prf(tp, n_p, n_g)
    tr = np.mean(tip_rel, axis=0) if tp else [math.nan] * 3
    hr = np.mean(hdl_rel, axis=0) if tp else [math.nan] * 3
    return Eval3DReport(
        recall, precision, f1, tp, n_p - tp, n_g - tp,
        _mean(tip_err), _mean(hdl_err),
        float(tr[0]), float(tr[1]), float(tr[2]),
        float(hr[0]), float(hr[1]), float(hr[2]),
        _mean(agl), per_needle,
    )


def write_report(path: str | Path, report3d: Eval3DReport, reports2d: dict[str, Eval2DReport] | None = None) -> Path:
    payload = {"eval3d": report3d.to_dict()}
    if reports2d is not None:
        payload["eval2d"] = {k: r.to_dict() for k, r in reports2d.items()}
    return dump_json(payload, path)


def read_report(path: str | Path) -> dict:
    return load_json(path)


def write_report_csv(path: str | Path, rows: Sequence[dict]) -> Path:
    """Flat CSV, one row per report dict (nested values dropped)."""
    path = Path(path)
    rows = [{k: v for k, v in r.items() if not isinstance(v, (list, dict))} for r in rows]
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return path
