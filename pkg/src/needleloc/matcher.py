"""
Tip-handle matching as a constrained unbalanced assignment problem.

Pairs are scored by the mean-over-std of the intensity profile along the
candidate path. Length and angle gates mask infeasible cells with ``-inf``.
The greedy solver picks the best non-crossing path repeatedly. When it
returns more paths than the known needle count, duplicate paths (both
endpoints within the merge radius) are fused by intensity-weighted
averaging, lowest scores first. :func:`brute_force_exact` enumerates every
feasible assignment and serves as the optimality oracle on small instances.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import circular_diff, segment_min_distance, wrap_angle
from .keypoints import DetectionSet3D, dump_json, load_json
from .volume import VoxelVolume, ball_mean_positive, default_profile_step, profile_count, sample_trilinear, segment_profile

NEG_INF = -math.inf
ORACLE_MAX_SIDE = 8


class NoDuplicatesFound(RuntimeError):
    """Over the needle budget but no two paths qualify as duplicates.

    ``pairs`` carries the state reached before getting stuck.
    """

    def __init__(self, pairs: list["MatchedPair"], n_prior: int):
        super().__init__(f"{len(pairs)} paths exceed n_prior={n_prior} and none are duplicates")
        self.pairs = pairs


class TooLarge(ValueError):
    """Instance too large for exhaustive enumeration."""


class AllInfeasible(UserWarning):
    """Every cell of a score matrix is masked."""


@dataclass(frozen=True)
class MatchConstraints:
    l_prior: float = 150.0
    eps_l: float = 10.0
    eps_a: float = math.radians(15.0)
    cross_min_dist: float = 1.0
    n_prior: int = 15
    merge_radius: float = 2.5
    tip_radius_mm: float = 3.0
    handle_radius_mm: float = 4.0
    sigma_min: float = 1.0
    score_step: float | None = None
    check_azimuth: bool = False

    def __post_init__(self) -> None:
        if min(self.eps_l, self.eps_a, self.cross_min_dist, self.merge_radius) <= 0:
            raise ValueError("tolerances must be positive")
        if self.n_prior < 1:
            raise ValueError("n_prior must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MatchConstraints":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class ScoreMatrix:
    """Scores (rows = tips, columns = handles) with the endpoint geometry."""

    values: NDArray[np.float64]
    tips: NDArray[np.float64]
    handles: NDArray[np.float64]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def segment(self, i: int, j: int) -> tuple[NDArray, NDArray]:
        return self.tips[i], self.handles[j]


@dataclass
class MatchedPair:
    tip: NDArray[np.float64]
    handle: NDArray[np.float64]
    score: float
    tip_index: int | None = None
    handle_index: int | None = None
    merged: bool = False
    sources: tuple[tuple[int, int], ...] = ()

    @property
    def segment(self) -> tuple[NDArray, NDArray]:
        return self.tip, self.handle

    def sort_key(self) -> tuple:
        return (self.sources, self.tip.tolist(), self.handle.tolist())

    def as_dict(self) -> dict:
        return {
            "tip_mm": [float(v) for v in self.tip],
            "handle_mm": [float(v) for v in self.handle],
            "score": float(self.score),
            "merged": bool(self.merged),
            "tip_index": self.tip_index,
            "handle_index": self.handle_index,
            "sources": [list(s) for s in self.sources],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatchedPair":
        return cls(
            np.asarray(d["tip_mm"], float),
            np.asarray(d["handle_mm"], float),
            float(d["score"]),
            d.get("tip_index"),
            d.get("handle_index"),
            bool(d.get("merged", False)),
            tuple(tuple(s) for s in d.get("sources", [])),
        )


@dataclass
class MatchSolution:
    pairs: list[MatchedPair]
    constraints: MatchConstraints
    metadata: dict = field(default_factory=dict)
    # wall-clock timings stay out of the JSON so reruns are byte-identical
    timing: dict = field(default_factory=dict, compare=False)

    @property
    def total_score(self) -> float:
        return math.fsum(p.score for p in self.pairs)

    @property
    def index_pairs(self) -> list[tuple[int, int]]:
        return sorted((p.tip_index, p.handle_index) for p in self.pairs if not p.merged)

    def __len__(self) -> int:
        return len(self.pairs)

    def to_dict(self) -> dict:
        return {
            "pairs": [p.as_dict() for p in self.pairs],
            "constraints": self.constraints.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MatchSolution":
        return cls(
            [MatchedPair.from_dict(p) for p in d["pairs"]],
            MatchConstraints.from_dict(d["constraints"]),
            dict(d.get("metadata", {})),
        )


def write_solution(sol: MatchSolution, path: str | Path) -> Path:
    return dump_json(sol.to_dict(), path)


def read_solution(path: str | Path) -> MatchSolution:
    return MatchSolution.from_dict(load_json(path))


# --- scoring ---------------------------------------------------------------


def profile_score(samples: ArrayLike, sigma_min: float = 1.0) -> float:
    """Mean over population std, with the std floored at ``sigma_min``."""
    s = np.asarray(samples, dtype=float)
    return float(s.mean() / max(float(s.std()), sigma_min))


def score_pair(
    vol: VoxelVolume,
    tip: ArrayLike,
    handle: ArrayLike,
    step: float | None = None,
    sigma_min: float = 1.0,
) -> float:
    return profile_score(segment_profile(vol, (tip, handle), step), sigma_min)


def _batch_scores(
    vol: VoxelVolume, tips: NDArray, handles: NDArray, step: float, sigma_min: float
) -> NDArray[np.float64]:
    """Scores for many segments with one interpolation call."""
    lengths = np.linalg.norm(handles - tips, axis=1)
    counts = np.array([profile_count(L, step) for L in lengths])
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    seg_id = np.repeat(np.arange(len(counts)), counts)
    t = (np.arange(counts.sum()) - offsets[seg_id]) / np.maximum(counts[seg_id] - 1, 1)
    pts = tips[seg_id] + t[:, None] * (handles[seg_id] - tips[seg_id])
    vals = np.asarray(sample_trilinear(vol, pts))
    sums = np.add.reduceat(vals, offsets)
    means = sums / counts
    dev = vals - means[seg_id]
    var = np.add.reduceat(dev * dev, offsets) / counts
    return means / np.maximum(np.sqrt(var), sigma_min)


def feasible_mask(dets: DetectionSet3D, c: MatchConstraints) -> NDArray[np.bool_]:
    """Length and angle gates for every tip/handle cell."""
    T, H = dets.tip_positions, dets.handle_positions
    if len(T) == 0 or len(H) == 0:
        return np.zeros((len(T), len(H)), dtype=bool)
    L = np.linalg.norm(H[None, :, :] - T[:, None, :], axis=2)
    ok = np.abs(L - c.l_prior) < c.eps_l
    at = dets.tip_angles[:, None]
    ah = dets.handle_angles[None, :]
    # each angle points at the opposite end, so a true pair differs by pi
    ok &= circular_diff(at, ah + math.pi) < c.eps_a
    if c.check_azimuth:
        d = H[None, :, :2] - T[:, None, :2]
        has_dir = np.any(d != 0.0, axis=2)
        az = wrap_angle(np.arctan2(d[..., 1], d[..., 0]))
        ok &= has_dir & (circular_diff(at, az) < c.eps_a) & (circular_diff(ah, az + math.pi) < c.eps_a)
    return ok


def build_score_matrix(vol: VoxelVolume, dets: DetectionSet3D, c: MatchConstraints) -> ScoreMatrix:
    T, H = dets.tip_positions, dets.handle_positions
    values = np.full((len(T), len(H)), NEG_INF)
    ok = feasible_mask(dets, c)
    ii, jj = np.nonzero(ok)
    if len(ii):
        step = default_profile_step(vol) if c.score_step is None else c.score_step
        values[ii, jj] = _batch_scores(vol, T[ii], H[jj], step, c.sigma_min)
    elif values.size:
        warnings.warn(f"all {values.size} tip-handle pairs violate the length/angle gates", AllInfeasible)
    return ScoreMatrix(values, T, H)


# --- greedy selection ------------------------------------------------------


def _crosses(seg, selected: Sequence, min_dist: float) -> bool:
    return any(segment_min_distance(seg, other) < min_dist for other in selected)


def greedy_match(S: ScoreMatrix, c: MatchConstraints) -> list[MatchedPair]:
    """Highest-score-first selection of non-crossing, one-to-one pairs.

    Ties resolve to the lower (tip, handle) index. A cell rejected for
    crossing stays rejected, so one pass over the sorted cells is equivalent
    to re-scanning the matrix after every pick.
    """
    vals = S.values
    ii, jj = np.nonzero(np.isfinite(vals))
    if len(ii) == 0:
        return []
    order = np.lexsort((jj, ii, -vals[ii, jj]))
    used_t: set[int] = set()
    used_h: set[int] = set()
    chosen: list[MatchedPair] = []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_t or j in used_h:
            continue
        seg = S.segment(i, j)
        if _crosses(seg, [p.segment for p in chosen], c.cross_min_dist):
            continue
        used_t.add(i)
        used_h.add(j)
        chosen.append(MatchedPair(S.tips[i].copy(), S.handles[j].copy(), float(vals[i, j]), i, j, False, ((i, j),)))
    return chosen


# --- merging ---------------------------------------------------------------


def weighted_merge(p1: ArrayLike, w1: float, p2: ArrayLike, w2: float) -> NDArray[np.float64]:
    """Convex combination of two points; zero total weight gives the midpoint."""
    p1, p2 = np.asarray(p1, dtype=float), np.asarray(p2, dtype=float)
    w1, w2 = max(float(w1), 0.0), max(float(w2), 0.0)
    if w1 + w2 <= 0.0:
        w1 = w2 = 1.0
    return (w1 * p1 + w2 * p2) / (w1 + w2)


WeightFn = Callable[[NDArray, str], float]


def ball_weight_fn(vol: VoxelVolume, c: MatchConstraints) -> WeightFn:
    def weight(p: NDArray, cls: str) -> float:
        radius = c.tip_radius_mm if cls == "tip" else c.handle_radius_mm
        return ball_mean_positive(vol, p, radius)

    return weight


def _are_duplicates(a: MatchedPair, b: MatchedPair, radius: float) -> bool:
    return (
        float(np.linalg.norm(a.tip - b.tip)) <= radius
        and float(np.linalg.norm(a.handle - b.handle)) <= radius
    )


def merge_duplicates(
    pairs: Sequence[MatchedPair],
    dets: DetectionSet3D,
    vol: VoxelVolume,
    c: MatchConstraints,
    weight_fn: WeightFn | None = None,
) -> list[MatchedPair]:
    """Fuse duplicate paths until at most ``n_prior`` remain.

    Candidates are scanned from the lowest score upwards. A merge whose
    fused path would come closer than ``cross_min_dist`` to another kept path
    is skipped. Raises :class:`NoDuplicatesFound` (carrying the partial
    result) if the budget is still exceeded when no candidate is left.
    """
    pairs = list(pairs)
    weight = ball_weight_fn(vol, c) if weight_fn is None else weight_fn
    step = c.score_step
    while len(pairs) > c.n_prior:
        order = sorted(range(len(pairs)), key=lambda k: (pairs[k].score, pairs[k].sort_key()))
        merged = None
        for pos, a in enumerate(order):
            for b in order[pos + 1 :]:
                pa, pb = pairs[a], pairs[b]
                if not _are_duplicates(pa, pb, c.merge_radius):
                    continue
                tip = weighted_merge(pa.tip, weight(pa.tip, "tip"), pb.tip, weight(pb.tip, "tip"))
                handle = weighted_merge(pa.handle, weight(pa.handle, "handle"), pb.handle, weight(pb.handle, "handle"))
                others = [p.segment for k, p in enumerate(pairs) if k not in (a, b)]
                if np.array_equal(tip, handle) or _crosses((tip, handle), others, c.cross_min_dist):
                    continue
                score = score_pair(vol, tip, handle, step, c.sigma_min)
                sources = tuple(sorted(pa.sources + pb.sources))
                merged = (a, b, MatchedPair(tip, handle, score, None, None, True, sources))
                break
            if merged:
                break
        if merged is None:
            raise NoDuplicatesFound(pairs, c.n_prior)
        a, b, new = merged
        pairs = [p for k, p in enumerate(pairs) if k not in (a, b)] + [new]
    return pairs


def _drop_to_budget(pairs: list[MatchedPair], n_prior: int) -> list[MatchedPair]:
    ranked = sorted(pairs, key=lambda p: (-p.score, p.sort_key()))
    return ranked[:n_prior]


def _finalise(pairs: list[MatchedPair]) -> list[MatchedPair]:
    return sorted(pairs, key=lambda p: (-p.score, p.sort_key()))


def solve_gmm(vol: VoxelVolume, dets: DetectionSet3D, c: MatchConstraints) -> MatchSolution:
    """Greedy matching followed by duplicate merging (and a drop fallback)."""
    t0 = time.perf_counter()
    m, n = len(dets.tips), len(dets.handles)
    meta = {"n_tips": m, "n_handles": n, "n_greedy": 0, "n_merges": 0, "n_dropped": 0, "status": "accepted"}
    if m == 0 or n == 0:
        meta["status"] = "empty"
        return MatchSolution([], c, meta, {"build_s": 0.0, "solve_s": 0.0})
    S = build_score_matrix(vol, dets, c)
    t1 = time.perf_counter()
    pairs = greedy_match(S, c)
    meta["n_greedy"] = len(pairs)
    if len(pairs) > c.n_prior:
        meta["status"] = "merged"
        try:
            merged = merge_duplicates(pairs, dets, vol, c)
        except NoDuplicatesFound as exc:
            merged = exc.pairs
            meta["status"] = "fallback_drop"
        meta["n_merges"] = len(pairs) - len(merged)
        meta["n_dropped"] = max(0, len(merged) - c.n_prior)
        pairs = _drop_to_budget(merged, c.n_prior)
    t2 = time.perf_counter()
    return MatchSolution(_finalise(pairs), c, meta, {"build_s": t1 - t0, "solve_s": t2 - t1})


def greedy_assignment(S: ScoreMatrix, c: MatchConstraints) -> MatchSolution:
    """Greedy pairs trimmed to ``n_prior`` by score; no volume needed.

    This is the matrix-only counterpart of :func:`solve_gmm` used when
    comparing against :func:`brute_force_exact`.
    """
    pairs = greedy_match(S, c)
    return MatchSolution(_finalise(_drop_to_budget(pairs, c.n_prior)), c, {"n_greedy": len(pairs)})


# --- exact oracle ----------------------------------------------------------


def brute_force_exact(S: ScoreMatrix, c: MatchConstraints) -> MatchSolution:
    """Exhaustive optimum of the assignment model on a small instance.

    Enumerates every one-to-one, non-crossing set of finite cells with at
    most ``min(m, n, n_prior)`` pairs. Ties go to the lexicographically
    smallest sorted list of (tip, handle) indices.
    """
    m, n = S.shape
    if min(m, n) > ORACLE_MAX_SIDE:
        raise TooLarge(f"min(m, n) = {min(m, n)} exceeds {ORACLE_MAX_SIDE}")
    vals = S.values
    transpose = m > n
    rows, cols = (n, m) if transpose else (m, n)

    def cell(r: int, k: int) -> tuple[int, int]:
        return (k, r) if transpose else (r, k)

    options = []
    for r in range(rows):
        opts = []
        for k in range(cols):
            i, j = cell(r, k)
            if np.isfinite(vals[i, j]):
                opts.append((k, float(vals[i, j])))
        options.append(opts)
    best_row_gain = [max([0.0] + [s for _, s in opts]) for opts in options]
    suffix_bound = np.concatenate([np.cumsum(best_row_gain[::-1])[::-1], [0.0]])
    limit = min(m, n, c.n_prior)

    segs: dict[tuple[int, int], tuple] = {}
    conflict: dict[tuple[tuple[int, int], tuple[int, int]], bool] = {}

    def crosses(a: tuple[int, int], b: tuple[int, int]) -> bool:
        key = (a, b) if a < b else (b, a)
        if key not in conflict:
            sa = segs.setdefault(a, S.segment(*a))
            sb = segs.setdefault(b, S.segment(*b))
            conflict[key] = segment_min_distance(sa, sb) < c.cross_min_dist
        return conflict[key]

    best_total = 0.0
    best_pairs: tuple[tuple[int, int], ...] = ()
    chosen: list[tuple[int, int]] = []
    used: set[int] = set()
    partial_scores: list[float] = []
    n_visited = 0

    def consider() -> None:
        nonlocal best_total, best_pairs
        total = math.fsum(partial_scores)
        key = tuple(sorted(chosen))
        if total > best_total or (total == best_total and key < best_pairs):
            best_total, best_pairs = total, key

    def dfs(r: int) -> None:
        nonlocal n_visited
        n_visited += 1
        if r == rows or len(chosen) == limit:
            consider()
            return
        if math.fsum(partial_scores) + suffix_bound[r] < best_total - 1e-9 * (1.0 + abs(best_total)):
            return
        for k, s in options[r]:
            if k in used:
                continue
            ij = cell(r, k)
            if any(crosses(ij, other) for other in chosen):
                continue
            chosen.append(ij)
            used.add(k)
            partial_scores.append(s)
            dfs(r + 1)
            partial_scores.pop()
            used.discard(k)
            chosen.pop()
        dfs(r + 1)

    dfs(0)
    pairs = [
        MatchedPair(S.tips[i].copy(), S.handles[j].copy(), float(vals[i, j]), i, j, False, ((i, j),))
        for i, j in best_pairs
    ]
    return MatchSolution(_finalise(pairs), c, {"nodes": n_visited})


# --- feasibility audit -----------------------------------------------------


def check_solution(sol: MatchSolution, dets: DetectionSet3D, c: MatchConstraints | None = None) -> list[str]:
    """Human-readable list of violated model constraints (empty when feasible).

    Checks one-to-one use of detections, the count budget, non-crossing of
    all kept paths, and the length/angle gates for unmerged pairs.
    """
    c = sol.constraints if c is None else c
    problems = []
    if len(sol.pairs) > c.n_prior:
        problems.append(f"{len(sol.pairs)} pairs exceed n_prior={c.n_prior}")
    tip_use: dict[int, int] = {}
    hdl_use: dict[int, int] = {}
    for p in sol.pairs:
        for i, j in p.sources:
            tip_use[i] = tip_use.get(i, 0) + 1
            hdl_use[j] = hdl_use.get(j, 0) + 1
    problems += [f"tip {i} used {k} times" for i, k in tip_use.items() if k > 1]
    problems += [f"handle {j} used {k} times" for j, k in hdl_use.items() if k > 1]
    for a in range(len(sol.pairs)):
        for b in range(a + 1, len(sol.pairs)):
            d = segment_min_distance(sol.pairs[a].segment, sol.pairs[b].segment)
            if d < c.cross_min_dist:
                problems.append(f"paths {a} and {b} are {d:.3f} mm apart")
    for p in sol.pairs:
        if p.merged:
            continue
        i, j = p.tip_index, p.handle_index
        L = float(np.linalg.norm(dets.handles[j].pos - dets.tips[i].pos))
        if not abs(L - c.l_prior) < c.eps_l:
            problems.append(f"pair ({i}, {j}) length {L:.2f} outside gate")
        if not circular_diff(dets.tips[i].angle, dets.handles[j].angle + math.pi) < c.eps_a:
            problems.append(f"pair ({i}, {j}) angles inconsistent")
        if not np.isfinite(p.score):
            problems.append(f"pair ({i}, {j}) has a non-finite score")
    return problems
