"""Command-line driver: phantom, preprocess, detect-sim, match, evaluate, pipeline, bench.

Every subcommand writes its artifacts under ``--out`` using ``--name`` as a
stem. Failures exit nonzero and print one JSON object on stderr::

    {"error": "config", "message": "...", "exit_code": 2}
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import ConfigError, PipelineConfig, SUBSTRATES, load_config
from .detection import project_to_slices, simulate_detections
from .keypoints import dump_json, read_detections, write_detections, write_detections_2d
from .matcher import build_score_matrix, read_solution, solve_gmm, write_solution
from .metrics import eval_2d_by_class, eval_3d, write_report, write_report_csv
from .phantom import (
    GroundTruth,
    PlacementInfeasible,
    generate_scene,
    rasterize,
    read_ground_truth,
    write_ground_truth,
)
from .volume import VoxelVolume, clamp_normalize, read_volume, top_hat_volume, write_volume

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would print usage and exit(2)
        raise CliError("config", message, EXIT_CONFIG)


def parse_needles(text: str) -> list[int]:
    """``"15"`` -> [15]; ``"5..50"`` -> 5, 10, ..., 50; ``"5..50:1"`` sets the step."""
    try:
        if ".." not in text:
            values = [int(text)]
        else:
            rng, _, step = text.partition(":")
            a, b = (int(v) for v in rng.split(".."))
            step_i = int(step) if step else 5
            if step_i <= 0 or b < a:
                raise ValueError
            values = list(range(a, b + 1, step_i))
            if values[-1] != b:
                values.append(b)
    except ValueError:
        raise CliError("config", f"bad --needles value {text!r}; expected N or A..B[:STEP]", EXIT_CONFIG) from None
    if any(v < 0 for v in values):
        raise CliError("config", "--needles must be non-negative", EXIT_CONFIG)
    return values


# --- config resolution -----------------------------------------------------


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file first, then flag overrides, then priors synced across sections."""
    try:
        cfg = load_config(getattr(args, "config", None))
    except FileNotFoundError as exc:
        raise CliError("io", f"config not found: {exc.filename}", EXIT_IO) from exc
    except ConfigError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from exc
    try:
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.out is not None:
            over["out_dir"] = args.out
        if args.name is not None:
            over["name"] = args.name
        if getattr(args, "score_substrate", None) is not None:
            over["score_substrate"] = args.score_substrate
        cfg = replace(cfg, **over)
        needles = getattr(args, "needles", None)
        if needles is not None and args.command != "bench":
            counts = parse_needles(needles)
            if len(counts) != 1:
                raise CliError("config", "a needle range is only valid for bench", EXIT_CONFIG)
            cfg = replace(cfg, scene=replace(cfg.scene, n_needles=counts[0]))
        noise = {}
        for flag, key, conv in (
            ("noise_pos", "sigma_pos", float),
            ("noise_angle", "sigma_angle", lambda v: math.radians(float(v))),
            ("fp_rate", "p_fp", float),
            ("fn_rate", "p_fn", float),
            ("dup", "n_dup", int),
        ):
            v = getattr(args, flag, None)
            if v is not None:
                noise[key] = conv(v)
        if noise:
            cfg = replace(cfg, noise=replace(cfg.noise, **noise))
        return cfg.synced()
    except ValueError as exc:
        raise CliError("config", str(exc), EXIT_CONFIG) from exc


def _out(cfg: PipelineConfig, suffix: str) -> Path:
    return Path(cfg.out_dir) / f"{cfg.name}{suffix}"


def _io(fn, *a):
    """Run a reader/writer, mapping file and format errors to the I/O exit code."""
    try:
        return fn(*a)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError("io", f"{type(exc).__name__}: {exc}", EXIT_IO) from exc
    except ValueError as exc:
        raise CliError("io", str(exc), EXIT_IO) from exc


# --- stages ----------------------------------------------------------------


def stage_phantom(cfg: PipelineConfig) -> tuple[GroundTruth, VoxelVolume]:
    try:
        gt = generate_scene(cfg.scene)
    except PlacementInfeasible as exc:
        raise CliError("infeasible", str(exc), EXIT_INFEASIBLE) from exc
    return gt, rasterize(gt)


def stage_substrate(cfg: PipelineConfig, vol: VoxelVolume) -> VoxelVolume:
    return top_hat_volume(vol, cfg.tophat_radius_px) if cfg.score_substrate == "tophat" else vol


def stage_match(cfg: PipelineConfig, vol: VoxelVolume, dets):
    sol = solve_gmm(stage_substrate(cfg, vol), dets, cfg.constraints)
    _io(write_solution, sol, _out(cfg, ".match.json"))
    _io(dump_json, sol.timing, _out(cfg, ".match.timing.json"))
    return sol


def stage_evaluate(cfg: PipelineConfig, sol, gt: GroundTruth, dets=None) -> dict:
    r3 = eval_3d(sol, gt)
    r2 = None
    if dets is not None:
        spec = gt.spec
        pred2d = project_to_slices(dets, _GridStub(spec.dims, spec.spacing, spec.origin))
        r2 = eval_2d_by_class(pred2d, gt.keypoints_2d())
    _io(write_report, _out(cfg, ".report.json"), r3, r2)
    rows = [{"level": "3d", **r3.to_dict()}]
    if r2:
        rows += [{"level": f"2d_{k}", **v.to_dict()} for k, v in r2.items()]
    _io(write_report_csv, _out(cfg, ".report.csv"), rows)
    return r3.to_dict()


class _GridStub:
    """Just enough of a volume (dims, spacing, origin) for slice projection."""

    def __init__(self, dims, spacing, origin):
        self.dims, self.spacing, self.origin = tuple(dims), tuple(spacing), tuple(origin)


# --- subcommands -----------------------------------------------------------


def cmd_phantom(args, cfg: PipelineConfig) -> dict:
    gt, vol = stage_phantom(cfg)
    vol_path = _io(write_volume, vol, cfg.out_dir, cfg.name)
    gt_path = _io(write_ground_truth, gt, _out(cfg, ".gt.json"))
    return {"volume": str(vol_path), "gt": str(gt_path), "n_needles": len(gt.needles)}


def cmd_preprocess(args, cfg: PipelineConfig) -> dict:
    vol = _io(read_volume, args.volume)
    th = top_hat_volume(vol, cfg.tophat_radius_px)
    norm = clamp_normalize(vol, cfg.clamp_max_hu, cfg.clamp_min_hu)
    p1 = _io(write_volume, th, cfg.out_dir, f"{cfg.name}.tophat")
    p2 = _io(write_volume, norm, cfg.out_dir, f"{cfg.name}.norm")
    return {"tophat": str(p1), "normalized": str(p2)}


def cmd_detect_sim(args, cfg: PipelineConfig) -> dict:
    gt = _io(read_ground_truth, args.gt)
    dets = simulate_detections(gt, cfg.noise, cfg.seed)
    path = _io(write_detections, dets, _out(cfg, ".det.json"))
    return {"detections": str(path), "n_tips": len(dets.tips), "n_handles": len(dets.handles)}


def cmd_match(args, cfg: PipelineConfig) -> dict:
    vol = _io(read_volume, args.volume)
    dets = _io(read_detections, args.detections)
    sol = stage_match(cfg, vol, dets)
    return {"match": str(_out(cfg, ".match.json")), "n_pairs": len(sol), **sol.metadata}


def cmd_evaluate(args, cfg: PipelineConfig) -> dict:
    sol = _io(read_solution, args.match)
    gt = _io(read_ground_truth, args.gt)
    dets = _io(read_detections, args.detections) if args.detections else None
    return stage_evaluate(cfg, sol, gt, dets)


def cmd_pipeline(args, cfg: PipelineConfig) -> dict:
    _io(dump_json, cfg.to_dict(), _out(cfg, ".config.json"))
    gt, vol = stage_phantom(cfg)
    _io(write_volume, vol, cfg.out_dir, cfg.name)
    _io(write_ground_truth, gt, _out(cfg, ".gt.json"))
    dets = simulate_detections(gt, cfg.noise, cfg.seed)
    _io(write_detections, dets, _out(cfg, ".det.json"))
    _io(write_detections_2d, project_to_slices(dets, vol), _out(cfg, ".det2d.json"))
    sol = stage_match(cfg, vol, dets)
    report = stage_evaluate(cfg, sol, gt, dets)
    keys = ("f1", "recall", "precision", "mae_tip3d", "mae_hdl3d", "mae_agl3d")
    return {"n_pairs": len(sol), "status": sol.metadata["status"], **{k: report[k] for k in keys}}


BENCH_FIELDS = (
    "n_needles", "n_tips", "n_handles", "n_feasible", "build_s", "solve_s", "match_s", "n_pairs", "status", "f1",
)


def bench_rows(cfg: PipelineConfig, counts: Sequence[int], repeats: int = 3) -> list[dict]:
    """Min-of-``repeats`` matching times for each needle count."""
    rows = []
    for n in counts:
        c = cfg if n == cfg.scene.n_needles else replace(cfg, scene=replace(cfg.scene, n_needles=n)).synced()
        gt, vol = stage_phantom(c)
        sub = stage_substrate(c, vol)
        dets = simulate_detections(gt, c.noise, c.seed)
        build, solve = math.inf, math.inf
        sol = S = None
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            S = build_score_matrix(sub, dets, c.constraints) if dets.tips and dets.handles else None
            build = min(build, time.perf_counter() - t0)
            sol = solve_gmm(sub, dets, c.constraints)
            solve = min(solve, sol.timing["solve_s"])
        n_feasible = int((S.values > -math.inf).sum()) if S is not None else 0
        rows.append({
            "n_needles": n,
            "n_tips": len(dets.tips),
            "n_handles": len(dets.handles),
            "n_feasible": n_feasible,
            "build_s": round(build, 6),
            "solve_s": round(solve, 6),
            "match_s": round(build + solve, 6),
            "n_pairs": len(sol),
            "status": sol.metadata["status"],
            "f1": eval_3d(sol, gt).f1,
        })
    return rows


def cmd_bench(args, cfg: PipelineConfig) -> dict:
    counts = parse_needles(args.needles or "5..50")
    rows = bench_rows(cfg, counts, args.repeats)
    path = _out(cfg, ".bench.csv")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise CliError("io", str(exc), EXIT_IO) from exc
    return {"bench": str(path), "rows": len(rows), "max_match_s": max(r["match_s"] for r in rows)}


# --- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--seed", type=int, help="root seed (split per stage)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--name", help="artifact file stem")

    noise = _Parser(add_help=False)
    noise.add_argument("--noise-pos", type=float, metavar="MM", help="RMS 3D endpoint jitter")
    noise.add_argument("--noise-angle", type=float, metavar="DEG", help="angle jitter (std, degrees)")
    noise.add_argument("--fp-rate", type=float, metavar="P")
    noise.add_argument("--fn-rate", type=float, metavar="P")
    noise.add_argument("--dup", type=int, metavar="K", help="number of duplicated needles")

    needles = _Parser(add_help=False)
    needles.add_argument("--needles", metavar="N|A..B", help="needle count (or range for bench)")

    substrate = _Parser(add_help=False)
    substrate.add_argument("--score-substrate", choices=SUBSTRATES, help="volume the path score is sampled from")

    p = _Parser(prog="needleloc", description="Needle localisation pipeline on synthetic CT phantoms.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("phantom", parents=[common, needles], help="write a phantom volume and its ground truth")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("preprocess", parents=[common], help="top-hat and clamp-normalise a volume")
    sp.add_argument("volume", help="path to a .vol.json header")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("detect-sim", parents=[common, noise], help="simulate detector output from ground truth")
    sp.add_argument("gt", help="path to a .gt.json file")
    sp.set_defaults(func=cmd_detect_sim)

    sp = sub.add_parser("match", parents=[common, needles, substrate], help="pair tips with handles")
    sp.add_argument("--volume", required=True, help="raw HU volume header")
    sp.add_argument("--detections", required=True, help="3D detections JSON")
    sp.set_defaults(func=cmd_match)

    sp = sub.add_parser("evaluate", parents=[common], help="score a match against ground truth")
    sp.add_argument("--match", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--detections", help="3D detections for the per-slice 2D report")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pipeline", parents=[common, needles, noise, substrate], help="run every stage with one seed")
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("bench", parents=[common, noise, substrate], help="time matching over needle counts")
    sp.add_argument("--needles", metavar="A..B[:STEP]", default="5..50")
    sp.add_argument("--repeats", type=int, default=3)
    sp.set_defaults(func=cmd_bench)
    return p


def _fail(err: CliError) -> int:
    print(json.dumps({"error": err.kind, "message": str(err), "exit_code": err.code}), file=sys.stderr)
    return err.code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        summary = args.func(args, cfg)
    except CliError as err:
        return _fail(err)
    except Exception as exc:  # pragma: no cover - last-resort reporting
        return _fail(CliError("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
