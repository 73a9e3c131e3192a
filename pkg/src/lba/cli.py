"""Command-line pipeline driver.

Subcommands:
    run        --config <file>          refine a dataset, write outputs
    synth      --spec <file> --out <d>  generate a synthetic dataset
    ape        --est <file> --gt <file> print trajectory RMSE
    graph-dump --config <file> [--out]  write the relation-graph edge list

Exit codes: 0 success, 1 usage error, 2 data error, 3 solver failure.
All diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .graph import build_relation_graph, export_graph
from .metrics import MetricError, ape
from .solver import SolveFailed, SolverConfig, run_pipeline
from .synthetic import generate_scene, parse_scene_spec

USAGE_ERROR, DATA_ERROR, SOLVER_ERROR = 1, 2, 3
OUT_CLOUD_VOXEL = 0.05


def _load_dataset(cfg: SolverConfig, paths: dict[str, str], config_dir: Path):
    if "cloud" not in paths or "trajectory" not in paths:
        raise lio.ConfigError("config must provide cloud= and trajectory=")
    cloud_path = config_dir / paths["cloud"]
    traj_path = config_dir / paths["trajectory"]
    frames = lio.read_cloud(cloud_path)
    trajectory = lio.read_trajectory(traj_path)
    if len(trajectory) != len(frames):
        raise lio.FormatError(
            f"{len(frames)} frames but {len(trajectory)} trajectory poses")
    poses = {f.frame_id: trajectory[k][1] for k, f in enumerate(frames)}
    timestamps = [ts for ts, _ in trajectory]
    return frames, poses, timestamps


def _cmd_run(args) -> int:
    cfg, paths = lio.parse_config(args.config)
    config_dir = Path(args.config).resolve().parent
    frames, poses, timestamps = _load_dataset(cfg, paths, config_dir)
    out_dir = Path(config_dir / paths.get("out_dir", "out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    final_poses, report = run_pipeline(frames, poses, cfg)
    if report.get("aborted"):
        print("solver aborted: " + "; ".join(
            report["iterations"][-1]["errors"]), file=sys.stderr)
        (out_dir / "report.json").write_text(json.dumps(report, indent=2))
        return SOLVER_ERROR
    lio.write_trajectory(out_dir / "trajectory.txt",
                         [(timestamps[k], final_poses[f.frame_id])
                          for k, f in enumerate(frames)])
    merged = np.vstack([final_poses[f.frame_id].apply(f.points) for f in frames])
    lio.write_cloud(out_dir / "map.ply",
                    lio.voxel_downsample(merged, OUT_CLOUD_VOXEL))
    graph = build_relation_graph(frames, final_poses, cfg.gamma0,
                                 overlap_threshold=cfg.overlap_threshold)
    export_graph(graph, out_dir / "graph.txt")
    (out_dir / "report.json").write_text(json.dumps(report, indent=2))
    return 0


def _cmd_synth(args) -> int:
    spec = parse_scene_spec(args.spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames, true_poses, init_poses = generate_scene(spec)
    pts = np.vstack([f.points for f in frames])
    fids = np.concatenate([np.full(len(f.points), f.frame_id) for f in frames])
    lio.write_cloud(out_dir / "cloud.ply", pts, frame_ids=fids)
    lio.write_trajectory(out_dir / "groundtruth.txt",
                         [(float(f.frame_id), true_poses[f.frame_id]) for f in frames])
    lio.write_trajectory(out_dir / "initial.txt",
                         [(float(f.frame_id), init_poses[f.frame_id]) for f in frames])
    (out_dir / "run.cfg").write_text(
        "cloud = cloud.ply\ntrajectory = initial.txt\nout_dir = out\n")
    return 0


def _cmd_ape(args) -> int:
    est = lio.read_trajectory(args.est)
    gt = lio.read_trajectory(args.gt)
    rmse, _ = ape([p for _, p in est], [p for _, p in gt])
    print(f"{rmse:.6f}")
    return 0


def _cmd_graph_dump(args) -> int:
    cfg, paths = lio.parse_config(args.config)
    config_dir = Path(args.config).resolve().parent
    frames, poses, _ = _load_dataset(cfg, paths, config_dir)
    graph = build_relation_graph(frames, poses, cfg.gamma0,
                                 overlap_threshold=cfg.overlap_threshold)
    export_graph(graph, args.out)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lba", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="refine a dataset")
    p_run.add_argument("--config", required=True)
    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    p_synth.add_argument("--spec", required=True)
    p_synth.add_argument("--out", required=True)
    p_ape = sub.add_parser("ape", help="trajectory RMSE after rigid alignment")
    p_ape.add_argument("--est", required=True)
    p_ape.add_argument("--gt", required=True)
    p_dump = sub.add_parser("graph-dump", help="write the relation-graph edge list")
    p_dump.add_argument("--config", required=True)
    p_dump.add_argument("--out", default="graph.txt")
    return parser


_HANDLERS = {"run": _cmd_run, "synth": _cmd_synth, "ape": _cmd_ape,
             "graph-dump": _cmd_graph_dump}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else USAGE_ERROR
    try:
        return _HANDLERS[args.command](args)
    except (lio.ConfigError, lio.ParseError, lio.OrderError, lio.FormatError,
            MetricError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except SolveFailed as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return SOLVER_ERROR


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
