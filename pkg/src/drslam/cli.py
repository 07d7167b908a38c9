"""Command-line entry point: simulate, run, sweep, repeat, eval.

Every command writes into an output directory that also receives the
resolved configuration echo; re-running from that echo with the same seed
reproduces the outputs byte-identically. Exit codes: 0 success, 1 failed
run verdict, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

from . import evaluation
from .config import RunConfig, parse_config
from .errors import ConfigError, DrSlamError
from .fileio import fmt, read_tum, write_csv, write_tum
from .pipeline import run_pipeline, save_map
from .simulator import read_sequence, simulate_sequence, write_sequence

EXIT_OK = 0
EXIT_FAILED_VERDICT = 1
EXIT_USAGE = 2

OUTPUT_ROOT_ENV = "DRSLAM_OUT"


def resolve_config_path(name: str | None):
    if name is None:
        return None
    if os.path.exists(name):
        return name
    bundled = resources.files("drslam").joinpath(f"configs/{name}.cfg")
    if bundled.is_file():
        return str(bundled)
    raise ConfigError(f"config {name!r} is neither a file nor a bundled config")


def _load_config(args) -> RunConfig:
    config = parse_config(resolve_config_path(args.config), overrides=args.set or ())
    if getattr(args, "mode", None):
        config.set("run.mode", args.mode)
    if getattr(args, "seed", None) is not None:
        config.set("run.seed", str(args.seed))
    return config


def _out_dir(args, default_name: str) -> str:
    out = args.out
    if out is None:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root is None:
            raise ConfigError("no --out given and DRSLAM_OUT is not set")
        out = os.path.join(root, default_name)
    os.makedirs(out, exist_ok=True)
    return out


def _echo_config(config: RunConfig, out: str) -> None:
    with open(os.path.join(out, "config.cfg"), "w") as f:
        f.write(config.echo())


def cmd_simulate(args) -> int:
    config = _load_config(args)
    out = _out_dir(args, f"seq_{config.seed}")
    sequence = simulate_sequence(config.world_config())
    write_sequence(sequence, out)
    _echo_config(config, out)
    print(f"simulated {len(sequence.records)} frames, "
          f"{len(sequence.world)} landmarks -> {out}")
    return EXIT_OK


def _write_run_outputs(result, sequence, out: str) -> None:
    write_tum(os.path.join(out, "est_frames.tum"), result.frame_trajectory())
    write_tum(os.path.join(out, "est_keyframes.tum"), result.keyframe_trajectory())
    write_csv(os.path.join(out, "run_log.csv"),
              ["frame_id", "timestamp", "n_det", "n_trk", "q", "alpha",
               "iterations", "tracked_ok"],
              [(f.id, float(f.timestamp), f.stats.n_det, f.stats.n_trk,
                float(f.quality), float(f.alpha), f.solver_iterations,
                int(f.tracked_ok)) for f in result.frames])
    save_map(result.slam_map, os.path.join(out, "map.gwmap"))


def _run_verdict(result, sequence):
    ref_rows = [(r.timestamp, r.gt_pose) for r in sequence.records if r.gt_pose is not None]
    if len(ref_rows) < 3:
        return None
    est = evaluation.Trajectory.from_rows(result.frame_trajectory())
    ref = evaluation.Trajectory.from_rows(ref_rows)
    return evaluation.verdict(est, ref, [f.tracked_ok for f in result.frames])


def cmd_run(args) -> int:
    config = _load_config(args)
    sequence = read_sequence(args.seq)
    out = _out_dir(args, f"run_{config.mode}_{config.seed}")
    result = run_pipeline(sequence, config.pipeline_params(), config.mode)
    _write_run_outputs(result, sequence, out)
    _echo_config(config, out)
    rows = [("mode", config.mode),
            ("frames", str(len(result.frames))),
            ("keyframes", str(len(result.slam_map.keyframes))),
            ("tracking_ratio", fmt(result.tracking_ratio())),
            ("track_lost_frame",
             "" if result.track_lost_frame is None else str(result.track_lost_frame)),
            ("loop_closures", str(len(result.gba_events)))]
    v = _run_verdict(result, sequence)
    if v is not None:
        rows += [("ape_rmse_m", fmt(v.rmse)), ("completed", str(v.completed).lower())]
    write_csv(os.path.join(out, "metrics.csv"), ["metric", "value"], rows)
    print(f"run {config.mode}: {len(result.frames)} frames, "
          f"{len(result.slam_map.keyframes)} keyframes -> {out}")
    if v is not None and not v.completed:
        print(f"run verdict failed: rmse={v.rmse:.3f} m, "
              f"tracking ratio={v.tracking_ratio:.2f}", file=sys.stderr)
        return EXIT_FAILED_VERDICT
    return EXIT_OK


def _sweep_task(task):
    seq_dir, alphas, repeat, config_values, frame_range = task
    config = RunConfig(dict(config_values))
    sequence = read_sequence(seq_dir)
    return evaluation.sweep_repeat(sequence, alphas, repeat,
                                   params=config.pipeline_params(),
                                   frame_range=frame_range)


def cmd_sweep(args) -> int:
    config = _load_config(args)
    sequence = read_sequence(args.seq)
    out = _out_dir(args, f"sweep_{config.seed}")
    alphas = [float(a) for a in args.alphas.split(",")]
    frame_range = None
    if args.segment:
        a, _, b = args.segment.partition(":")
        frame_range = (int(a), int(b))
    if args.jobs > 1:
        tasks = [(args.seq, alphas, r, config.values, frame_range)
                 for r in range(args.repeats)]
        rows = []
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for part in pool.map(_sweep_task, tasks):
                rows.extend(part)
        rows = evaluation.fill_medians(rows)
    else:
        rows = evaluation.alpha_sweep(sequence, alphas, repeats=args.repeats,
                                      params=config.pipeline_params(),
                                      frame_range=frame_range)
    write_csv(os.path.join(out, "sweep.csv"),
              ["log_alpha", "repeat", "rmse", "median"],
              [(fmt(r.log_alpha), r.repeat, float(r.rmse), float(r.median)) for r in rows])
    _echo_config(config, out)
    print(f"sweep over {len(alphas)} weights x {args.repeats} repeats -> {out}")
    return EXIT_OK


def cmd_repeat(args) -> int:
    config = _load_config(args)
    sequence = read_sequence(args.seq)
    out = _out_dir(args, f"repeat_{config.mode}_{config.seed}")
    reports, result = evaluation.repeat_run(sequence, args.loops,
                                            config.pipeline_params(), config.mode)
    write_csv(os.path.join(out, "repeat.csv"), ["loop", "frame_rmse", "r_f_kf"],
              [(r.loop, float(r.frame_rmse), float(r.ratio)) for r in reports])
    _write_run_outputs(result, sequence, out)
    _echo_config(config, out)
    for r in reports:
        print(f"loop {r.loop}: frame RMSE {r.frame_rmse:.4f} m, R(F/KF) {r.ratio:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    est = evaluation.Trajectory.from_rows(read_tum(args.est))
    ref = evaluation.Trajectory.from_rows(read_tum(args.ref))
    out = _out_dir(args, "eval")
    rmse = evaluation.ape_rmse(est, ref)
    errors = evaluation.per_frame_errors(est, ref)
    write_csv(os.path.join(out, "errors.csv"), ["frame_id", "err_m"],
              [(i, float(e)) for i, (_, e) in enumerate(errors)])
    rows = [("ape_rmse_m", fmt(rmse)),
            ("pairs", str(len(errors))),
            ("max_err_m", fmt(max(e for _, e in errors)))]
    write_csv(os.path.join(out, "metrics.csv"), ["metric", "value"], rows)
    print(f"APE RMSE {rmse:.6f} m over {len(errors)} pairs -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drslam",
        description="Adaptive dead-reckoning weighting for visual SLAM: "
                    "simulation, pipeline runs, sweeps, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="bundled config name or path")
            p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                           help="override a configuration entry")
            p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", help=f"output directory (default under ${OUTPUT_ROOT_ENV})")

    p = sub.add_parser("simulate", help="generate a synthetic sequence directory")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run the pipeline on a sequence")
    common(p)
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--mode", help="vision-only | da-only | fixed-dr | adaptive | dr-only")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="fixed-weight sweep over log10 alpha values")
    common(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--alphas", default="-2,-1,0,1,2,3", help="comma-separated log10 weights")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--segment", help="frame range start:stop to evaluate")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("repeat", help="repeat-run protocol over continuous loops")
    common(p)
    p.add_argument("--seq", required=True)
    p.add_argument("--loops", type=int, default=3)
    p.add_argument("--mode", help="pipeline mode for the repeated run")
    p.set_defaults(func=cmd_repeat)

    p = sub.add_parser("eval", help="APE between two TUM trajectories")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DrSlamError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
