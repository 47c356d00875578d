"""Command-line front end binding all subsystems.

Subcommands: ingest (plus `ingest fixtures`), build-track, render, simulate,
train, eval, serve, bench. Exit codes: 0 ok, 1 runtime error, 2 usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fixtures as fixture_gen
from .config import dump_default_config, load_config
from .env import DrivingEnv
from .errors import SplatSimError
from .physics import Controls
from .poses import derive_gravity, normalize_scene, parse_colmap, parse_pose_json
from .render import PinholeCamera, render, render_to_png
from .rl import evaluate, load_checkpoint, train
from .splats import load_splat_ply, save_splat_ply
from .track import export_track
from .transforms import RigidTransform

log = logging.getLogger("splatsim")


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg, scenario=dataclasses.replace(cfg.scenario, seed=args.seed),
            ppo=dataclasses.replace(cfg.ppo, seed=args.seed),
        )
    return cfg


def _cmd_ingest(args) -> int:
    if args.fixtures:
        out = Path(args.out)
        scenes = ["straight", "turn"] if args.scene == "both" else [args.scene]
        written = {}
        for scene in scenes:
            written[scene] = fixture_gen.generate_fixture_set(
                out, scene=scene, seed=args.fixture_seed, density=args.density
            )
        print(json.dumps(written, indent=2))
        return 0

    cfg = _load(args)
    parse = parse_colmap if cfg.poses.format == "colmap" else parse_pose_json
    poses = parse(cfg.poses.path, cfg.poses.up_convention)
    poses = derive_gravity(poses, cfg.poses.g)
    scene = load_splat_ply(cfg.scenario.env_asset)
    scene, poses = normalize_scene(scene, poses)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    env_out = out / "environment_normalized.ply"
    poses_out = out / "poses_normalized.json"
    save_splat_ply(scene, env_out)
    manifest = [
        {
            "label": p.label,
            "position": [float(v) for v in p.position],
            "rotation": [float(v) for v in p.rotation],
            "order": p.order_key,
        }
        for p in poses.poses
    ]
    poses_out.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    print(f"wrote {env_out} ({len(scene)} gaussians) and {poses_out} "
          f"(gravity {np.round(poses.gravity, 4).tolist()})")
    return 0


def _cmd_build_track(args) -> int:
    cfg = _load(args)
    env = cfg.make_env()
    export_track(env.track, args.out, format="json")
    if args.obj:
        export_track(env.track, args.obj, format="obj")
    print(
        f"track: {len(env.track.blocks)} blocks over {env.spline.total_length:.2f} m "
        f"-> {args.out}"
    )
    return 0


def _cmd_render(args) -> int:
    cfg = _load(args)
    parse = parse_colmap if cfg.poses.format == "colmap" else parse_pose_json
    poses = parse(cfg.poses.path, cfg.poses.up_convention)
    if not 0 <= args.pose_index < len(poses):
        raise SplatSimError(f"pose index {args.pose_index} outside 0..{len(poses) - 1}")
    pose = poses.poses[args.pose_index]
    scene = load_splat_ply(cfg.scenario.env_asset)
    cam = PinholeCamera.from_fov(
        cfg.render.width, cfg.render.height, cfg.render.fov_deg,
        RigidTransform(pose.rotation, pose.position), cfg.render.near,
    )
    fb = render([scene], cam, cfg.render.background)
    render_to_png(fb, args.out)
    print(f"rendered pose {args.pose_index} ({pose.label}) -> {args.out}")
    return 0


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    env = cfg.make_env()
    env.reset(seed=cfg.scenario.seed)
    action = Controls(throttle=args.throttle, steer=args.steer, brake=args.brake)
    trace = []
    for _ in range(args.steps):
        obs, reward, terminated, truncated, info = env.step(action)
        trace.append({"s": info["s"], "reward": reward})
        if terminated or truncated:
            break
    result = env.last_result
    summary = {
        "outcome": result.outcome if result else "running",
        "steps": len(trace),
        "total_reward": env._total_reward,
        "final_s": trace[-1]["s"] if trace else cfg.scenario.spawn_s,
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out).write_text(json.dumps({"summary": summary, "trace": trace}),
                                  encoding="utf-8")
    return 0


def _cmd_train(args) -> int:
    cfg = _load(args)

    def make_env():
        return cfg.make_env()

    def progress(msg):
        print(msg, flush=True)

    result = train(
        cfg.scenario,
        cfg.ppo,
        env_factory=make_env,
        curve_path=args.curve,
        checkpoint_path=args.out,
        log=progress,
    )
    if args.curve and args.figure:
        from .report import save_learning_curve_figure

        save_learning_curve_figure(result.curve, args.figure)
    print(f"checkpoint -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load(args)
    params, _ = load_checkpoint(args.checkpoint)

    def make_env():
        return cfg.make_env()

    accuracy, outcomes = evaluate(
        params, cfg.scenario, episodes=args.episodes, env_factory=make_env,
        base_seed=args.eval_seed,
    )
    print(f"accuracy: {accuracy:.1f}% over {len(outcomes)} episodes")
    counts = {o: outcomes.count(o) for o in sorted(set(outcomes))}
    print(json.dumps(counts))
    return 0


def _cmd_serve(args) -> int:
    from .server import serve_forever

    cfg = _load(args)
    host, _, port = args.bind.rpartition(":")
    try:
        address = (host or "127.0.0.1", int(port))
    except ValueError:
        raise SplatSimError(f"bad bind address {args.bind!r}; use host:port")

    def make_env():
        return cfg.make_env()

    print(f"serving on {address[0]}:{address[1]}", flush=True)
    serve_forever(address, make_env)
    return 0


def _cmd_bench(args) -> int:
    from .report import run_bench, save_frame_time_figure

    cfg = _load(args)
    env = cfg.make_env()
    report, times = run_bench(env, args.duration, seed=cfg.scenario.seed)
    print(report.to_json())
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
        figure = args.figure or str(Path(args.out).with_suffix("")) + "_frametimes.png"
        save_frame_time_figure(times, figure)
        print(f"report -> {args.out}, figure -> {figure}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatsim",
        description="Headless driving simulator on 3D Gaussian splat assets",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p, seed=True):
        p.add_argument("--config", required=True, help="simulator config YAML")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override config seeds")

    p = sub.add_parser("ingest", help="normalize assets, or generate synthetic fixtures")
    p.add_argument("fixtures", nargs="?", choices=["fixtures"],
                   help="generate synthetic fixture scenes instead of ingesting")
    p.add_argument("--config", help="simulator config YAML (ingest mode)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scene", choices=["straight", "turn", "both"], default="both")
    p.add_argument("--fixture-seed", type=int, default=0)
    p.add_argument("--density", type=float, default=1.0,
                   help="splat-count multiplier for fixture environments")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("build-track", help="build the road-block track and export it")
    add_config(p)
    p.add_argument("--out", required=True, help="track JSON path")
    p.add_argument("--obj", help="optional OBJ debug mesh path")
    p.set_defaults(func=_cmd_build_track)

    p = sub.add_parser("render", help="render the environment from a capture pose")
    add_config(p)
    p.add_argument("--pose-index", type=int, default=0)
    p.add_argument("--out", required=True, help="output PNG")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("simulate", help="run a scripted episode")
    add_config(p)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--throttle", type=float, default=0.5)
    p.add_argument("--steer", type=float, default=0.0)
    p.add_argument("--brake", type=float, default=0.0)
    p.add_argument("--out", help="optional JSON trace path")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("train", help="train the built-in PPO policy")
    add_config(p)
    p.add_argument("--out", required=True, help="checkpoint JSON path")
    p.add_argument("--curve", help="learning-curve CSV path")
    p.add_argument("--figure", help="learning-curve PNG path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--eval-seed", type=int, default=10_000)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="run the TCP protocol server")
    add_config(p)
    p.add_argument("--bind", default="127.0.0.1:5555")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("bench", help="benchmark the simulate+render loop")
    add_config(p)
    p.add_argument("--duration", type=float, default=10.0, help="seconds")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--figure", help="frame-time PNG path")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "ingest" and not args.fixtures and not args.config:
        parser.error("ingest requires --config (or the 'fixtures' mode)")
    try:
        return args.func(args)
    except SplatSimError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
