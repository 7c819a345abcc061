"""Command-line entry point: simulate, run, eval, plot, inspect."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import DataError, EmptyTrajectory, JointVOError
from .evaluation import Trajectory, ate_rmse, read_trajectory, umeyama_align, write_trajectory
from .flow import read_flo, write_flo
from .geometry import CameraIntrinsics, compose, geodesic_angle, translation_angle
from .pgm import encode_depth, encode_mask, write_pgm
from .pipeline import (BackendSet, PipelineConfig, RansacPoseEstimator, ResidualSegmenter,
                       SimulatorFlowProvider, run_sequence)
from .pose import PoseConfig
from .segmentation import ThresholdSchedule

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ------------------------------------------------------------------ file I/O

def atomic_write(path, data) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_via(path, writer, *args):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        writer(tmp, *args)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------- config

def load_config(path):
    """TOML or JSON (a previous run manifest) with sections scene/pipeline/pose/run."""
    if path is None:
        return {}
    p = Path(path)
    raw = p.read_bytes()
    try:
        if p.suffix == ".json":
            cfg = json.loads(raw).get("config", {})
        else:
            cfg = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as err:
        raise UsageError(f"cannot parse config {path}: {err}") from None
    unknown = set(cfg) - {"scene", "pipeline", "pose", "run"}
    if unknown:
        raise UsageError(f"unknown config sections: {', '.join(sorted(unknown))}")
    return cfg


def _scene_config(section):
    from .simulator import SceneConfig
    return SceneConfig(**section)


def _pipeline_config(section):
    section = dict(section)
    if "schedule" in section:
        section["schedule"] = ThresholdSchedule(**section["schedule"])
    return PipelineConfig(**section)


def _merge(cfg, args):
    """Apply CLI overrides on top of the file config."""
    cfg = {k: dict(v) for k, v in cfg.items()}
    run = cfg.setdefault("run", {})
    scene = cfg.setdefault("scene", {})
    pipe = cfg.setdefault("pipeline", {})
    cfg.setdefault("pose", {})
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    run.setdefault("seed", 0)
    if getattr(args, "frames", None) is not None:
        scene["frames"] = args.frames
    if getattr(args, "dynamic", None) is not None:
        scene["dynamic_fraction_target"] = args.dynamic
        if args.dynamic == 0:
            scene["n_bodies"] = 0
    if getattr(args, "scale_mode", None) is not None:
        run["scale_mode"] = args.scale_mode
    run.setdefault("scale_mode", "gt_scale")
    if getattr(args, "noise", None) is not None:
        run["noise_sigma"] = args.noise
    run.setdefault("noise_sigma", 0.0)
    pipe.setdefault("seed", run["seed"])
    return cfg


# --------------------------------------------------------------- subcommands

def _write_bundle(out, scene):
    from .simulator import render_pair
    out = Path(out)
    n = scene.n_frames
    depths = {}
    for t in range(n - 1):
        truth = render_pair(scene, t)
        _atomic_via(out / "flow" / f"{t:06d}.flo", write_flo, truth.flow)
        _atomic_via(out / "mask" / f"{t:06d}.pgm", write_pgm, encode_mask(truth.gt_mask))
        depths.setdefault(t, truth.depth_t)
        depths[t + 1] = truth.depth_t1
    for t, d in depths.items():
        _atomic_via(out / "depth" / f"{t:06d}.pgm", write_pgm, encode_depth(d.depth, d.valid))
    gt = Trajectory(np.arange(n, dtype=float), scene.trajectory)
    _atomic_via(out / "groundtruth.txt", write_trajectory, gt, "tum")
    meta = {"seed": scene.seed, "frames": n, "scene": scene.config.to_dict(),
            "intrinsics": scene.K.to_dict(), "version": __version__}
    atomic_write(out / "scene.json", _dump_json(meta))


def cmd_simulate(args):
    from .simulator import generate_scene
    cfg = _merge(load_config(args.config), args)
    scene = generate_scene(cfg["run"]["seed"], _scene_config(cfg["scene"]))
    _write_bundle(args.out, scene)
    print(f"wrote {scene.n_frames}-frame bundle to {args.out}")
    return EXIT_OK


class BundleFlowProvider:
    """Reads ``flow/NNNNNN.flo`` files of a simulate bundle."""

    def __init__(self, root):
        self.root = Path(root)
        self.calls = 0

    def __call__(self, pair):
        self.calls += 1
        return read_flo(self.root / "flow" / f"{pair.index:06d}.flo")


def _frame_summary(t, res, failure, gt_motion):
    row = {"frame": t}
    if res is None:
        row.update(status="failed", error=failure)
        return row
    m = res.motion
    row.update(status="ok", converged=res.converged, iterations=res.iterations,
               quat_wxyz=[float(q) for q in m.rotation.quat],
               translation=[float(v) for v in m.translation])
    if gt_motion is not None:
        row["rot_err_deg"] = float(np.degrees(geodesic_angle(m.rotation, gt_motion.rotation)))
        row["trans_err_deg"] = float(np.degrees(translation_angle(m.translation, gt_motion.translation)))
    return row


def cmd_run(args):
    cfg = _merge(load_config(args.config), args)
    if args.bundle is not None:
        meta_path = Path(args.bundle) / "scene.json"
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, ValueError) as err:
            raise DataError(f"{meta_path}: {err}") from None
        K = CameraIntrinsics(**meta["intrinsics"])
        gt = read_trajectory(Path(args.bundle) / "groundtruth.txt", "tum")
        provider = BundleFlowProvider(args.bundle)
        cfg["scene"] = meta["scene"]
        cfg["run"]["bundle"] = str(args.bundle)
    else:
        from .simulator import generate_scene
        scene = generate_scene(cfg["run"]["seed"], _scene_config(cfg["scene"]))
        K = scene.K
        gt = Trajectory(np.arange(scene.n_frames, dtype=float), scene.trajectory)
        provider = SimulatorFlowProvider(scene, noise_sigma=cfg["run"]["noise_sigma"],
                                         noise_seed=cfg["run"]["seed"])
    pcfg = _pipeline_config(cfg["pipeline"])
    pose_section = {"min_support": pcfg.min_support, "seed": pcfg.seed, **cfg["pose"]}
    backends = BackendSet(provider, ResidualSegmenter(pcfg.sigma_r),
                          RansacPoseEstimator(PoseConfig(**pose_section)))
    n = len(gt)
    gt_steps = [compose(gt.poses[t].inverse(), gt.poses[t + 1]) for t in range(n - 1)]
    steps = [float(np.linalg.norm(m.translation)) for m in gt_steps]
    seq = run_sequence(n, K, backends, pcfg, cfg["run"]["scale_mode"], steps,
                       timestamps=gt.timestamps)

    out = Path(args.out)
    fmt = args.format
    _atomic_via(out / "trajectory.txt", write_trajectory, seq.trajectory, fmt)
    _atomic_via(out / "groundtruth.txt", write_trajectory, gt, fmt)
    traces = "".join(r.trace.to_jsonl(frame=t) for t, r in enumerate(seq.results) if r is not None)
    atomic_write(out / "traces.jsonl", traces)
    for t, r in enumerate(seq.results):
        if r is not None:
            _atomic_via(out / "masks" / f"{t:06d}.pgm", write_pgm, encode_mask(r.mask))
    frames = [_frame_summary(t, r, seq.failures.get(t), gt_steps[t]) for t, r in enumerate(seq.results)]
    cfg["pipeline"] = pcfg.to_dict()
    cfg["pose"] = asdict(backends.pose_estimator.config)
    manifest = {
        "version": __version__,
        "config": cfg,
        "seeds": {"scene": cfg["run"]["seed"], "pipeline": pcfg.seed, "pose": pose_section["seed"]},
        "frames": frames,
        "outputs": {"trajectory": "trajectory.txt", "groundtruth": "groundtruth.txt",
                    "traces": "traces.jsonl", "masks": "masks", "format": fmt},
    }
    atomic_write(out / "manifest.json", _dump_json(manifest))
    ok = sum(1 for r in seq.results if r is not None)
    print(f"{ok}/{n - 1} pairs estimated, {len(seq.failures)} substituted; outputs in {out}")
    return EXIT_OK


def ate_report(est: Trajectory, gt: Trajectory, with_scale=True):
    s, _, _ = umeyama_align(est, gt, with_scale)
    return {"ate_rmse": ate_rmse(est, gt, with_scale), "scale": s,
            "with_scale": with_scale, "poses": len(est)}


def format_table(rows):
    cols = list(rows[0])
    cells = [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _cell(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_eval(args):
    est = read_trajectory(args.est, args.format)
    gt = read_trajectory(args.gt, args.format)
    if len(est) != len(gt):
        raise DataError(f"{args.est} has {len(est)} poses, {args.gt} has {len(gt)}")
    report = {"est": str(args.est), "gt": str(args.gt), **ate_report(est, gt, not args.no_scale)}
    if args.json:
        atomic_write(args.json, _dump_json(report))
    print(format_table([{"est": Path(args.est).name, "poses": report["poses"],
                         "scale": report["scale"], "ate_rmse": report["ate_rmse"]}]))
    return EXIT_OK


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def plot_svg(trajectories, labels, path, size=480, margin=40):
    """Top-down (x, z) overlay with a shared scale on both axes."""
    if not trajectories:
        raise EmptyTrajectory("nothing to plot")
    if len(labels) != len(trajectories):
        raise ValueError("one label per trajectory")
    pts = [t.positions[:, [0, 2]] for t in trajectories]
    allp = np.concatenate(pts)
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    scale = (size - 2 * margin) / span
    center = (lo + hi) / 2

    def xy(p):
        x = size / 2 + (p[0] - center[0]) * scale
        y = size / 2 - (p[1] - center[1]) * scale   # z points up the page
        return f"{x:.3f},{y:.3f}"

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for i, p in enumerate(pts):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(xy(q) for q in p)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
    for i, label in enumerate(labels):
        color = PALETTE[i % len(PALETTE)]
        y = 16 + 16 * i
        text = str(label).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        out.append(f'<line x1="10" y1="{y - 4}" x2="28" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="32" y="{y}" font-family="sans-serif" font-size="12">{text}</text>')
    out.append(f'<text x="{size - 10}" y="{size - 8}" text-anchor="end" font-family="sans-serif" '
               f'font-size="10">x / z, 1 unit = {scale:.3f} px</text>')
    out.append("</svg>")
    atomic_write(path, "\n".join(out) + "\n")


def cmd_plot(args):
    trajs = [read_trajectory(p, args.format) for p in args.trajectories]
    labels = args.labels or [Path(p).stem for p in args.trajectories]
    if len(labels) != len(trajs):
        raise UsageError("--labels needs one label per trajectory")
    plot_svg(trajs, labels, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args):
    man_path = Path(args.manifest)
    try:
        manifest = json.loads(man_path.read_text())
        traces_name = manifest["outputs"]["traces"]
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"{man_path}: unreadable manifest ({err})") from None
    rows = []
    for lineno, line in enumerate((man_path.parent / traces_name).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except ValueError as err:
            raise DataError(f"{traces_name}:{lineno}: {err}") from None
        rows.append({"frame": rec["frame"], "iter": rec["iteration"], "z_thr": rec["z_threshold"],
                     "mask": rec["mask_fraction"],
                     "dR_deg": None if rec["delta_R"] is None else float(np.degrees(rec["delta_R"])),
                     "dt_deg": None if rec["delta_t"] is None else float(np.degrees(rec["delta_t"])),
                     "inliers": rec["inlier_count"]})
    if not rows:
        print("no iteration records")
        return EXIT_OK
    print(format_table(rows))
    failed = [f for f in manifest.get("frames", []) if f.get("status") == "failed"]
    for f in failed:
        print(f"frame {f['frame']}: {f['error']}")
    return EXIT_OK


# ------------------------------------------------------------------ dispatch

def build_parser():
    p = _Parser(prog="jointvo", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a scene and write its ground-truth bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--dynamic", type=float, help="target dynamic pixel share")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run the pipeline on a simulated scene or a bundle")
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.add_argument("--bundle")
    r.add_argument("--seed", type=int)
    r.add_argument("--frames", type=int)
    r.add_argument("--dynamic", type=float)
    r.add_argument("--noise", type=float, help="flow noise sigma in pixels")
    r.add_argument("--scale-mode", choices=["gt_scale", "unit"])
    r.add_argument("--format", choices=["tum", "kitti"], default="tum")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="ATE of an estimated trajectory against ground truth")
    e.add_argument("est")
    e.add_argument("gt")
    e.add_argument("--format", choices=["tum", "kitti"], default="tum")
    e.add_argument("--no-scale", action="store_true", help="rigid instead of similarity alignment")
    e.add_argument("--json", help="also write the report here")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="top-down SVG overlay of trajectories")
    pl.add_argument("trajectories", nargs="+")
    pl.add_argument("--out", required=True)
    pl.add_argument("--labels", nargs="+")
    pl.add_argument("--format", choices=["tum", "kitti"], default="tum")
    pl.set_defaults(func=cmd_plot)

    i = sub.add_parser("inspect", help="per-iteration trace table of a run")
    i.add_argument("manifest")
    i.set_defaults(func=cmd_inspect)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().rstrip() + "\njointvo: error: a subcommand is required")
        return args.func(args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_DATA
    except (JointVOError, TypeError, ValueError) as err:
        # bad configuration values
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_USAGE


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
