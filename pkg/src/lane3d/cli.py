"""Command line entry point.

Exit codes: 0 success, 1 validation or data failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import Lane3DError
from .evaluation import MatchConfig, eval2d_culane, eval3d
from .geometry import DEFAULT_IMAGE_SIZE, BevGridSpec, CameraParams, default_camera
from .io import (dumps_canonical, load_config, read_frame_file, read_tensor, write_frame_file,
                 write_tensor)
from .lanes import FrameRecord, Lane3D, Pose, is_function_of_y, resample_at_y

log = logging.getLogger("lane3d")


# ---------------------------------------------------------------------------
# dataset layout helpers


def _frame_paths(path: Path):
    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.glob("*.json") if p.name != "manifest.json")
    if path.name == "manifest.json":
        man = json.loads(path.read_text())
        return [path.parent / "frames" / f"{fid}.json" for fid in man["frames"]]
    return [path]


def _load_frames(path):
    return [read_frame_file(p) for p in _frame_paths(path)]


def truth_lane_for_frame(truth_world: Lane3D, pose: Pose, spec: BevGridSpec, step=0.5):
    """Exact truth in the frame's ego coordinates, trimmed to the BEV window.

    Single-valued lanes are resampled on the ``step`` grid of y; folded ones keep
    every tenth source vertex."""
    ego = pose.world_to_ego(truth_world.points)
    (x0, x1), (y0, y1) = spec.x_extent, spec.y_extent
    ego = ego[(ego[:, 1] >= y0) & (ego[:, 1] <= y1) & (ego[:, 0] >= x0) & (ego[:, 0] <= x1)]
    if len(ego) < 2:
        return None
    if is_function_of_y(ego[:, 1]):
        yq = np.arange(np.ceil(ego[:, 1].min() / step), np.floor(ego[:, 1].max() / step) + 1) * step
        if np.any(np.diff(ego[:, 1]) < 0):
            ego = ego[::-1]
        if len(yq) < 2:
            return None
        lane = Lane3D(ego, category=truth_world.category, track_id=truth_world.track_id)
        x, z, _ = resample_at_y(lane, yq)
        pts = np.column_stack([x, yq, z])
    else:
        pts = ego[::10]
    return Lane3D(pts, category=truth_world.category, track_id=truth_world.track_id)


def cmd_synth(args, cfg):
    from .gt.pipeline import mark_visibility
    from .gt.synth import LaneSpec, SceneSpec, synth_scene

    kw = dict(cfg.get("scene", {}))
    if "lane_offsets" in kw:
        kw["lanes"] = [LaneSpec(o) for o in kw.pop("lane_offsets")]
    if "hill" in kw:
        kw["hill"] = tuple(kw["hill"])
    if args.frames is not None:
        kw["n_frames"] = args.frames
    if args.noise is not None:
        kw["noise"] = args.noise
    spec = SceneSpec(**kw)
    scene = synth_scene(spec, args.seed)
    out = Path(args.out)
    for sub in ("frames", "lidar", "truth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    grid = BevGridSpec()
    for i, fr in enumerate(scene.frames):
        write_tensor(fr.lidar.points, out / "lidar" / f"{fr.frame_id}.tensor", role="lidar_points")
        extras = {"lidar": f"lidar/{fr.frame_id}.tensor",
                  "object_boxes": [[float(v) for v in b] for b in fr.lidar.object_boxes]}
        write_frame_file(FrameRecord(fr.cam, lanes_2d=fr.lanes_2d, frame_id=fr.frame_id, pose=fr.pose,
                                     extras=extras), out / "frames" / f"{fr.frame_id}.json")
        ann = {l.track_id: l for l in fr.lanes_2d}
        truth = []
        for t in scene.truth:
            if t.track_id not in ann:
                continue
            lane = truth_lane_for_frame(t, fr.pose, grid)
            if lane is not None:
                truth.append(mark_visibility(lane, ann[t.track_id], fr.cam, fr.image_size))
        write_frame_file(FrameRecord(fr.cam, lanes_3d=truth, lanes_2d=fr.lanes_2d, frame_id=fr.frame_id,
                                     pose=fr.pose), out / "truth" / f"{fr.frame_id}.json")
    manifest = {"frames": [f.frame_id for f in scene.frames], "image_size": list(spec.image_size),
                "seed": args.seed}
    (out / "manifest.json").write_text(dumps_canonical(manifest))
    print(f"wrote {len(scene.frames)} frames to {out}")
    return 0


@dataclass
class _DiskFrame:
    frame_id: str
    cam: CameraParams
    pose: Pose
    lanes_2d: list
    lidar: object
    image_size: tuple = DEFAULT_IMAGE_SIZE


def cmd_gen_gt(args, cfg):
    from .gt.pipeline import LabelConfig, generate_labels, lane_rms_to_truth
    from .gt.synth import LidarFrame

    manifest = Path(args.scene)
    root = manifest.parent
    man = json.loads(manifest.read_text())
    frames = []
    for fid in man["frames"]:
        rec = read_frame_file(root / "frames" / f"{fid}.json")
        pts = read_tensor(root / rec.extras["lidar"]).astype(np.float64)
        lidar = LidarFrame(pts, rec.pose, np.array(rec.extras.get("object_boxes", [])))
        frames.append(_DiskFrame(rec.frame_id, rec.cam, rec.pose, rec.lanes_2d, lidar,
                                 tuple(man.get("image_size", DEFAULT_IMAGE_SIZE))))
    lc = LabelConfig(radius_px=cfg.get("radius_px", args.radius_px),
                     support_px=cfg.get("support_px", LabelConfig.support_px),
                     workers=cfg.get("workers", args.workers))
    labels = generate_labels(frames, config=lc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sq, n_pts, n_lanes = 0.0, 0, 0
    for fr, lanes in zip(frames, labels):
        write_frame_file(FrameRecord(fr.cam, lanes_3d=lanes, lanes_2d=fr.lanes_2d, frame_id=fr.frame_id,
                                     pose=fr.pose), out / f"{fr.frame_id}.json")
        n_lanes += len(lanes)
        tpath = root / "truth" / f"{fr.frame_id}.json"
        if tpath.exists():
            truth = {l.track_id: l for l in read_frame_file(tpath).lanes_3d}
            for lane in lanes:
                t = truth.get(lane.track_id)
                k = int(lane.visibility.sum())
                if t is not None and k:
                    sq += lane_rms_to_truth(lane, t) ** 2 * k
                    n_pts += k
    print(f"labels: {n_lanes} lanes over {len(frames)} frames")
    if n_pts:
        print(f"rms vs truth (m): {np.sqrt(sq / n_pts):.4f}")
    return 0


def _match_cfg(args, cfg):
    return MatchConfig(max_dist=cfg.get("max_dist", args.max_dist),
                       coverage_frac=cfg.get("coverage", args.coverage),
                       near_far_split=cfg.get("near_far_split", MatchConfig.near_far_split))


def _emit(report, args):
    print(report.format_text())
    if args.json:
        Path(args.json).write_text(dumps_canonical(report.to_dict()))
    return 0


def cmd_eval3d(args, cfg):
    return _emit(eval3d(_load_frames(args.pred), _load_frames(args.gt), _match_cfg(args, cfg)), args)


def cmd_eval2d(args, cfg):
    rep = eval2d_culane(_load_frames(args.pred), _load_frames(args.gt),
                        iou_thresh=cfg.get("iou_thresh", args.iou))
    print(f"{'F-score':<20}{rep.f_score:.3f}\n{'precision':<20}{rep.precision:.3f}\n"
          f"{'recall':<20}{rep.recall:.3f}\n{'TP/FP/FN':<20}{rep.tp}/{rep.fp}/{rep.fn}")
    if args.json:
        Path(args.json).write_text(dumps_canonical(
            {k: rep.to_dict()[k] for k in ("f_score", "precision", "recall", "tp", "fp", "fn", "n_frames")}))
    return 0


def cmd_anchors(args, cfg):
    from .anchors import build_anchor_set

    a = build_anchor_set()
    if args.action not in ("summary", "dump"):
        print(f"unknown anchors action {args.action!r}", file=sys.stderr)
        return 2
    print(f"anchors: {len(a)}  starts: {len(a.starts_x)}  angles: {len(a.angles)}")
    print("start x (m): " + " ".join(f"{x:.2f}" for x in a.starts_x))
    print("angles (deg): " + " ".join(f"{np.degrees(t):.2f}" for t in a.angles))
    if args.action == "summary":
        return 0
    print(f"{'idx':>4} {'start':>7} {'angle':>7}  " + " ".join(f"{f'x@{y:g}':>7}" for y in a.y_samples_3d))
    for i in range(len(a)):
        xs = " ".join(f"{x:7.2f}" if v else f"{'-':>7}" for x, v in zip(a.x_3d[i], a.vis_3d[i]))
        print(f"{i:4d} {a.starts_x[a.start_index[i]]:7.2f} {np.degrees(a.angles[a.angle_index[i]]):7.2f}  {xs}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        tensors = {"x_3d": a.x_3d, "vis_3d": a.vis_3d, "u_2d": a.u_2d, "vis_2d": a.vis_2d}
        for name, t in tensors.items():
            write_tensor(np.asarray(t, dtype=np.float64), out / f"{name}.tensor", role=f"anchor_{name}")
        meta = {"count": len(a), "starts_x": [float(x) for x in a.starts_x],
                "angles_rad": [float(t) for t in a.angles],
                "y_samples_3d": [float(y) for y in a.y_samples_3d],
                "v_samples_2d": [float(v) for v in a.v_samples_2d],
                "index": "start * n_angles + angle", "tensors": sorted(f"{n}.tensor" for n in tensors)}
        (out / "anchors.json").write_text(dumps_canonical(meta))
    return 0


def cmd_persformer(args, cfg):
    from .core.gradcheck import grad_check_suite
    from .core.model import FeaturePyramid, TransformerParams, persformer_forward

    if args.action != "demo":
        print(f"unknown persformer action {args.action!r}", file=sys.stderr)
        return 2
    rng = np.random.default_rng(args.seed)
    spec = BevGridSpec(width_cells=6, height_cells=6)
    pyr = FeaturePyramid.random(rng, shapes=((12, 16),), channels=8)
    params = TransformerParams.random(rng, spec, n_levels=1, channels=8)
    out = persformer_forward(pyr, default_camera(), spec, params)
    print(f"forward: BEV feature {out[0].shape}, checksum {float(np.sum(out[0])):.12f}")
    print(f"{'op':<30}max rel. error")
    for op, err in grad_check_suite(args.seed).items():
        print(f"{op:<30}{err:.3e}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="lane3d", parents=[common],
                                description="3D lane geometry, label generation and evaluation")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("synth", parents=[common], help="write a synthetic drive segment")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--noise", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gen-gt", parents=[common], help="generate 3D labels for a segment")
    s.add_argument("--scene", required=True, help="manifest.json written by synth")
    s.add_argument("--out", required=True)
    s.add_argument("--radius-px", type=float, default=8.0)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_gen_gt)

    for name, fn in (("eval3d", cmd_eval3d), ("eval2d", cmd_eval2d)):
        s = sub.add_parser(name, parents=[common], help=f"{name[-2:]} lane metric")
        s.add_argument("--pred", required=True)
        s.add_argument("--gt", required=True)
        s.add_argument("--json", help="also write the report as JSON here")
        if name == "eval3d":
            s.add_argument("--max-dist", type=float, default=1.5)
            s.add_argument("--coverage", type=float, default=0.75)
        else:
            s.add_argument("--iou", type=float, default=0.5)
        s.set_defaults(func=fn)

    s = sub.add_parser("anchors", parents=[common], help="print or dump the anchor layout")
    s.add_argument("action", nargs="?", default="summary", help="summary (default) or dump")
    s.add_argument("--out", help="with dump: directory for the tensor files and anchors.json")
    s.set_defaults(func=cmd_anchors)
    s = sub.add_parser("persformer", parents=[common], help="seeded forward pass and gradient checks")
    s.add_argument("action", nargs="?", default="demo")
    s.set_defaults(func=cmd_persformer)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else {}
        args.seed = getattr(args, "seed", cfg.get("seed", 0))
        return args.func(args, cfg)
    except (Lane3DError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
