"""Batch command-line interface for every pipeline stage.

Exit codes: 0 success, 1 usage, 2 input format, 3 numerical abort. Failures
print one machine-parsable stderr line prefixed "E<code>:".
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import compose as cmp
from . import conditioning as cond
from . import fileio, pointcloud, surfels, training, viewsynth
from .cameras import (CameraRing, Pinhole, RigidPose, look_at,
                      outward_cameras, ring_cameras)
from .errors import DivergenceError, InputFormatError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_camera_file(path) -> tuple[Pinhole, RigidPose]:
    try:
        d = json.loads(Path(path).read_text())
        return Pinhole.from_dict(d["pinhole"]), RigidPose.from_dict(d["pose"])
    except (KeyError, ValueError, TypeError) as exc:
        raise InputFormatError(f"{path}: bad camera JSON ({exc})") from exc


def _angles(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"bad angle list {text!r}") from exc


def _ensure_normals(pc: pointcloud.PointCloud, k: int = 16) -> pointcloud.PointCloud:
    if pc.normals is not None:
        return pc
    return pointcloud.estimate_normals(pc, k=min(k, len(pc)))


def _write_trace_csv(path, trace: np.ndarray, header: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for row in trace:
            w.writerow([f"{x:.17g}" if isinstance(x, float) else x for x in row])


# --- subcommands ---------------------------------------------------------------


def _cmd_lift(args) -> int:
    rgb = fileio.read_png(args.pano)
    if rgb.ndim == 2:
        rgb = np.stack([rgb] * 3, axis=-1)
    depth = fileio.read_depth_raster(args.depth)
    if depth.shape != rgb.shape[:2]:
        raise InputFormatError("panorama and depth dimensions differ")
    frame = pointcloud.EquirectFrame(rgb=rgb, depth=depth)
    pc = pointcloud.lift_panorama(frame)
    if args.normals_k > 0 and len(pc) >= 3:
        pc = pointcloud.estimate_normals(pc, k=min(args.normals_k, len(pc)))
    fileio.save_pointcloud_ply(args.out, pc)
    print(f"lifted {len(pc)} points -> {args.out}")
    return 0


def _cmd_views(args) -> int:
    pc = fileio.load_pointcloud_ply(args.cloud)
    pc = _ensure_normals(pc)
    cam = Pinhole.from_fov(args.width, args.height, args.fov)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    azimuths = _angles(args.azimuths)
    elevations = _angles(args.elevations)
    poses = outward_cameras(azimuths, elevations)
    manifest = {"width": args.width, "height": args.height, "fov": args.fov,
                "base": [], "aug": []}
    for i, pose in enumerate(poses):
        view = viewsynth.render_points(pc, cam, pose, splat_px=args.splat_px)
        rgb_name, depth_name = f"base_{i:02d}_rgb.png", f"base_{i:02d}_depth.d4dd"
        fileio.write_png(out / rgb_name, view.rgb)
        fileio.write_depth_raster(out / depth_name, view.depth)
        manifest["base"].append({
            "rgb": rgb_name, "depth": depth_name,
            "camera": {"pinhole": cam.to_dict(), "pose": pose.to_dict()},
        })
        if not args.aug:
            continue
        offsets = viewsynth.default_offsets(pc, args.aug_offset_frac)
        for j, aug in enumerate(viewsynth.augment_views(
                pc, cam, pose, offsets, splat_px=args.splat_px)):
            sim, uncertain = viewsynth.uncertainty_map(aug, pc)
            conf = np.clip(sim, 0.0, 1.0) * (aug.hole_mask == 0)
            mask = uncertain.astype(np.uint8)
            target = aug.rgb
            if args.fill and mask.any() and not mask.all():
                target = viewsynth.content_fill(aug.rgb, mask)
            stem = f"aug_{i:02d}_{j:02d}"
            fileio.write_png(out / f"{stem}_rgb.png", target)
            fileio.write_png(out / f"{stem}_mask.png", mask.astype(bool))
            fileio.write_depth_raster(out / f"{stem}_conf.d4dd", conf)
            manifest["aug"].append({
                "rgb": f"{stem}_rgb.png", "mask": f"{stem}_mask.png",
                "confidence": f"{stem}_conf.d4dd",
                "camera": {"pinhole": cam.to_dict(),
                           "pose": aug.camera[1].to_dict()},
            })
    (out / "manifest.json").write_text(dump_json(manifest))
    print(f"wrote {len(manifest['base'])} base / {len(manifest['aug'])} aug views -> {out}")
    return 0


def _load_viewset(views_dir: Path) -> training.ViewSet:
    manifest = json.loads((views_dir / "manifest.json").read_text())

    def load_cam(d):
        return (Pinhole.from_dict(d["pinhole"]), RigidPose.from_dict(d["pose"]))

    base = []
    for b in manifest["base"]:
        cam, pose = load_cam(b["camera"])
        img = fileio.read_png(views_dir / b["rgb"])
        ft = fm = None
        if "features" in b:
            ft = fileio.read_feature_raster(views_dir / b["features"])
            if "feature_mask" in b:
                fm = fileio.read_mask_png(views_dir / b["feature_mask"])
        base.append(training.BaseView(image=img, cam=cam, pose=pose,
                                      feature_target=ft, feature_mask=fm))
    aug = []
    for a in manifest.get("aug", []):
        cam, pose = load_cam(a["camera"])
        aug.append(training.AugView(
            image=fileio.read_png(views_dir / a["rgb"]),
            cam=cam, pose=pose,
            mask=fileio.read_mask_png(views_dir / a["mask"]),
            confidence=fileio.read_depth_raster(views_dir / a["confidence"]),
        ))
    return training.ViewSet(base_views=base, aug_views=aug)


def _cmd_reconstruct(args) -> int:
    views = _load_viewset(Path(args.views))
    pc = fileio.load_pointcloud_ply(args.cloud)
    if args.config:
        cfg = training.TrainConfig.from_json(Path(args.config).read_text())
    else:
        cfg = training.TrainConfig()
    overrides = {"iterations": args.iterations, "seed": args.seed}
    cfg = training.TrainConfig(**{**cfg.__dict__, **{k: v for k, v in overrides.items()
                                                     if v is not None}})

    # feature targets wider than the trained width are PCA-reduced at ingest;
    # the projection is persisted beside the scene for later maps
    wide = [v for v in views.base_views + views.aug_views
            if v.feature_target is not None
            and v.feature_target.shape[2] > cfg.feature_dim]
    if wide:
        stacked = np.concatenate(
            [v.feature_target.reshape(-1, v.feature_target.shape[2])
             for v in wide])
        _, (mean, proj) = training.reduce_features(
            stacked.reshape(1, -1, stacked.shape[1]), out_dim=cfg.feature_dim)
        for v in views.base_views + views.aug_views:
            if v.feature_target is not None and \
                    v.feature_target.shape[2] > cfg.feature_dim:
                v.feature_target = training.apply_feature_projection(
                    v.feature_target, (mean, proj))
        np.savez(str(args.out) + ".feature_projection.npz",
                 mean=mean, projection=proj)

    cloud, trace = training.train_scene(pc, views, cfg)
    surfels.save_surfels_ply(args.out, cloud)
    if args.trace:
        _write_trace_csv(args.trace, [
            (int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]))
            for r in trace
        ], ["iteration", "L_base", "L_aug", "L_distill", "total"])
    print(f"trained {len(cloud)} surfels -> {args.out} "
          f"(final loss {trace[-1, 4]:.6f})")
    return 0


def _cmd_floor(args) -> int:
    pc = fileio.load_pointcloud_ply(args.cloud)
    plane = pointcloud.detect_floor(
        pc, angle_tol=args.angle_tol, iterations=args.iterations,
        inlier_eps=args.inlier_eps, seed=args.seed)
    Path(args.out).write_text(dump_json(plane.to_dict()))
    print(f"floor normal {plane.normal.round(4).tolist()} "
          f"offset {plane.offset:.4f} inliers {plane.inlier_count}")
    return 0


def _cmd_compose(args) -> int:
    scene = _ensure_normals(fileio.load_pointcloud_ply(args.scene))
    obj = _ensure_normals(fileio.load_pointcloud_ply(args.object))
    prior = cmp.PosePrior.from_dict(json.loads(Path(args.prior).read_text()))
    if args.floor:
        floor = pointcloud.FloorPlane.from_dict(json.loads(Path(args.floor).read_text()))
    else:
        floor = pointcloud.detect_floor(scene, seed=args.seed)
    cfg = cmp.PhysicsConfig(contact_radius=args.contact_radius, g=args.g,
                            lr=args.lr, iterations=args.iterations,
                            clamp_below_floor=not args.no_clamp)
    lo, hi = scene.bounds()
    diag = float(np.linalg.norm(hi - lo))
    if diag / cfg.contact_radius > 1e5:
        print(f"warning: scene bbox diagonal {diag:.3g} is more than 1e5 x "
              f"contact radius {cfg.contact_radius:.3g}; contacts may be rare",
              file=sys.stderr)
    canon = cmp.scale_to_prior(obj, prior)
    if args.init:
        init = cmp.PoseParams.from_dict(json.loads(Path(args.init).read_text()))
    else:
        init = cmp.place_initial(obj, prior, floor)
    pose, trace = cmp.optimize_pose(canon, scene, floor, init, cfg)
    Path(args.out_pose).write_text(dump_json(pose.to_dict()))
    if args.trace:
        _write_trace_csv(args.trace, [
            (r["iteration"], r["L_collision"], r["L_gravity"], r["total"])
            for r in trace
        ], ["iteration", "L_collision", "L_gravity", "total"])
    if args.out_cloud:
        if args.surfels:
            scene_surfels = surfels.load_surfels_ply(args.surfels)
        else:
            scene_surfels = surfels.surfels_from_points(scene)
        fused = cmp.fuse(scene_surfels, canon, pose, axis=floor.normal)
        surfels.save_surfels_ply(args.out_cloud, fused)
    print(f"pose {pose.to_dict()} (final loss {trace[-1]['total']:.6g})")
    return 0


def _cmd_render(args) -> int:
    cloud = surfels.load_surfels_ply(args.surfels)
    cam, pose = _load_camera_file(args.camera)
    background = tuple(float(x) for x in args.background.split(","))
    from .rasterizer import rasterize

    out = rasterize(cloud, cam, pose, background=background)
    fileio.write_png(args.out, out.color)
    print(f"rendered {args.out}")
    return 0


def _cmd_conditioning(args) -> int:
    azimuths = _angles(args.azimuths)
    elevations = _angles(args.elevations)
    if args.views != len(azimuths) * len(elevations):
        raise UsageError(
            f"--views {args.views} does not match azimuths x elevations "
            f"({len(azimuths)} x {len(elevations)})")
    pc = fileio.load_pointcloud_ply(args.cloud)
    features = fileio.read_feature_raster(args.features)
    mask = fileio.read_mask_png(args.mask)
    traj_doc = json.loads(Path(args.trajectory).read_text())
    traj = cond.Trajectory3D(points=np.array(traj_doc["points"], dtype=np.float64))
    lo, hi = pc.bounds()
    target = (lo + hi) / 2.0 if args.target is None else np.array(
        [float(x) for x in args.target.split(",")])
    radius = args.radius if args.radius else 0.25 * float(np.linalg.norm(hi - lo))
    ring = CameraRing(azimuths=azimuths, elevations=elevations,
                      radius=radius, target=target)
    cam = Pinhole.from_fov(args.width, args.height, args.fov)
    if features.shape[:2] != (cam.height, cam.width):
        raise InputFormatError("feature raster does not match view resolution")
    if mask.shape != (cam.height, cam.width):
        raise InputFormatError("mask does not match view resolution")
    sigma = args.sigma if args.sigma else 10.0 * min(args.width, args.height) / 256.0

    tracks = cond.project_trajectory(traj, ring, cam)
    out = Path(args.out)
    for i, track in enumerate(tracks):
        bundle = cond.build_bundle(track, features, mask, k_parts=args.k,
                                   sigma=sigma, frames=args.frames,
                                   seed=args.seed)
        cond.export_bundle(bundle, out / f"view_{i:02d}")
    print(f"wrote {len(tracks)} bundle directories -> {out}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="scenesmith", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("lift", help="panorama + depth -> point cloud PLY")
    s.add_argument("--pano", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--normals-k", type=int, default=16)
    s.set_defaults(fn=_cmd_lift)

    s = sub.add_parser("views", help="point cloud -> base/augmented views")
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--width", type=int, default=128)
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--fov", type=float, default=60.0)
    s.add_argument("--azimuths", default="0,60,120,180,240,300")
    s.add_argument("--elevations", default="0")
    s.add_argument("--splat-px", type=int, default=2)
    s.add_argument("--aug", action="store_true", help="emit augmented views")
    s.add_argument("--aug-offset-frac", type=float,
                   default=viewsynth.DEFAULT_AUG_FRACTION)
    s.add_argument("--fill", action=argparse.BooleanOptionalAction, default=True)
    s.set_defaults(fn=_cmd_views)

    s = sub.add_parser("reconstruct", help="views -> surfel PLY + loss CSV")
    s.add_argument("--views", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace")
    s.add_argument("--config", help="TrainConfig JSON")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_reconstruct)

    s = sub.add_parser("floor", help="point cloud -> floor plane JSON")
    s.add_argument("--cloud", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--angle-tol", type=float, default=20.0)
    s.add_argument("--iterations", type=int, default=512)
    s.add_argument("--inlier-eps", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_floor)

    s = sub.add_parser("compose", help="physics-aware object placement")
    s.add_argument("--scene", required=True)
    s.add_argument("--object", required=True)
    s.add_argument("--prior", required=True)
    s.add_argument("--out-pose", required=True)
    s.add_argument("--init", help="initial pose JSON (default: seat on floor)")
    s.add_argument("--floor")
    s.add_argument("--surfels", help="scene surfel PLY for fusion")
    s.add_argument("--out-cloud", help="fused surfel PLY output")
    s.add_argument("--trace")
    s.add_argument("--lr", type=float, default=0.001)
    s.add_argument("--iterations", type=int, default=500)
    s.add_argument("--contact-radius", type=float, default=1e-3)
    s.add_argument("--g", type=float, default=1.0)
    s.add_argument("--no-clamp", action="store_true",
                   help="disable below-floor height clamping")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_compose)

    s = sub.add_parser("render", help="surfel PLY + camera JSON -> PNG")
    s.add_argument("--surfels", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--background", default="0,0,0")
    s.set_defaults(fn=_cmd_render)

    s = sub.add_parser("conditioning",
                       help="trajectory + features + mask -> bundles")
    s.add_argument("--cloud", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--trajectory", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--azimuths", default="0,90,180,270")
    s.add_argument("--elevations", default="0,30")
    s.add_argument("--radius", type=float, default=None)
    s.add_argument("--target", default=None, help="x,y,z look-at point")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--fov", type=float, default=60.0)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--sigma", type=float, default=None)
    s.add_argument("--frames", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=_cmd_conditioning)

    s = sub.add_parser("serve", help="start the HTTP service")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--data-dir", default=None)
    s.set_defaults(fn=_cmd_serve)
    return p


def cli(argv) -> int:
    """Run the CLI on an argv list; returns the process exit code."""
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"E1: {exc}", file=sys.stderr)
        return 1
    except (InputFormatError, FileNotFoundError, json.JSONDecodeError,
            KeyError, ValueError) as exc:
        print(f"E2: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, FloatingPointError) as exc:
        print(f"E3: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
