"""HTTP service with in-memory session state for the interactive studio.

JSON over HTTP plus server-sent events for job progress. All geometry is
computed server-side; renders share the CLI rasterization path byte for
byte. Mutating jobs are exclusive per session; renders read the last
committed state. Set D4D_DATA_DIR (or pass data_dir) to persist session
metadata and artifacts under a directory.
"""

from __future__ import annotations

import io
import json
import os
import threading
import uuid
import zipfile
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.responses import StreamingResponse
from pydantic import BaseModel

from . import compose as cmp
from . import conditioning as cond
from . import fileio, pointcloud, surfels
from .cameras import CameraRing, Pinhole, RigidPose, direction_from_angles, look_at
from .errors import NoFloorError
from .rasterizer import rasterize


def _new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


class Job:
    """A cancellable background job emitting monotone progress events."""

    def __init__(self, kind: str):
        self.id = _new_id("job")
        self.kind = kind
        self.state = "running"
        self.events: list[dict] = []
        self.result: dict | None = None
        self.cancel_requested = False
        self._cond = threading.Condition()

    def emit(self, event: dict) -> None:
        with self._cond:
            self.events.append(event)
            self._cond.notify_all()

    def finish(self, state: str, result: dict | None = None) -> None:
        with self._cond:
            self.state = state
            self.result = result
            self.events.append({"state": state, **(result or {})})
            self._cond.notify_all()

    def stream(self):
        i = 0
        while True:
            with self._cond:
                while i >= len(self.events):
                    if self.state != "running":
                        return
                    self._cond.wait(timeout=5.0)
            while i < len(self.events):
                yield f"data: {json.dumps(self.events[i], sort_keys=True)}\n\n"
                i += 1
            with self._cond:
                if self.state != "running" and i >= len(self.events):
                    return


class ObjectState:
    def __init__(self, canon: pointcloud.PointCloud, prior: cmp.PosePrior,
                 pose: cmp.PoseParams):
        self.id = _new_id("obj")
        self.canon = canon
        self.prior = prior
        self.pose = pose
        self.status = "placed"
        self.surfels = surfels.surfels_from_points(
            canon, provenance=surfels.PROVENANCE_OBJECT)


class Session:
    def __init__(self, cloud, scene_surfels, floor, ring: CameraRing,
                 view_cam: Pinhole):
        self.id = _new_id("sess")
        self.cloud = cloud
        self.surfels = scene_surfels
        self.floor = floor
        self.ring = ring
        self.view_cam = view_cam
        self.objects: dict[str, ObjectState] = {}
        self.trajectories: dict[str, cond.Trajectory3D] = {}
        self.active_job: Job | None = None
        self.lock = threading.Lock()

    def committed_surfels(self):
        out = self.surfels
        axis = self.floor.normal if self.floor else (0.0, 1.0, 0.0)
        for obj in self.objects.values():
            rot = cmp.axis_rotation(np.asarray(axis, dtype=np.float64),
                                    obj.pose.yaw)
            out = out.concat(obj.surfels.transformed(rot, obj.pose.translation))
        return out


class CreateSession(BaseModel):
    cloud: str
    surfels: str | None = None
    width: int = 256
    height: int = 256
    fov: float = 60.0
    azimuths: list[float] | None = None
    elevations: list[float] | None = None
    radius: float | None = None
    target: list[float] | None = None
    floor_seed: int = 0


class AddObject(BaseModel):
    cloud: str
    prior: dict


class OptimizeRequest(BaseModel):
    iterations: int = 500
    lr: float = 0.001
    contact_radius: float = 1e-3
    g: float = 1.0
    clamp_below_floor: bool = True
    seed: int = 0


class TrajectoryRequest(BaseModel):
    points: list[list[float]]


class FloorPick(BaseModel):
    u: float
    v: float
    camera: dict | None = None
    azimuth: float | None = None
    elevation: float | None = None
    radius: float | None = None


class BundleRequest(BaseModel):
    session_id: str
    trajectory_id: str
    features: str
    mask: str
    k: int = 4
    sigma: float | None = None
    frames: int | None = None
    seed: int = 0


def create_app(data_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="scenesmith", version="0.1.0")
    root = data_dir or os.environ.get("D4D_DATA_DIR")
    root = Path(root) if root else None
    if root:
        root.mkdir(parents=True, exist_ok=True)

    sessions: dict[str, Session] = {}
    objects: dict[str, tuple[Session, ObjectState]] = {}
    jobs: dict[str, Job] = {}

    def _resolve(path: str) -> Path:
        p = Path(path)
        if not p.is_absolute() and root:
            p = root / p
        if not p.exists():
            raise HTTPException(404, f"file not found: {path}")
        return p

    def _session(sid: str) -> Session:
        if sid not in sessions:
            raise HTTPException(404, f"unknown session {sid}")
        return sessions[sid]

    def _persist(session: Session) -> None:
        if not root:
            return
        d = root / "sessions" / session.id
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "id": session.id,
            "floor": session.floor.to_dict() if session.floor else None,
            "objects": {
                oid: {"prior": o.prior.to_dict(), "pose": o.pose.to_dict(),
                      "status": o.status}
                for oid, o in session.objects.items()
            },
            "trajectories": {
                tid: [list(map(float, p)) for p in t.points]
                for tid, t in session.trajectories.items()
            },
        }
        (d / "session.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    def _orbit_pose(session: Session, azimuth: float, elevation: float,
                    radius: float | None) -> RigidPose:
        r = radius if radius else session.ring.radius
        center = session.ring.target + r * direction_from_angles(azimuth, elevation)
        return look_at(center, session.ring.target)

    @app.post("/sessions")
    def create_session(req: CreateSession):
        pc = fileio.load_pointcloud_ply(_resolve(req.cloud))
        scene_surfels = (surfels.load_surfels_ply(_resolve(req.surfels))
                         if req.surfels else surfels.surfels_from_points(pc))
        try:
            floor = pointcloud.detect_floor(pc, seed=req.floor_seed)
        except (NoFloorError, ValueError):
            floor = None
        lo, hi = pc.bounds()
        target = (np.array(req.target, dtype=np.float64) if req.target
                  else (lo + hi) / 2.0)
        radius = req.radius if req.radius else 0.25 * float(np.linalg.norm(hi - lo))
        ring = CameraRing(
            azimuths=tuple(req.azimuths) if req.azimuths else (0.0, 90.0, 180.0, 270.0),
            elevations=tuple(req.elevations) if req.elevations else (0.0, 30.0),
            radius=radius, target=target)
        session = Session(pc, scene_surfels, floor, ring,
                          Pinhole.from_fov(req.width, req.height, req.fov))
        sessions[session.id] = session
        _persist(session)
        return {"id": session.id, "points": len(pc),
                "surfels": len(scene_surfels),
                "floor": floor.to_dict() if floor else None}

    @app.get("/sessions/{sid}")
    def session_info(sid: str):
        s = _session(sid)
        return {
            "id": s.id, "points": len(s.cloud), "surfels": len(s.surfels),
            "floor": s.floor.to_dict() if s.floor else None,
            "objects": {oid: {"pose": o.pose.to_dict(), "status": o.status}
                        for oid, o in s.objects.items()},
            "trajectories": sorted(s.trajectories),
            "busy": bool(s.active_job and s.active_job.state == "running"),
        }

    @app.get("/sessions/{sid}/render")
    def render_session(sid: str, camera: str | None = None,
                       azimuth: float = 0.0, elevation: float = 0.0,
                       radius: float | None = None,
                       background: str = "0,0,0"):
        s = _session(sid)
        if camera:
            try:
                d = json.loads(camera)
                cam = Pinhole.from_dict(d["pinhole"])
                pose = RigidPose.from_dict(d["pose"])
            except (KeyError, ValueError, TypeError) as exc:
                raise HTTPException(422, f"bad camera JSON: {exc}")
        else:
            cam = s.view_cam
            pose = _orbit_pose(s, azimuth, elevation, radius)
        bg = tuple(float(x) for x in background.split(","))
        out = rasterize(s.committed_surfels(), cam, pose, background=bg)
        return Response(content=fileio.png_bytes(out.color), media_type="image/png")

    @app.post("/sessions/{sid}/objects")
    def add_object(sid: str, req: AddObject):
        s = _session(sid)
        if s.floor is None:
            raise HTTPException(422, "session has no detected floor")
        pc = fileio.load_pointcloud_ply(_resolve(req.cloud))
        if pc.normals is None and len(pc) >= 3:
            pc = pointcloud.estimate_normals(pc, k=min(16, len(pc)))
        try:
            prior = cmp.PosePrior.from_dict(req.prior)
            canon = cmp.scale_to_prior(pc, prior)
            pose = cmp.place_initial(pc, prior, s.floor)
        except (KeyError, ValueError) as exc:
            raise HTTPException(422, str(exc))
        obj = ObjectState(canon, prior, pose)
        s.objects[obj.id] = obj
        objects[obj.id] = (s, obj)
        _persist(s)
        return {"object_id": obj.id, "pose": pose.to_dict()}

    @app.post("/objects/{oid}/optimize")
    def optimize_object(oid: str, req: OptimizeRequest):
        if oid not in objects:
            raise HTTPException(404, f"unknown object {oid}")
        s, obj = objects[oid]
        if s.floor is None:
            raise HTTPException(422, "session has no detected floor")
        with s.lock:
            if s.active_job and s.active_job.state == "running":
                raise HTTPException(409, f"session busy: job {s.active_job.id}")
            job = Job(kind="pose-optimize")
            s.active_job = job
        jobs[job.id] = job
        scene = s.cloud
        if scene.normals is None and len(scene) >= 3:
            scene = pointcloud.estimate_normals(scene, k=min(16, len(scene)))
            s.cloud = scene
        cfg = cmp.PhysicsConfig(
            contact_radius=req.contact_radius, g=req.g, lr=req.lr,
            iterations=req.iterations, clamp_below_floor=req.clamp_below_floor)

        def worker():
            best = None
            try:
                steps = cmp.pose_optimization_steps(
                    obj.canon, scene, s.floor, obj.pose, cfg)
                for row in steps:
                    if best is None or row["total"] < best[0]:
                        best = (row["total"], row["pose"])
                    job.emit({
                        "iteration": row["iteration"],
                        "L_collision": row["L_collision"],
                        "L_gravity": row["L_gravity"],
                        "total": row["total"],
                        "pose": row["pose"].to_dict(),
                    })
                    if job.cancel_requested:
                        break
            except Exception as exc:  # job surface: report, don't crash the app
                obj.status = "failed"
                job.finish("failed", {"error": str(exc)})
                return
            obj.pose = best[1]
            obj.status = "optimized"
            _persist(s)
            state = "cancelled" if job.cancel_requested else "done"
            job.finish(state, {"pose": best[1].to_dict(), "total": best[0]})

        threading.Thread(target=worker, daemon=True).start()
        return {"job_id": job.id}

    @app.get("/jobs/{jid}")
    def job_info(jid: str):
        if jid not in jobs:
            raise HTTPException(404, f"unknown job {jid}")
        job = jobs[jid]
        return {"id": job.id, "kind": job.kind, "state": job.state,
                "events": len(job.events), "result": job.result}

    @app.get("/jobs/{jid}/events")
    def job_events(jid: str):
        if jid not in jobs:
            raise HTTPException(404, f"unknown job {jid}")
        return StreamingResponse(jobs[jid].stream(),
                                 media_type="text/event-stream")

    @app.post("/jobs/{jid}/cancel")
    def job_cancel(jid: str):
        if jid not in jobs:
            raise HTTPException(404, f"unknown job {jid}")
        jobs[jid].cancel_requested = True
        return {"id": jid, "state": jobs[jid].state}

    @app.post("/sessions/{sid}/trajectory")
    def add_trajectory(sid: str, req: TrajectoryRequest):
        s = _session(sid)
        try:
            traj = cond.Trajectory3D(points=np.array(req.points, dtype=np.float64))
            tracks = cond.project_trajectory(traj, s.ring, s.view_cam)
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        tid = _new_id("traj")
        s.trajectories[tid] = traj
        _persist(s)
        return {"trajectory_id": tid,
                "tracks": [t.to_dict() for t in tracks]}

    @app.post("/sessions/{sid}/floor/pick")
    def floor_pick(sid: str, req: FloorPick):
        s = _session(sid)
        if s.floor is None:
            raise HTTPException(422, "session has no detected floor")
        if req.camera:
            try:
                cam = Pinhole.from_dict(req.camera["pinhole"])
                pose = RigidPose.from_dict(req.camera["pose"])
            except (KeyError, ValueError, TypeError) as exc:
                raise HTTPException(422, f"bad camera: {exc}")
        else:
            cam = s.view_cam
            pose = _orbit_pose(s, req.azimuth or 0.0, req.elevation or 0.0,
                               req.radius)
        d_cam = np.array([(req.u - cam.cx) / cam.fx,
                          (req.v - cam.cy) / cam.fy, 1.0])
        d_world = pose.rotation.T @ d_cam
        origin = pose.center
        denom = float(s.floor.normal @ d_world)
        if abs(denom) < 1e-12:
            raise HTTPException(422, "view ray is parallel to the floor")
        t = (s.floor.offset - float(s.floor.normal @ origin)) / denom
        if t <= 0:
            raise HTTPException(422, "floor is behind the camera for this pixel")
        point = origin + t * d_world
        return {"point": [float(x) for x in point]}

    @app.post("/bundles")
    def make_bundles(req: BundleRequest):
        s = _session(req.session_id)
        if req.trajectory_id not in s.trajectories:
            raise HTTPException(404, f"unknown trajectory {req.trajectory_id}")
        traj = s.trajectories[req.trajectory_id]
        features = fileio.read_feature_raster(_resolve(req.features))
        mask = fileio.read_mask_png(_resolve(req.mask))
        cam = s.view_cam
        if features.shape[:2] != (cam.height, cam.width) or \
                mask.shape != (cam.height, cam.width):
            raise HTTPException(422, "features/mask do not match view resolution")
        sigma = req.sigma or 10.0 * min(cam.width, cam.height) / 256.0
        try:
            tracks = cond.project_trajectory(traj, s.ring, cam)
            buf = io.BytesIO()
            with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
                import tempfile

                with tempfile.TemporaryDirectory() as tmp:
                    for i, track in enumerate(tracks):
                        bundle = cond.build_bundle(
                            track, features, mask, k_parts=req.k, sigma=sigma,
                            frames=req.frames, seed=req.seed)
                        bdir = Path(tmp) / f"view_{i:02d}"
                        names = cond.export_bundle(bundle, bdir)
                        for name in names + ["manifest.json"]:
                            zf.write(bdir / name, f"view_{i:02d}/{name}")
        except ValueError as exc:
            raise HTTPException(422, str(exc))
        data = buf.getvalue()
        if root:
            out = root / "bundles" / f"{req.trajectory_id}.zip"
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_bytes(data)
        return Response(content=data, media_type="application/zip")

    return app
