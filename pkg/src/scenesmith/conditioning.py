"""Conditioning-signal construction for motion-conditioned video models.

A user 3D trajectory is projected into the camera ring, then each view gets
per-frame rasters: a pooled entity feature painted into the (translated)
instance mask, a unit-peak Gaussian heatmap at the trajectory point, and the
same pair for every k-means part of the instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .cameras import CameraRing, Pinhole, RigidPose, project_points, ring_cameras


@dataclass(frozen=True, eq=False)
class Trajectory3D:
    points: np.ndarray  # (N, 3), N >= 2

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(p) < 2:
            raise ValueError("trajectory needs at least 2 points")
        if not np.all(np.isfinite(p)):
            raise ValueError("trajectory coordinates must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(eq=False)
class ViewTrack:
    """A trajectory projected into one camera: N (u, v) points + visibility."""

    cam: Pinhole
    pose: RigidPose
    points2d: np.ndarray  # (N, 2)
    visible: np.ndarray   # (N,) bool

    def to_dict(self) -> dict:
        return {
            "camera": {"pinhole": self.cam.to_dict(), "pose": self.pose.to_dict()},
            "points2d": [[float(u), float(v)] for u, v in self.points2d],
            "visible": [bool(b) for b in self.visible],
        }


def project_trajectory(traj: Trajectory3D, ring: CameraRing,
                       cam: Pinhole) -> list[ViewTrack]:
    """One ViewTrack per ring camera; behind-camera or out-of-frame points
    keep their coordinates but are flagged invisible."""
    tracks = []
    for pose in ring_cameras(ring):
        u, v, z, in_front = project_points(traj.points, cam, pose)
        vis = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        tracks.append(ViewTrack(cam=cam, pose=pose,
                                points2d=np.stack([u, v], axis=1),
                                visible=vis))
    return tracks


def gaussian_heatmap(center, sigma: float, width: int, height: int) -> np.ndarray:
    """Isotropic Gaussian bump with peak exactly 1 at the pixel nearest center."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    cu, cv = float(center[0]), float(center[1])
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    d2 = (xs[None, :] - cu) ** 2 + (ys[:, None] - cv) ** 2
    h = np.exp(-d2 / (2.0 * sigma * sigma))
    return h / h.max()


def composite_heatmaps(maps: list[np.ndarray]) -> np.ndarray:
    """Multiple guidance points combine by per-pixel maximum (peak stays 1)."""
    if not maps:
        raise ValueError("no heatmaps to composite")
    return np.maximum.reduce(maps)


def pool_entity(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean feature vector over the masked pixels."""
    mask = np.asarray(mask).astype(bool)
    if features.shape[:2] != mask.shape:
        raise ValueError("feature map and mask shapes differ")
    if not mask.any():
        raise ValueError("mask is empty")
    return np.asarray(features, dtype=np.float64)[mask].mean(axis=0)


def kmeans_parts(features: np.ndarray, mask: np.ndarray, k: int,
                 seed: int = 0) -> list[np.ndarray]:
    """Partition the instance mask into k part masks by feature k-means.

    Lloyd's algorithm with k-means++ seeding (fixed seed), at most 100
    iterations or centroid shift below 1e-6; clusters are ordered by
    centroid norm so the output is reproducible.
    """
    mask = np.asarray(mask).astype(bool)
    ys, xs = np.nonzero(mask)
    m = len(ys)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > m:
        raise ValueError(f"k = {k} exceeds masked pixel count {m}")
    x = np.asarray(features, dtype=np.float64)[ys, xs]

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, x.shape[1]))
    first = int(rng.integers(m))
    centroids[0] = x[first]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = x[int(rng.integers(m))]
        else:
            centroids[c] = x[int(rng.choice(m, p=d2 / total))]
        d2 = np.minimum(d2, np.sum((x - centroids[c]) ** 2, axis=1))

    assign = np.zeros(m, dtype=np.int64)
    for _ in range(100):
        dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            sel = assign == c
            if sel.any():
                new_centroids[c] = x[sel].mean(axis=0)
            else:
                worst = int(np.argmax(dists[np.arange(m), assign]))
                new_centroids[c] = x[worst]
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < 1e-6:
            break
    dists = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(dists, axis=1)

    order = np.argsort(np.linalg.norm(centroids, axis=1), kind="stable")
    masks = []
    for c in order:
        part = np.zeros_like(mask)
        sel = assign == c
        part[ys[sel], xs[sel]] = True
        masks.append(part.astype(np.uint8))
    return masks


def resample_polyline(points: np.ndarray, count: int) -> np.ndarray:
    """Resample a polyline to `count` points, uniform in cumulative arc length."""
    pts = np.asarray(points, dtype=np.float64)
    if count == len(pts):
        return pts.copy()
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        return np.tile(pts[0], (count, 1))
    targets = np.linspace(0.0, cum[-1], count)
    return np.stack(
        [np.interp(targets, cum, pts[:, i]) for i in range(pts.shape[1])], axis=1
    )


def _shift_mask(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a binary mask by integer pixels, clipping at image borders."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    if ys0 >= ys1 or xs0 >= xs1:
        return out
    out[ys0:ys1, xs0:xs1] = mask[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
    return out


def mask_centroid(mask: np.ndarray) -> tuple[float, float]:
    ys, xs = np.nonzero(np.asarray(mask).astype(bool))
    if len(ys) == 0:
        raise ValueError("mask is empty")
    return float(xs.mean()), float(ys.mean())


@dataclass(eq=False)
class BundleFrame:
    entity: np.ndarray          # H x W x F, pooled global feature in the mask
    heatmap: np.ndarray         # H x W, unit peak at the trajectory point
    part_entities: list = field(default_factory=list)
    part_heatmaps: list = field(default_factory=list)


@dataclass(eq=False)
class ConditioningBundle:
    cam: Pinhole
    pose: RigidPose
    frames: list
    trajectory2d: np.ndarray    # (L, 2) resampled track
    sigma: float
    k_parts: int


def build_bundle(track: ViewTrack, features: np.ndarray, instance_mask,
                 k_parts: int = 4, sigma: float = 10.0,
                 frames: int | None = None, seed: int = 0) -> ConditioningBundle:
    """Per-frame conditioning rasters for one view.

    Frame one starts at the first track point; each frame translates the
    instance mask so its centroid follows the track, paints the pooled
    entity feature inside it, and centers the heatmap on the track point.
    Parts move by the same displacement (rigid-offset rule).
    """
    mask = np.asarray(instance_mask).astype(bool)
    if not mask.any():
        raise ValueError("instance mask is empty")
    n = len(track.points2d)
    length = n if frames is None else int(frames)
    if length < 1:
        raise ValueError("frame count must be >= 1")
    if length > n:
        raise ValueError("frame count exceeds trajectory point count")
    h, w = mask.shape
    feats = np.asarray(features, dtype=np.float64)
    entity = pool_entity(feats, mask).astype(np.float32)
    fdim = entity.shape[0]
    parts = kmeans_parts(feats, mask, k_parts, seed=seed)
    part_entities = [pool_entity(feats, p).astype(np.float32) for p in parts]
    part_centroids = [mask_centroid(p) for p in parts]
    cx, cy = mask_centroid(mask)

    path2d = resample_polyline(track.points2d, length)
    out_frames = []
    for i in range(length):
        pu, pv = float(path2d[i, 0]), float(path2d[i, 1])
        disp_u, disp_v = pu - cx, pv - cy
        dyx = int(round(disp_v)), int(round(disp_u))
        gmask = _shift_mask(mask, *dyx)
        emap = np.zeros((h, w, fdim), dtype=np.float32)
        emap[gmask.astype(bool)] = entity
        hmap = gaussian_heatmap((pu, pv), sigma, w, h).astype(np.float32)
        frame = BundleFrame(entity=emap, heatmap=hmap)
        for p, pe, (pcx, pcy) in zip(parts, part_entities, part_centroids):
            pmask = _shift_mask(p.astype(bool), *dyx)
            pmap = np.zeros((h, w, fdim), dtype=np.float32)
            pmap[pmask] = pe
            phm = gaussian_heatmap((pcx + disp_u, pcy + disp_v), sigma, w, h)
            frame.part_entities.append(pmap)
            frame.part_heatmaps.append(phm.astype(np.float32))
        out_frames.append(frame)
    return ConditioningBundle(cam=track.cam, pose=track.pose, frames=out_frames,
                              trajectory2d=path2d, sigma=float(sigma),
                              k_parts=int(k_parts))


def export_bundle(bundle: ConditioningBundle, path) -> list[str]:
    """Write the bundle as D4DF rasters plus a JSON manifest.

    Produces frames * (2 + 2 * parts) raster files; returns their names.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, fr in enumerate(bundle.frames):
        pairs = [(f"frame_{i:04d}_entity.d4df", fr.entity),
                 (f"frame_{i:04d}_heatmap.d4df", fr.heatmap)]
        for p, (pe, ph) in enumerate(zip(fr.part_entities, fr.part_heatmaps)):
            pairs.append((f"frame_{i:04d}_part{p}_entity.d4df", pe))
            pairs.append((f"frame_{i:04d}_part{p}_heatmap.d4df", ph))
        for name, arr in pairs:
            fileio.write_feature_raster(root / name, arr)
            names.append(name)
    manifest = {
        "frames": len(bundle.frames),
        "camera": {"pinhole": bundle.cam.to_dict(), "pose": bundle.pose.to_dict()},
        "trajectory": [[float(u), float(v)] for u, v in bundle.trajectory2d],
        "parts": bundle.k_parts,
        "sigma": bundle.sigma,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                   sort_keys=True))
    return names


def import_bundle(path) -> ConditioningBundle:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    cam = Pinhole.from_dict(manifest["camera"]["pinhole"])
    pose = RigidPose.from_dict(manifest["camera"]["pose"])
    frames = []
    for i in range(manifest["frames"]):
        fr = BundleFrame(
            entity=fileio.read_feature_raster(root / f"frame_{i:04d}_entity.d4df"),
            heatmap=fileio.read_feature_raster(
                root / f"frame_{i:04d}_heatmap.d4df")[:, :, 0],
        )
        for p in range(manifest["parts"]):
            fr.part_entities.append(fileio.read_feature_raster(
                root / f"frame_{i:04d}_part{p}_entity.d4df"))
            fr.part_heatmaps.append(fileio.read_feature_raster(
                root / f"frame_{i:04d}_part{p}_heatmap.d4df")[:, :, 0])
        frames.append(fr)
    return ConditioningBundle(
        cam=cam, pose=pose, frames=frames,
        trajectory2d=np.array(manifest["trajectory"], dtype=np.float64),
        sigma=float(manifest["sigma"]), k_parts=int(manifest["parts"]),
    )
