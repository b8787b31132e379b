"""Physics-aware object placement: floor-seated initialization, collision and
gravity penalties over contact pairs, pose optimization, and surfel fusion.

The pose has four degrees of freedom: a world translation plus a yaw about
the floor normal. Objects enter this module in canonical form (uniformly
scaled to the prior's dimensions and centered on their centroid); a pose
maps canonical points p to R_yaw(p) + translation, so the posed centroid is
the translation itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError
from .pointcloud import FloorPlane, PointCloud
from .surfels import (PROVENANCE_OBJECT, SurfelCloud, surfels_from_points)


@dataclass(frozen=True, eq=False)
class PosePrior:
    """User bounding-box prior: center, extents, yaw (degrees)."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        d = np.asarray(self.dims, dtype=np.float64).reshape(3)
        if np.any(d <= 0):
            raise ValueError("prior dims must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "dims", d)
        object.__setattr__(self, "yaw", float(self.yaw))

    def to_dict(self) -> dict:
        return {"center": list(map(float, self.center)),
                "dims": list(map(float, self.dims)), "yaw": self.yaw}

    @staticmethod
    def from_dict(d: dict) -> "PosePrior":
        return PosePrior(center=np.array(d["center"], dtype=np.float64),
                         dims=np.array(d["dims"], dtype=np.float64),
                         yaw=float(d.get("yaw", 0.0)))


@dataclass(frozen=True, eq=False)
class PoseParams:
    """Rigid placement: translation plus yaw (degrees) about the floor normal."""

    translation: np.ndarray
    yaw: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(t)) and math.isfinite(self.yaw)):
            raise ValueError("pose parameters must be finite")
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "yaw", float(self.yaw))

    def to_dict(self) -> dict:
        return {"translation": list(map(float, self.translation)), "yaw": self.yaw}

    @staticmethod
    def from_dict(d: dict) -> "PoseParams":
        return PoseParams(translation=np.array(d["translation"], dtype=np.float64),
                          yaw=float(d.get("yaw", 0.0)))


@dataclass(frozen=True)
class PhysicsConfig:
    contact_radius: float = 1e-3
    g: float = 1.0
    lr: float = 0.001
    iterations: int = 500
    clamp_below_floor: bool = True

    def __post_init__(self):
        if self.contact_radius <= 0:
            raise ValueError("contact_radius must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def axis_rotation(axis: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    th = math.radians(angle_deg)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return math.cos(th) * np.eye(3) + math.sin(th) * k + (1 - math.cos(th)) * np.outer(a, a)


def scale_to_prior(obj: PointCloud, prior: PosePrior) -> PointCloud:
    """Canonical object: centroid at the origin, uniformly scaled into dims."""
    if len(obj) == 0:
        raise ValueError("object cloud is empty")
    centroid = obj.positions.mean(axis=0)
    centered = obj.positions - centroid
    extent = centered.max(axis=0) - centered.min(axis=0)
    if np.all(extent <= 0):
        raise ValueError("object has zero extent")
    ratios = [prior.dims[i] / extent[i] for i in range(3) if extent[i] > 0]
    s = min(ratios)
    return obj.replace(positions=centered * s)


def apply_pose(obj: PointCloud, pose: PoseParams, axis=(0.0, 1.0, 0.0)) -> PointCloud:
    """Pose a canonical object: rotate by yaw about `axis`, then translate."""
    rot = axis_rotation(np.asarray(axis, dtype=np.float64), pose.yaw)
    out = {"positions": obj.positions @ rot.T + pose.translation}
    if obj.normals is not None:
        out["normals"] = obj.normals @ rot.T
    return obj.replace(**out)


def place_initial(obj: PointCloud, prior: PosePrior, floor: FloorPlane) -> PoseParams:
    """Initial pose: prior yaw, centroid over prior.center in the floor plane,
    lowest point touching the floor."""
    canon = scale_to_prior(obj, prior)
    rot = axis_rotation(floor.normal, prior.yaw)
    rotated = canon.positions @ rot.T
    h_min = float((rotated @ floor.normal).min())
    n = floor.normal
    tx, tz = float(prior.center[0]), float(prior.center[2])
    if abs(n[1]) < 1e-9:
        raise ValueError("floor normal has no vertical component")
    ty = (floor.offset - h_min - n[0] * tx - n[2] * tz) / n[1]
    return PoseParams(translation=np.array([tx, ty, tz]), yaw=prior.yaw)


def contact_pairs(posed_obj: PointCloud, scene: PointCloud,
                  cfg: PhysicsConfig) -> list[tuple[int, int]]:
    """All (object index, scene index) pairs strictly within contact_radius."""
    hits = scene.kdtree.query_ball_point(posed_obj.positions, cfg.contact_radius)
    pairs = []
    for i, js in enumerate(hits):
        if not js:
            continue
        p = posed_obj.positions[i]
        for j in sorted(js):
            if np.linalg.norm(scene.positions[j] - p) < cfg.contact_radius:
                pairs.append((i, j))
    return pairs


def collision_loss(posed_obj: PointCloud, scene: PointCloud, cfg: PhysicsConfig,
                   contacts=None, axis=(0.0, 1.0, 0.0)):
    """Normal-disagreement penalty over contact pairs.

    Returns (value, translation gradient, yaw gradient, contacts). With the
    contact set held fixed the value depends on pose only through the
    rotated object normals, so the translation gradient is exactly zero.
    """
    if posed_obj.normals is None or scene.normals is None:
        raise ValueError("collision loss needs normals on both clouds")
    if contacts is None:
        contacts = contact_pairs(posed_obj, scene, cfg)
    if not contacts:
        return 0.0, np.zeros(3), 0.0, contacts
    oi = np.array([c[0] for c in contacts])
    sj = np.array([c[1] for c in contacts])
    np_obj = posed_obj.normals[oi]
    nq = scene.normals[sj]
    value = float(np.sum(1.0 - np.einsum("ij,ij->i", np_obj, nq)))
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    dn_dyaw = np.cross(a, np_obj) * (math.pi / 180.0)  # degrees parameterization
    grad_yaw = float(-np.sum(np.einsum("ij,ij->i", dn_dyaw, nq)))
    return value, np.zeros(3), grad_yaw, contacts


def gravity_loss(posed_obj: PointCloud, floor: FloorPlane, cfg: PhysicsConfig):
    """Potential energy sum(0.5 g m h) above the floor.

    Heights are clamped at zero when cfg.clamp_below_floor so sunk points
    stop contributing descent. Returns (value, translation gradient,
    yaw gradient); yaw about the floor normal never changes heights.
    """
    h = floor.height_of(posed_obj.positions)
    if cfg.clamp_below_floor:
        active = h > 0
        hc = np.maximum(h, 0.0)
    else:
        active = np.ones(len(h), dtype=bool)
        hc = h
    value = float(0.5 * cfg.g * np.sum(posed_obj.masses * hc))
    grad_t = 0.5 * cfg.g * float(np.sum(posed_obj.masses[active])) * floor.normal
    return value, grad_t, 0.0


def physics_loss(canon_obj: PointCloud, scene: PointCloud, floor: FloorPlane,
                 pose: PoseParams, cfg: PhysicsConfig, contacts=None):
    """Total physics penalty at a pose plus its 4-dof gradient.

    Returns (total, grad[(tx, ty, tz, yaw)], (collision, gravity), contacts).
    Pass `contacts` to evaluate with a frozen contact set.
    """
    posed = apply_pose(canon_obj, pose, axis=floor.normal)
    c_val, c_gt, c_gy, contacts = collision_loss(posed, scene, cfg, contacts,
                                                 axis=floor.normal)
    g_val, g_gt, g_gy = gravity_loss(posed, floor, cfg)
    grad = np.zeros(4)
    grad[:3] = c_gt + g_gt
    grad[3] = c_gy + g_gy
    return c_val + g_val, grad, (c_val, g_val), contacts


def pose_optimization_steps(canon_obj: PointCloud, scene: PointCloud,
                            floor: FloorPlane, init: PoseParams,
                            cfg: PhysicsConfig):
    """Adam descent on (translation, yaw); contact set recomputed per step.

    Yields one dict per iteration: iteration, L_collision, L_gravity, total,
    and the iterate's pose. Consumers keep the lowest-loss iterate.
    """
    theta = np.concatenate([init.translation, [init.yaw]]).astype(np.float64)
    m = np.zeros(4)
    v = np.zeros(4)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for it in range(cfg.iterations):
        pose = PoseParams(translation=theta[:3], yaw=float(theta[3]))
        total, grad, (c_val, g_val), _ = physics_loss(
            canon_obj, scene, floor, pose, cfg)
        if not math.isfinite(total):
            raise DivergenceError(f"non-finite physics loss at iteration {it}")
        yield {
            "iteration": it, "L_collision": c_val, "L_gravity": g_val,
            "total": total, "pose": pose,
        }
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        mh = m / (1 - b1 ** (it + 1))
        vh = v / (1 - b2 ** (it + 1))
        theta = theta - cfg.lr * mh / (np.sqrt(vh) + eps)


def optimize_pose(canon_obj: PointCloud, scene: PointCloud, floor: FloorPlane,
                  init: PoseParams, cfg: PhysicsConfig):
    """Run the pose optimization to completion.

    Returns (pose of the lowest-loss iterate, full trace).
    """
    best = None
    trace = []
    for row in pose_optimization_steps(canon_obj, scene, floor, init, cfg):
        trace.append(row)
        if best is None or row["total"] < best[0]:
            best = (row["total"], row["pose"])
    return best[1], trace


def fuse(scene: SurfelCloud, obj, pose: PoseParams,
         axis=(0.0, 1.0, 0.0)) -> SurfelCloud:
    """Append the posed object (points or surfels) to the scene surfels.

    Point-cloud objects are converted with the standard surfel init rule.
    The object must be in canonical (scaled, centered) form; provenance of
    the appended surfels is `object`, scene surfels are untouched.
    """
    if isinstance(obj, PointCloud):
        obj_surfels = surfels_from_points(obj, feature_dim=scene.feature_dim,
                                          provenance=PROVENANCE_OBJECT)
    else:
        obj_surfels = SurfelCloud(
            obj.positions, obj.rotations, obj.scales, obj.opacities,
            obj.colors, obj.features,
            np.full(len(obj), PROVENANCE_OBJECT, dtype=np.uint8),
        )
        if obj_surfels.feature_dim != scene.feature_dim:
            feats = np.zeros((len(obj_surfels), scene.feature_dim))
            d = min(scene.feature_dim, obj_surfels.feature_dim)
            feats[:, :d] = obj_surfels.features[:, :d]
            obj_surfels.features = feats
    rot = axis_rotation(np.asarray(axis, dtype=np.float64), pose.yaw)
    moved = obj_surfels.transformed(rot, pose.translation)
    return scene.concat(moved)
