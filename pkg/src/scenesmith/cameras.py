"""Camera models and pixel/direction/image mappings.

Conventions (frozen; every downstream module relies on them):

  World frame: right-handed, y up.
  Equirectangular image of size W x H, continuous pixel coords (u, v),
  no half-pixel offset:
      theta = 2*pi*u/W - pi        longitude, 0 at +z, increasing toward +x
      phi   = pi/2 - pi*v/H        latitude, +pi/2 at v=0 (zenith)
      d     = (cos(phi)*sin(theta), sin(phi), cos(phi)*cos(theta))
  Camera frame: x right, y down, z forward (image v grows downward).
  RigidPose maps world -> camera:  x_cam = rotation @ x_world + translation.
  Angles cross API boundaries in degrees, radians internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError

_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class Pinhole:
    """Pinhole intrinsics, all quantities in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "Pinhole":
        return Pinhole(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )

    @staticmethod
    def from_fov(width: int, height: int, fov_deg: float = 60.0) -> "Pinhole":
        """Square-pixel intrinsics from a horizontal field of view."""
        f = width / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
        return Pinhole(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                       width=width, height=height)


@dataclass(frozen=True, eq=False)
class RigidPose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not 1 within 1e-9")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Transform applying `other` first, then `self`."""
        return RigidPose(
            rotation=self.rotation @ other.rotation,
            translation=self.rotation @ other.translation + self.translation,
        )

    def translated(self, world_offset: np.ndarray) -> "RigidPose":
        """Same orientation with the camera center shifted in world frame."""
        center = self.center + np.asarray(world_offset, dtype=np.float64)
        return RigidPose(rotation=self.rotation,
                         translation=-self.rotation @ center)

    def to_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.reshape(-1)],
            "translation": [float(x) for x in self.translation],
        }

    @staticmethod
    def from_dict(d: dict) -> "RigidPose":
        return RigidPose(
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
        )

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(rotation=np.eye(3), translation=np.zeros(3))


@dataclass(frozen=True, eq=False)
class CameraRing:
    """Azimuth x elevation grid of look-at cameras around a target point.

    Poses enumerate azimuth-major: index = i_azimuth * len(elevations) + i_elevation.
    """

    azimuths: tuple = (0.0, 90.0, 180.0, 270.0)
    elevations: tuple = (0.0, 30.0)
    radius: float = 1.0
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "azimuths", tuple(float(a) for a in self.azimuths))
        object.__setattr__(self, "elevations", tuple(float(e) for e in self.elevations))
        tgt = np.asarray(self.target, dtype=np.float64).reshape(3)
        tgt.flags.writeable = False
        object.__setattr__(self, "target", tgt)


def direction_from_angles(azimuth_deg, elevation_deg) -> np.ndarray:
    """Unit direction for azimuth about +y (0 at +z) and elevation above horizon."""
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    return np.stack(
        [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)], axis=-1
    )


def pixel_to_direction(u, v, width: int, height: int) -> np.ndarray:
    """Map equirect pixel coords to unit view directions. Accepts arrays.

    Returns an array of shape (..., 3).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= width) or np.any(v < 0) or np.any(v >= height):
        raise ValueError("pixel outside [0, width) x [0, height)")
    theta = 2.0 * np.pi * u / width - np.pi
    phi = np.pi / 2.0 - np.pi * v / height
    cp = np.cos(phi)
    return np.stack([cp * np.sin(theta), np.sin(phi), cp * np.cos(theta)], axis=-1)


def direction_to_pixel(d, width: int, height: int):
    """Inverse of pixel_to_direction. u wraps modulo width.

    Pole directions (x = z = 0) have degenerate longitude and map to
    u = width / 2 by convention.
    """
    d = np.asarray(d, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(norm < 1e-12):
        raise ValueError("zero direction vector")
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("direction must be unit length within 1e-6")
    x, y, z = d[..., 0] / norm, d[..., 1] / norm, d[..., 2] / norm
    theta = np.arctan2(x, z)
    phi = np.arcsin(np.clip(y, -1.0, 1.0))
    u = (theta + np.pi) * width / (2.0 * np.pi)
    at_pole = np.hypot(x, z) < 1e-12
    u = np.where(at_pole, width / 2.0, u) % width
    v = (np.pi / 2.0 - phi) * height / np.pi
    if u.ndim == 0:
        return float(u), float(v)
    return u, v


def pinhole_project(x, cam: Pinhole, pose: RigidPose):
    """Project world points to (u, v, depth). Raises for depth <= 0.

    Scalar form returns floats; array input of shape (N, 3) returns arrays.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x @ pose.rotation.T + pose.translation
    z = xc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at non-positive camera depth")
    u = cam.cx + cam.fx * xc[..., 0] / z
    v = cam.cy + cam.fy * xc[..., 1] / z
    if u.ndim == 0:
        return float(u), float(v), float(z)
    return u, v, z


def project_points(x, cam: Pinhole, pose: RigidPose):
    """Non-raising batch projection: returns (u, v, depth, in_front mask).

    Behind-camera points get depth <= 0 and garbage (u, v); callers mask.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    xc = x @ pose.rotation.T + pose.translation
    z = xc[:, 2]
    in_front = z > 0
    zsafe = np.where(in_front, z, 1.0)
    u = cam.cx + cam.fx * xc[:, 0] / zsafe
    v = cam.cy + cam.fy * xc[:, 1] / zsafe
    return u, v, z, in_front


def backproject_pixel(u, v, depth, cam: Pinhole, pose: RigidPose) -> np.ndarray:
    """World point for pixel (u, v) at camera-space depth z."""
    xc = np.stack(
        [
            (np.asarray(u, dtype=np.float64) - cam.cx) / cam.fx,
            (np.asarray(v, dtype=np.float64) - cam.cy) / cam.fy,
            np.ones_like(np.asarray(u, dtype=np.float64)),
        ],
        axis=-1,
    ) * np.asarray(depth, dtype=np.float64)[..., None]
    return (xc - pose.translation) @ pose.rotation


def look_at(center, target, up=_UP) -> RigidPose:
    """World-to-camera pose for a camera at `center` whose +z axis hits `target`."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    n = np.linalg.norm(forward)
    if n < 1e-12:
        raise ValueError("camera center coincides with target")
    ez = forward / n
    ex = np.cross(ez, up)
    if np.linalg.norm(ex) < 1e-8:
        # looking straight up/down: pick a deterministic horizontal x axis
        ex = np.cross(ez, np.array([0.0, 0.0, 1.0]))
    ex = ex / np.linalg.norm(ex)
    ey = np.cross(ez, ex)
    rot = np.stack([ex, ey, ez], axis=0)
    return RigidPose(rotation=rot, translation=-rot @ center)


def ring_cameras(ring: CameraRing) -> list[RigidPose]:
    """One look-at pose per (azimuth, elevation), centers at ring.radius from target."""
    if len(ring.azimuths) == 0 or len(ring.elevations) == 0:
        raise ValueError("camera ring needs at least one azimuth and one elevation")
    if ring.radius <= 0:
        raise ValueError("ring radius must be positive")
    poses = []
    for az in ring.azimuths:
        for el in ring.elevations:
            center = ring.target + ring.radius * direction_from_angles(az, el)
            poses.append(look_at(center, ring.target))
    return poses


def outward_cameras(azimuths, elevations, center=None) -> list[RigidPose]:
    """Cameras at a shared center facing outward along each (azimuth, elevation).

    These are the panorama-center poses used to cut base views out of a
    lifted point cloud; enumeration order matches ring_cameras.
    """
    if len(azimuths) == 0 or len(elevations) == 0:
        raise ValueError("need at least one azimuth and one elevation")
    c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    poses = []
    for az in azimuths:
        for el in elevations:
            d = direction_from_angles(float(az), float(el))
            poses.append(look_at(c, c + d))
    return poses
