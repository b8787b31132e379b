"""Flat 2D Gaussian surfel primitives and their covariance algebra.

A surfel is a Gaussian disc: position, unit quaternion (w, x, y, z) whose
rotation columns give the two tangent axes and the normal, two tangential
scales (the third axis is implicitly zero), opacity, flat color, and a
semantic feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import fileio

FLATTEN_EPS = 0.3  # px^2 low-pass added to the projected 2x2 covariance

PROVENANCE_SCENE = 0
PROVENANCE_OBJECT = 1


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for unit quaternions (w, x, y, z). Shape (..., 3, 3)."""
    q = quat_normalize(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a single rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = 0.5 / np.sqrt(t + 1.0)
        q = np.array([0.25 / s, (m[2, 1] - m[1, 2]) * s,
                      (m[0, 2] - m[2, 0]) * s, (m[1, 0] - m[0, 1]) * s])
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0))
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a * b, both (..., 4) in (w, x, y, z)."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_normal(n: np.ndarray) -> np.ndarray:
    """Quaternion whose rotation maps +z to the given unit normal."""
    n = np.asarray(n, dtype=np.float64)
    z = np.array([0.0, 0.0, 1.0])
    c = float(n @ z)
    if c > 1.0 - 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if c < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])  # 180 deg about x
    axis = np.cross(z, n)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * np.arccos(np.clip(c, -1.0, 1.0))
    return quat_normalize(np.concatenate([[np.cos(half)], np.sin(half) * axis]))


@dataclass(frozen=True, eq=False)
class Surfel:
    position: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scales: np.ndarray    # two tangential extents, > 0
    opacity: float
    color: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("quaternion must be unit length within 1e-6")
        s = np.asarray(self.scales, dtype=np.float64).reshape(2)
        if np.any(s <= 0):
            raise ValueError("scales must be positive")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "color",
                           np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "feature",
                           np.asarray(self.feature, dtype=np.float64).reshape(-1))


class SurfelCloud:
    """Struct-of-arrays surfel container with per-surfel provenance tags."""

    def __init__(self, positions, rotations, scales, opacities, colors,
                 features, provenance=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 2)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(n, 3)
        feats = np.ascontiguousarray(features, dtype=np.float64)
        self.features = feats if feats.ndim == 2 else feats.reshape(n, -1)
        if provenance is None:
            provenance = np.full(n, PROVENANCE_SCENE, dtype=np.uint8)
        self.provenance = np.ascontiguousarray(provenance, dtype=np.uint8).reshape(n)
        if np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0) > 1e-6):
            raise ValueError("quaternions must be unit length within 1e-6")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def surfel(self, i: int) -> Surfel:
        return Surfel(self.positions[i], self.rotations[i], self.scales[i],
                      float(self.opacities[i]), self.colors[i], self.features[i])

    def select(self, mask) -> "SurfelCloud":
        return SurfelCloud(self.positions[mask], self.rotations[mask],
                           self.scales[mask], self.opacities[mask],
                           self.colors[mask], self.features[mask],
                           self.provenance[mask])

    def concat(self, other: "SurfelCloud") -> "SurfelCloud":
        if other.feature_dim != self.feature_dim:
            raise ValueError("feature dimensions differ")
        return SurfelCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.scales, other.scales]),
            np.concatenate([self.opacities, other.opacities]),
            np.concatenate([self.colors, other.colors]),
            np.concatenate([self.features, other.features]),
            np.concatenate([self.provenance, other.provenance]),
        )

    def transformed(self, rotation: np.ndarray, translation) -> "SurfelCloud":
        """Rigidly move every surfel: positions and tangent frames rotate."""
        rotation = np.asarray(rotation, dtype=np.float64)
        rq = matrix_to_quat(rotation)
        return SurfelCloud(
            self.positions @ rotation.T + np.asarray(translation, dtype=np.float64),
            quat_normalize(quat_multiply(rq[None, :], self.rotations)),
            self.scales,
            self.opacities,
            self.colors,
            self.features,
            self.provenance,
        )

    def normals(self) -> np.ndarray:
        """World surfel normals: third rotation column."""
        return quat_to_matrix(self.rotations)[:, :, 2]


def build_covariance(rotation, scales) -> np.ndarray:
    """3x3 surfel covariance R diag(s1^2, s2^2, 0) R^T.

    `rotation` is a unit quaternion (w, x, y, z) or a 3x3 matrix.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    rot = rotation if rotation.shape == (3, 3) else quat_to_matrix(rotation)
    s = np.asarray(scales, dtype=np.float64).reshape(2)
    return (rot * np.array([s[0] ** 2, s[1] ** 2, 0.0])) @ rot.T


def gaussian_weight(x, surfel: Surfel) -> float:
    """Surfel density at a world point, 1 at the center.

    Uses the tangent-plane pseudo-inverse of the rank-2 covariance:
    tangential offsets decay with the two scales, off-plane offsets do not.
    """
    rot = quat_to_matrix(surfel.rotation)
    d = np.asarray(x, dtype=np.float64) - surfel.position
    a = (d @ rot[:, 0]) / surfel.scales[0]
    b = (d @ rot[:, 1]) / surfel.scales[1]
    return float(np.exp(-0.5 * (a * a + b * b)))


def project_covariance(sigma: np.ndarray, W: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Camera-plane covariance J W sigma W^T J^T."""
    sigma = np.asarray(sigma, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    return J @ W @ sigma @ W.T @ J.T


def flatten_2d(sigma_prime: np.ndarray, eps: float = FLATTEN_EPS) -> np.ndarray:
    """Upper-left 2x2 block of the projected covariance, plus eps * I."""
    sigma_prime = np.asarray(sigma_prime, dtype=np.float64)
    return sigma_prime[:2, :2] + eps * np.eye(2)


def surfels_from_points(pc, feature_dim: int = 16,
                        provenance: int = PROVENANCE_SCENE) -> SurfelCloud:
    """One surfel per point: scale from the local mean neighbor distance,
    opacity 0.5, color copied, tangent frame aligned to the point normal."""
    n = len(pc)
    if n == 0:
        raise ValueError("empty point cloud")
    if pc.normals is None:
        from .pointcloud import estimate_normals

        pc = estimate_normals(pc, k=min(16, n)) if n >= 3 else pc.replace(
            normals=np.tile([0.0, 0.0, 1.0], (n, 1)))
    k = min(4, n)
    if k >= 2:
        dists, _ = cKDTree(pc.positions).query(pc.positions, k=k)
        mean_dist = dists[:, 1:].mean(axis=1)
        mean_dist = np.maximum(mean_dist, 1e-6)
    else:
        mean_dist = np.full(n, 0.1)
    quats = np.stack([quat_from_normal(nv) for nv in pc.normals])
    return SurfelCloud(
        positions=pc.positions,
        rotations=quats,
        scales=np.stack([mean_dist, mean_dist], axis=1),
        opacities=np.full(n, 0.5),
        colors=pc.colors,
        features=np.zeros((n, feature_dim)),
        provenance=np.full(n, provenance, dtype=np.uint8),
    )


def save_surfels_ply(path, cloud: SurfelCloud) -> None:
    cols = {
        "x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
        "red": cloud.colors[:, 0], "green": cloud.colors[:, 1], "blue": cloud.colors[:, 2],
        "qw": cloud.rotations[:, 0], "qx": cloud.rotations[:, 1],
        "qy": cloud.rotations[:, 2], "qz": cloud.rotations[:, 3],
        "s1": cloud.scales[:, 0], "s2": cloud.scales[:, 1],
        "opacity": cloud.opacities,
    }
    for f in range(cloud.feature_dim):
        cols[f"feature_{f}"] = cloud.features[:, f]
    cols["provenance"] = cloud.provenance
    fileio.write_ply(path, cols)


def load_surfels_ply(path) -> SurfelCloud:
    from .errors import InputFormatError

    cols = fileio.read_ply(path)
    required = ["x", "y", "z", "red", "green", "blue", "qw", "qx", "qy", "qz",
                "s1", "s2", "opacity"]
    for key in required:
        if key not in cols:
            raise InputFormatError(f"{path}: missing surfel property {key}")
    feat_names = sorted(
        (k for k in cols if k.startswith("feature_")),
        key=lambda k: int(k.split("_")[1]),
    )
    n = len(cols["x"])
    features = (
        np.stack([cols[k] for k in feat_names], axis=1)
        if feat_names else np.zeros((n, 0))
    )
    quats = np.stack([cols["qw"], cols["qx"], cols["qy"], cols["qz"]], axis=1)
    return SurfelCloud(
        positions=np.stack([cols["x"], cols["y"], cols["z"]], axis=1),
        rotations=quat_normalize(quats.astype(np.float64)),
        scales=np.stack([cols["s1"], cols["s2"]], axis=1),
        opacities=np.clip(cols["opacity"].astype(np.float64), 0.0, 1.0),
        colors=np.stack([cols["red"], cols["green"], cols["blue"]], axis=1),
        features=features,
        provenance=cols.get("provenance"),
    )
