"""Point-cloud container and geometric services.

Clouds are immutable after construction; the KD-tree over positions is
built lazily and shared by radius queries, normal estimation, and the
physics contact tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cameras import pixel_to_direction
from .errors import NoFloorError


@dataclass(frozen=True, eq=False)
class EquirectFrame:
    """Panoramic RGB image with aligned per-pixel metric depth.

    Depth values <= 0 (or non-finite) mark invalid pixels and are skipped
    when lifting.
    """

    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        rgb = np.asarray(self.rgb, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be H x W x 3")
        if depth.shape != rgb.shape[:2]:
            raise ValueError("depth shape does not match rgb")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions, colors, optional unit normals, and per-point masses.

    Masses default to the uniform 1/N distribution so the gravity energy is
    independent of sampling density.
    """

    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    masses: np.ndarray | None = None
    _tree_cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = pos.shape[0]
        if col.shape[0] != n:
            raise ValueError("colors length does not match positions")
        nor = self.normals
        if nor is not None:
            nor = np.ascontiguousarray(nor, dtype=np.float64).reshape(-1, 3)
            if nor.shape[0] != n:
                raise ValueError("normals length does not match positions")
            nor.flags.writeable = False
        mass = self.masses
        if mass is None:
            mass = np.full(n, 1.0 / n) if n else np.zeros(0)
        else:
            mass = np.ascontiguousarray(mass, dtype=np.float64).reshape(-1)
            if mass.shape[0] != n:
                raise ValueError("masses length does not match positions")
            if np.any(mass < 0):
                raise ValueError("masses must be nonnegative")
        for a in (pos, col, mass):
            a.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "normals", nor)
        object.__setattr__(self, "masses", mass)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def kdtree(self) -> cKDTree:
        if not self._tree_cache:
            self._tree_cache.append(cKDTree(self.positions))
        return self._tree_cache[0]

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def replace(self, **kw) -> "PointCloud":
        out = {
            "positions": self.positions,
            "colors": self.colors,
            "normals": self.normals,
            "masses": self.masses,
        }
        out.update(kw)
        return PointCloud(**out)


@dataclass(frozen=True, eq=False)
class FloorPlane:
    """Plane {x : normal . x = offset} with the normal oriented upward."""

    normal: np.ndarray
    offset: float
    inlier_count: int = 0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError("floor normal must be unit length within 1e-9")
        if n[1] <= 0:
            raise ValueError("floor normal must point upward (normal . y > 0)")
        n.flags.writeable = False
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def height_of(self, points: np.ndarray) -> np.ndarray:
        """Signed height of points above the plane."""
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def to_dict(self) -> dict:
        return {
            "normal": [float(x) for x in self.normal],
            "offset": self.offset,
            "inlier_count": int(self.inlier_count),
        }

    @staticmethod
    def from_dict(d: dict) -> "FloorPlane":
        return FloorPlane(
            normal=np.array(d["normal"], dtype=np.float64),
            offset=float(d["offset"]),
            inlier_count=int(d.get("inlier_count", 0)),
        )


def lift_panorama(frame: EquirectFrame) -> PointCloud:
    """Lift an equirect RGB-D frame to one world point per valid pixel.

    Position = depth(u, v) * pixel_to_direction(u, v); color copied from the
    panorama. Pixels with non-positive or non-finite depth are skipped.
    """
    h, w = frame.depth.shape
    valid = np.isfinite(frame.depth) & (frame.depth > 0)
    if not valid.any():
        raise ValueError("panorama has no valid depth pixels")
    vv, uu = np.nonzero(valid)
    dirs = pixel_to_direction(uu.astype(np.float64), vv.astype(np.float64), w, h)
    positions = frame.depth[vv, uu, None] * dirs
    colors = frame.rgb[vv, uu]
    return PointCloud(positions=positions, colors=colors)


def estimate_normals(pc: PointCloud, k: int = 16) -> PointCloud:
    """Per-point normals from the least-variance direction of k-neighborhoods.

    Signs are oriented toward the panorama center (origin): n . p <= 0.
    """
    n = len(pc)
    if k < 3 or k > n:
        raise ValueError(f"k must satisfy 3 <= k <= {n}")
    _, idx = pc.kdtree.query(pc.positions, k=k)
    nbrs = pc.positions[idx]                       # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]                        # smallest-eigenvalue direction
    flip = np.einsum("ni,ni->n", normals, pc.positions) > 0
    normals[flip] *= -1.0
    return pc.replace(normals=normals)


def depth_gradient_mask(depth: np.ndarray, tau: float) -> np.ndarray:
    """Binary mask where the forward-difference depth gradient exceeds tau."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth must be H x W")
    du = np.zeros_like(depth)
    dv = np.zeros_like(depth)
    du[:, :-1] = np.abs(depth[:, 1:] - depth[:, :-1])
    dv[:-1, :] = np.abs(depth[1:, :] - depth[:-1, :])
    return (np.maximum(du, dv) > tau).astype(np.uint8)


def nearest_within(query, pc: PointCloud, r: float) -> list[tuple[int, float]]:
    """Indices and distances of points strictly within radius r, nearest first."""
    if r <= 0:
        raise ValueError("radius must be positive")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    idx = pc.kdtree.query_ball_point(q, r)
    if not idx:
        return []
    idx = np.asarray(idx, dtype=np.int64)
    d = np.linalg.norm(pc.positions[idx] - q, axis=1)
    keep = d < r
    idx, d = idx[keep], d[keep]
    order = np.lexsort((idx, d))
    return [(int(i), float(dist)) for i, dist in zip(idx[order], d[order])]


def _fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares plane through points: unit normal and offset."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered
    _, vecs = np.linalg.eigh(cov)
    normal = vecs[:, 0]
    if normal[1] < 0:
        normal = -normal
    return normal, float(normal @ centroid)


def detect_floor(
    pc: PointCloud,
    angle_tol: float = 20.0,
    iterations: int = 512,
    inlier_eps: float | None = None,
    seed: int = 0,
) -> FloorPlane:
    """RANSAC floor plane: near-horizontal, inlier-rich, lowest of the big planes.

    inlier_eps defaults to 1% of the cloud's bounding-box height. Among
    candidate planes whose inlier count reaches 80% of the best count, the
    one with the lowest height along +y wins; the winner is refined by two
    rounds of least squares over its inliers.
    """
    pts = pc.positions
    n = pts.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    if inlier_eps is None:
        lo, hi = pc.bounds()
        inlier_eps = max(0.01 * (hi[1] - lo[1]), 1e-9)
    cos_tol = np.cos(np.radians(angle_tol))
    rng = np.random.default_rng(seed)
    min_inliers = max(3, int(np.ceil(0.01 * n)))

    candidates = []  # (inlier_count, height_along_y, normal, offset)
    for _ in range(iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        v1, v2 = pts[j] - pts[i], pts[k] - pts[i]
        normal = np.cross(v1, v2)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        if normal[1] < 0:
            normal = -normal
        if normal[1] < cos_tol:
            continue
        offset = normal @ pts[i]
        count = int(np.count_nonzero(np.abs(pts @ normal - offset) < inlier_eps))
        if count >= min_inliers:
            candidates.append((count, offset / normal[1], normal, offset))

    if not candidates:
        raise NoFloorError("no near-horizontal plane with enough inliers")

    best_count = max(c[0] for c in candidates)
    viable = [c for c in candidates if c[0] >= 0.8 * best_count]
    viable.sort(key=lambda c: (c[1], -c[0]))
    _, _, normal, offset = viable[0]

    # two refinement rounds: refit on inliers, re-select, refit again
    for _ in range(2):
        inliers = np.abs(pts @ normal - offset) < inlier_eps
        if np.count_nonzero(inliers) < 3:
            break
        normal, offset = _fit_plane(pts[inliers])
    if normal[1] < cos_tol:
        raise NoFloorError("refined plane left the horizontal tolerance")
    count = int(np.count_nonzero(np.abs(pts @ normal - offset) < inlier_eps))
    return FloorPlane(normal=normal, offset=offset, inlier_count=count)
