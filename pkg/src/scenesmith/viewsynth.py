"""Perspective views of point clouds: z-buffer splatting, off-center
augmentation, depth/normal uncertainty, and diffusion-based hole filling."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .cameras import Pinhole, RigidPose, project_points
from .pointcloud import PointCloud

UNCERTAINTY_THRESHOLD = 0.75


@dataclass(eq=False)
class SynthView:
    """A rendered perspective view of a point cloud.

    depth == 0 marks holes; point_index carries the winning source point per
    covered pixel (-1 at holes); uncertainty is the clamped depth-normal
    similarity in [0, 1], present once computed.
    """

    rgb: np.ndarray
    depth: np.ndarray
    hole_mask: np.ndarray
    camera: tuple[Pinhole, RigidPose]
    point_index: np.ndarray
    uncertainty: np.ndarray | None = None


def _splat_offsets(splat_px: int) -> np.ndarray:
    r = int(splat_px)
    span = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(span, span)
    keep = dx * dx + dy * dy <= r * r
    return np.stack([dx[keep], dy[keep]], axis=1)


def render_points(
    pc: PointCloud, cam: Pinhole, pose: RigidPose, splat_px: int = 2
) -> SynthView:
    """Forward-splat points into a z-buffered view.

    Each point covers a disc of radius splat_px around its rounded pixel;
    the nearest camera depth wins per pixel (ties broken by point index).
    """
    if splat_px < 1:
        raise ValueError("splat_px must be >= 1")
    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    index = np.full((h, w), -1, dtype=np.int64)
    if len(pc):
        u, v, z, in_front = project_points(pc.positions, cam, pose)
        pu = np.round(np.clip(u, -1e9, 1e9)).astype(np.int64)
        pv = np.round(np.clip(v, -1e9, 1e9)).astype(np.int64)
        ids, zs, pix = [], [], []
        for dx, dy in _splat_offsets(splat_px):
            qu, qv = pu + dx, pv + dy
            ok = in_front & (qu >= 0) & (qu < w) & (qv >= 0) & (qv < h)
            ids.append(np.nonzero(ok)[0])
            zs.append(z[ok])
            pix.append(qv[ok] * w + qu[ok])
        ids = np.concatenate(ids)
        zs = np.concatenate(zs)
        pix = np.concatenate(pix)
        if len(ids):
            order = np.lexsort((ids, zs, pix))
            pix, zs, ids = pix[order], zs[order], ids[order]
            first = np.unique(pix, return_index=True)[1]
            win_pix, win_z, win_id = pix[first], zs[first], ids[first]
            depth.reshape(-1)[win_pix] = win_z
            index.reshape(-1)[win_pix] = win_id
            rgb.reshape(-1, 3)[win_pix] = pc.colors[win_id]
    hole = (depth == 0).astype(np.uint8)
    return SynthView(rgb=rgb, depth=depth, hole_mask=hole,
                     camera=(cam, pose), point_index=index)


DEFAULT_AUG_FRACTION = 0.1


def default_offsets(pc: PointCloud, fraction: float = DEFAULT_AUG_FRACTION) -> np.ndarray:
    """Four lateral offsets, +-fraction of the scene radius along x and z."""
    radius = float(np.linalg.norm(pc.positions, axis=1).max())
    d = fraction * radius
    return np.array([[d, 0, 0], [-d, 0, 0], [0, 0, d], [0, 0, -d]])


def augment_views(
    pc: PointCloud,
    cam: Pinhole,
    base: RigidPose,
    offsets,
    splat_px: int = 2,
) -> list[SynthView]:
    """Render one view per world-frame camera offset, orientation unchanged."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 3)
    if len(offsets) < 1:
        raise ValueError("need at least one offset")
    return [render_points(pc, cam, base.translated(o), splat_px) for o in offsets]


def _depth_normals(view: SynthView) -> tuple[np.ndarray, np.ndarray]:
    """Camera-space normals from central differences of the rendered depth.

    Returns (normals, valid) where valid marks pixels whose four neighbors
    are covered and in bounds.
    """
    cam, _ = view.camera
    h, w = view.depth.shape
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    pts = np.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)],
        axis=-1,
    ) * view.depth[:, :, None]
    covered = view.depth > 0
    valid = np.zeros((h, w), dtype=bool)
    valid[1:-1, 1:-1] = (
        covered[1:-1, 1:-1]
        & covered[1:-1, 2:] & covered[1:-1, :-2]
        & covered[2:, 1:-1] & covered[:-2, 1:-1]
    )
    du = np.zeros_like(pts)
    dv = np.zeros_like(pts)
    du[:, 1:-1] = 0.5 * (pts[:, 2:] - pts[:, :-2])
    dv[1:-1, :] = 0.5 * (pts[2:, :] - pts[:-2, :])
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = norm[..., 0] > 1e-12
    valid &= ok
    n = np.divide(n, np.where(norm > 0, norm, 1.0))
    # orient toward the camera (against the viewing ray)
    flip = np.einsum("hwc,hwc->hw", n, pts) > 0
    n[flip] *= -1.0
    return n, valid


def uncertain_from_similarity(similarity: np.ndarray,
                              invalid: np.ndarray | None = None) -> np.ndarray:
    """Binary mask of pixels whose depth-normal similarity is below 0.75."""
    unc = np.asarray(similarity) < UNCERTAINTY_THRESHOLD
    if invalid is not None:
        unc = unc | np.asarray(invalid).astype(bool)
    return unc.astype(np.uint8)


def uncertainty_map(view: SynthView, pc: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    """Cosine similarity of depth-derived vs splatted point normals.

    Returns (similarity in [-1, 1], uncertain_mask). Pixels are uncertain
    when similarity < 0.75, when they are holes, or when the depth normal
    is not computable there.
    """
    if pc.normals is None:
        raise ValueError("point cloud has no normals")
    _, pose = view.camera
    n_depth, valid = _depth_normals(view)
    h, w = view.depth.shape
    covered = view.point_index >= 0
    n_world = np.zeros((h, w, 3))
    n_world[covered] = pc.normals[view.point_index[covered]]
    n_cam = n_world @ pose.rotation.T
    cam = view.camera[0]
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    rays = np.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, np.ones_like(uu)],
        axis=-1,
    )
    flip = np.einsum("hwc,hwc->hw", n_cam, rays) > 0
    n_cam[flip] *= -1.0
    sim = np.einsum("hwc,hwc->hw", n_depth, n_cam)
    sim = np.where(valid & covered, np.clip(sim, -1.0, 1.0), 0.0)
    uncertain = uncertain_from_similarity(sim, invalid=~(valid & covered))
    return sim, uncertain


def with_uncertainty(view: SynthView, pc: PointCloud) -> SynthView:
    """Attach the clamped similarity map to a view (0 on holes)."""
    sim, _ = uncertainty_map(view, pc)
    c = np.clip(sim, 0.0, 1.0) * (view.hole_mask == 0)
    return replace(view, uncertainty=c)


def content_fill(
    rgb: np.ndarray,
    mask: np.ndarray,
    tol: float = 1e-5,
    max_sweeps: int | None = None,
) -> np.ndarray:
    """Fill masked pixels with the converged isotropic-diffusion solution.

    Gauss-Seidel (red-black) sweeps of the 4-neighbor Laplace stencil with
    Dirichlet data from unmasked pixels; unmasked pixels are returned
    bit-identical. Each masked component is seeded with the mean of its own
    boundary so the discrete maximum principle holds throughout.
    """
    img = np.asarray(rgb, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    mask = np.asarray(mask).astype(bool)
    if mask.shape != img.shape[:2]:
        raise ValueError("mask shape does not match image")
    if not mask.any():
        return rgb.copy()
    if mask.all():
        raise ValueError("cannot fill a fully masked image")
    h, w, c = img.shape
    if max_sweeps is None:
        max_sweeps = 10 * max(h, w)

    out = img.copy()
    labels, n_comp = ndimage.label(mask)
    boundary = ndimage.binary_dilation(mask) & ~mask
    for comp in range(1, n_comp + 1):
        ring = ndimage.binary_dilation(labels == comp) & boundary
        if not ring.any():
            raise ValueError("masked component has no unmasked boundary")
        out[labels == comp] = img[ring].mean(axis=0)

    yy, xx = np.nonzero(mask)
    parity = (yy + xx) % 2
    pad = np.zeros((h + 2, w + 2, c))
    fixed = ~mask
    for _ in range(max_sweeps):
        delta = 0.0
        for p in (0, 1):
            sel = parity == p
            if not sel.any():
                continue
            ys, xs = yy[sel], xx[sel]
            pad[1:-1, 1:-1] = out
            count = (
                (ys > 0).astype(np.float64) + (ys < h - 1)
                + (xs > 0) + (xs < w - 1)
            )
            total = (
                pad[ys, xs + 1] + pad[ys + 2, xs + 1]
                + pad[ys + 1, xs] + pad[ys + 1, xs + 2]
            )
            new = total / count[:, None]
            delta = max(delta, float(np.abs(new - out[ys, xs]).max()))
            out[ys, xs] = new
        if delta < tol:
            break
    out[fixed] = img[fixed]
    return out[:, :, 0] if squeeze else out
