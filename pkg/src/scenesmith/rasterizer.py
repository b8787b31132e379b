"""Differentiable rasterizer for surfel clouds.

Per pixel, surfels are composited front to back: contribution
w = opacity * g with g the projected-and-flattened 2D Gaussian density,
clamped to 0.99, with negligible weights soft-skipped to exactly zero below
1/255; color/depth/normal/feature share the same weights and
alpha = 1 - prod(1 - w). Depth sorting is canonical (camera depth, ties by
index) so storage order never changes the output.

Implementation: one flat (surfel, pixel) pair list sorted by (pixel, depth
rank); transmittances are exclusive segmented cumulative sums of
log(1 - w), so the whole render is a fixed chain of tensor kernels and the
same code yields analytic gradients for every surfel field via reverse-mode
autodiff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import Pinhole, RigidPose
from .surfels import FLATTEN_EPS, SurfelCloud

WEIGHT_CLAMP = 0.99
WEIGHT_SKIP = 1.0 / 255.0
# Contributions ramp smoothly (C1) from WEIGHT_SKIP down to exactly zero at
# WEIGHT_FLOOR; a hard cutoff would make finite-difference gradient checks
# ill-posed at the skip boundary.
WEIGHT_FLOOR = WEIGHT_SKIP / 16.0
# alpha regularizer for the expected-depth division; keeps the map (and its
# gradients) tame at barely-covered pixels at a ~0.1% depth bias
DEPTH_ALPHA_EPS = 1e-3
Z_NEAR = 1e-4
# pairs are composited in segment-aligned chunks to bound peak memory
PAIR_CHUNK = 2_000_000


@dataclass(eq=False)
class RenderOutput:
    """Rasterized maps. normal/feature are premultiplied by the compositing
    weights; depth is the alpha-normalized expected depth."""

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    feature: np.ndarray
    alpha: np.ndarray
    distortion: np.ndarray


def _quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    rows = [
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ]
    return torch.stack(rows, dim=-2)


def _segment_exclusive(values: torch.Tensor, seg_head: torch.Tensor):
    """Exclusive per-segment cumulative sum along a flat pair list.

    seg_head marks the first pair of each pixel segment; segments are
    contiguous. The running sum spans the whole pair list, so it accumulates
    in float64 regardless of the working dtype: differencing two large
    partial sums in float32 would wipe out the per-segment values.
    """
    acc = torch.cumsum(values.to(torch.float64), 0)
    shifted = torch.cat([acc.new_zeros(1), acc[:-1]])
    idx = torch.arange(len(values))
    head_idx = torch.cummax(torch.where(seg_head, idx, idx.new_zeros(())), 0)[0]
    return (shifted - shifted[head_idx]).to(values.dtype)


def render_torch(
    positions: torch.Tensor,
    rotations: torch.Tensor,
    scales: torch.Tensor,
    opacities: torch.Tensor,
    colors: torch.Tensor,
    features: torch.Tensor,
    cam: Pinhole,
    pose: RigidPose,
    background: torch.Tensor,
) -> dict[str, torch.Tensor]:
    """Torch forward pass; dtype follows the surfel tensors."""
    dtype = positions.dtype
    n = positions.shape[0]
    h, w = cam.height, cam.width
    npx = h * w
    fdim = features.shape[1]
    rot_wc = torch.tensor(pose.rotation, dtype=dtype)
    t_wc = torch.tensor(pose.translation, dtype=dtype)
    bg = background.to(dtype)

    def finalize(col_flat, depth_flat, normal_flat, feat_flat, alpha_flat,
                 dist_flat):
        return {
            "color": col_flat.reshape(h, w, 3),
            "depth": (depth_flat / (alpha_flat + DEPTH_ALPHA_EPS)).reshape(h, w),
            "normal": normal_flat.reshape(h, w, 3),
            "feature": feat_flat.reshape(h, w, fdim),
            "alpha": alpha_flat.reshape(h, w),
            "distortion": dist_flat.reshape(h, w),
        }

    def empty():
        return finalize(
            bg.expand(npx, 3).clone(), torch.zeros(npx, dtype=dtype),
            torch.zeros(npx, 3, dtype=dtype), torch.zeros(npx, fdim, dtype=dtype),
            torch.zeros(npx, dtype=dtype), torch.zeros(npx, dtype=dtype))

    if n == 0:
        return empty()

    p_cam = positions @ rot_wc.T + t_wc
    z = p_cam[:, 2]
    zs = torch.clamp(z, min=Z_NEAR)
    fx, fy = cam.fx, cam.fy

    m = _quat_to_matrix_t(rotations)                     # (N, 3, 3)
    axes = m[:, :, :2] * scales[:, None, :]              # world tangent frame
    a_cam = torch.einsum("ij,njk->nik", rot_wc, axes)    # (N, 3, 2)

    j00 = fx / zs
    j02 = -fx * p_cam[:, 0] / zs**2
    j11 = fy / zs
    j12 = -fy * p_cam[:, 1] / zs**2
    b00 = j00 * a_cam[:, 0, 0] + j02 * a_cam[:, 2, 0]
    b01 = j00 * a_cam[:, 0, 1] + j02 * a_cam[:, 2, 1]
    b10 = j11 * a_cam[:, 1, 0] + j12 * a_cam[:, 2, 0]
    b11 = j11 * a_cam[:, 1, 1] + j12 * a_cam[:, 2, 1]
    c00 = b00 * b00 + b01 * b01 + FLATTEN_EPS
    c01 = b00 * b10 + b01 * b11
    c11 = b10 * b10 + b11 * b11 + FLATTEN_EPS
    det = c00 * c11 - c01 * c01
    i00, i01, i11 = c11 / det, -c01 / det, c00 / det

    mean_u = cam.cx + fx * p_cam[:, 0] / zs
    mean_v = cam.cy + fy * p_cam[:, 1] / zs

    n_cam = torch.einsum("ij,nj->ni", rot_wc, m[:, :, 2])
    facing = (n_cam * p_cam).sum(dim=1, keepdim=True)
    n_cam = torch.where(facing > 0, -n_cam, n_cam)

    # --- pair construction (indices only, no gradients) ---
    with torch.no_grad():
        # cull exactly where the soft-skipped weight is identically zero:
        # the marginal variances c00/c11 bound the density per image axis,
        # so outside the rect opacity * g <= WEIGHT_FLOOR holds
        log_ratio = torch.log(torch.clamp(opacities / WEIGHT_FLOOR, min=1.0))
        cap = 2.0 * max(h, w)
        rx = torch.clamp(torch.sqrt(2.0 * c00 * log_ratio) + 1.0, max=cap)
        ry = torch.clamp(torch.sqrt(2.0 * c11 * log_ratio) + 1.0, max=cap)

        x0 = torch.clamp(torch.floor(mean_u - rx).long(), min=0)
        x1 = torch.clamp(torch.ceil(mean_u + rx).long() + 1, max=w)
        y0 = torch.clamp(torch.floor(mean_v - ry).long(), min=0)
        y1 = torch.clamp(torch.ceil(mean_v + ry).long() + 1, max=h)
        front = z > Z_NEAR
        wid = torch.clamp(x1 - x0, min=0) * front
        hei = torch.clamp(y1 - y0, min=0) * front
        counts = wid * hei
        total = int(counts.sum())
        if total == 0:
            return empty()
        sid = torch.repeat_interleave(torch.arange(n), counts)
        # rank of each pair within its surfel's rect
        starts = torch.cumsum(counts, 0) - counts
        local = torch.arange(total) - starts[sid]
        stride = wid[sid].clamp(min=1)
        px = x0[sid] + local % stride
        py = y0[sid] + local // stride
        del local, stride, starts
        pix = py * w + px
        # canonical composite order: (pixel, camera depth, storage index)
        depth_rank = torch.empty(n, dtype=torch.long)
        depth_rank[torch.argsort(z, stable=True)] = torch.arange(n)
        key = pix * n + depth_rank[sid]
        order = torch.argsort(key, stable=True)
        del key, depth_rank
        sid = sid[order]
        pix = pix[order]
        px = px[order].to(dtype)
        py = py[order].to(dtype)
        del order
        seg_head = torch.ones(total, dtype=torch.bool)
        seg_head[1:] = pix[1:] != pix[:-1]

    # one packed gather for the per-surfel scalars touched per pair
    packed = torch.stack([i00, i01, i11, mean_u, mean_v, opacities, zs], dim=1)
    attr_src = torch.cat([colors, n_cam, features], dim=1)

    with torch.no_grad():
        # chunk boundaries aligned to pixel segments so transmittance
        # accumulation never spans a cut
        heads = torch.nonzero(seg_head).reshape(-1)
        cuts = [0]
        while cuts[-1] + PAIR_CHUNK < total:
            j = int(torch.searchsorted(heads, cuts[-1] + PAIR_CHUNK,
                                       right=True)) - 1
            nxt = int(heads[j])
            if nxt <= cuts[-1]:
                nxt = int(heads[min(j + 1, len(heads) - 1)])
                if nxt <= cuts[-1]:
                    break
            cuts.append(nxt)
        cuts.append(total)

    acc = torch.zeros(npx, 6 + fdim, dtype=dtype)
    depth_acc = torch.zeros(npx, dtype=dtype)
    log_t_total = torch.zeros(npx, dtype=dtype)
    dist = torch.zeros(npx, dtype=dtype)
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= lo:
            continue
        per = packed[sid[lo:hi]]
        cpix = pix[lo:hi]
        du = px[lo:hi] - per[:, 3]
        dv = py[lo:hi] - per[:, 4]
        power = (-0.5 * (per[:, 0] * du * du + per[:, 2] * dv * dv)
                 - per[:, 1] * du * dv)
        g = torch.exp(torch.clamp(power, max=0.0))
        wgt = torch.clamp(per[:, 5] * g, max=WEIGHT_CLAMP)
        # C1 soft skip: identity above WEIGHT_SKIP, zero below WEIGHT_FLOOR
        t = torch.clamp((wgt - WEIGHT_FLOOR) / (WEIGHT_SKIP - WEIGHT_FLOOR),
                        min=0.0, max=1.0)
        wgt = wgt * t * t * (3.0 - 2.0 * t)

        log_1mw = torch.log1p(-wgt)
        log_t_excl = _segment_exclusive(log_1mw, seg_head[lo:hi])
        omega = wgt * torch.exp(log_t_excl)
        zsel = per[:, 6]
        acc = acc.index_add(0, cpix, omega[:, None] * attr_src[sid[lo:hi]])
        depth_acc = depth_acc.index_add(0, cpix, omega * zsel)
        log_t_total = log_t_total.index_add(0, cpix, log_1mw)
        # depth distortion: sum_i omega_i * (z_i * A_i - B_i) with exclusive
        # cumulants A = sum omega, B = sum omega * z (sorted by depth, so
        # all pairwise |z_i - z_j| terms are signed consistently)
        acc_w = _segment_exclusive(omega, seg_head[lo:hi])
        acc_wz = _segment_exclusive(omega * zsel, seg_head[lo:hi])
        dist = dist.index_add(0, cpix, omega * (zsel * acc_w - acc_wz))

    trans_final = torch.exp(log_t_total)
    alpha = 1.0 - trans_final
    col = acc[:, 0:3] + trans_final[:, None] * bg
    return finalize(col, depth_acc, acc[:, 3:6], acc[:, 6:], alpha, dist)


def _cloud_tensors(cloud: SurfelCloud, requires_grad: bool = False,
                   dtype=torch.float64):
    t = {
        "positions": torch.tensor(cloud.positions, dtype=dtype),
        "rotations": torch.tensor(cloud.rotations, dtype=dtype),
        "scales": torch.tensor(cloud.scales, dtype=dtype),
        "opacities": torch.tensor(cloud.opacities, dtype=dtype),
        "colors": torch.tensor(cloud.colors, dtype=dtype),
        "features": torch.tensor(cloud.features, dtype=dtype),
    }
    if requires_grad:
        for v in t.values():
            v.requires_grad_(True)
    return t


def rasterize(
    cloud: SurfelCloud,
    cam: Pinhole,
    pose: RigidPose,
    background=(0.0, 0.0, 0.0),
) -> RenderOutput:
    """Render a surfel cloud to color/depth/normal/feature/alpha maps."""
    with torch.no_grad():
        t = _cloud_tensors(cloud)
        out = render_torch(
            t["positions"], t["rotations"], t["scales"], t["opacities"],
            t["colors"], t["features"], cam, pose,
            torch.tensor(background, dtype=torch.float64),
        )
    return RenderOutput(**{k: v.numpy() for k, v in out.items()})


def rasterize_with_grads(
    cloud: SurfelCloud,
    cam: Pinhole,
    pose: RigidPose,
    background,
    loss_adjoint: dict,
) -> dict[str, np.ndarray]:
    """Per-surfel gradients of sum(adjoint * output) over the given maps.

    loss_adjoint maps output names (color/depth/normal/feature/alpha/
    distortion) to arrays shaped like the corresponding RenderOutput field.
    """
    t = _cloud_tensors(cloud, requires_grad=True)
    out = render_torch(
        t["positions"], t["rotations"], t["scales"], t["opacities"],
        t["colors"], t["features"], cam, pose,
        torch.tensor(background, dtype=torch.float64),
    )
    loss = None
    for key, adj in loss_adjoint.items():
        term = (out[key] * torch.tensor(np.asarray(adj), dtype=torch.float64)).sum()
        loss = term if loss is None else loss + term
    if loss is None:
        raise ValueError("loss_adjoint must name at least one output map")
    loss.backward()
    names = {
        "positions": "position", "rotations": "rotation", "scales": "scales",
        "opacities": "opacity", "colors": "color", "features": "feature",
    }
    return {
        pub: (t[k].grad.numpy() if t[k].grad is not None
              else np.zeros_like(getattr(cloud, k)))
        for k, pub in names.items()
    }
