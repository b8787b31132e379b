"""Surfel-scene training: reconstruction losses and the optimization loop.

The objective is photometric (L1 + SSIM) plus a depth-distortion and a
depth-normal-consistency regularizer on base views, an uncertainty-weighted
photometric term on augmented views, and an L1 feature-distillation term on
views that carry semantic feature targets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .cameras import Pinhole, RigidPose
from .errors import DivergenceError
from .pointcloud import PointCloud
from .rasterizer import render_torch, RenderOutput
from .surfels import SurfelCloud, surfels_from_points, PROVENANCE_OBJECT

OPACITY_CULL = 1.0 / 255.0
MAX_INIT_POINTS = 200_000


@dataclass
class TrainConfig:
    iterations: int = 4000
    lr_position: float = 1.6e-4
    lr_position_final_scale: float = 0.01  # exponential decay target at the last step
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_feature: float = 2.5e-3
    lambda_ssim: float = 0.2
    lambda_dist: float = 100.0
    lambda_norm: float = 0.05
    lambda_feat: float = 1.0
    # the geometric regularizers ramp in late, once photometric training has
    # converged coarsely (convention of the cited splatting trainers)
    dist_from_iteration: int = 3000
    norm_from_iteration: int = 7000
    feature_dim: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in ("lambda_ssim", "lambda_dist", "lambda_norm", "lambda_feat"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        d = json.loads(text)
        d["background"] = tuple(d.get("background", (0.0, 0.0, 0.0)))
        return TrainConfig(**d)


@dataclass(eq=False)
class BaseView:
    """A center-projected supervision image with its camera."""

    image: np.ndarray
    cam: Pinhole
    pose: RigidPose
    feature_target: np.ndarray | None = None
    feature_mask: np.ndarray | None = None


@dataclass(eq=False)
class AugView:
    """An off-center view: inpainted target, inpaint mask M, confidence C."""

    image: np.ndarray
    cam: Pinhole
    pose: RigidPose
    mask: np.ndarray
    confidence: np.ndarray
    feature_target: np.ndarray | None = None
    feature_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mask.shape != self.image.shape[:2]:
            raise ValueError("mask shape does not match image")
        if self.confidence.shape != self.image.shape[:2]:
            raise ValueError("confidence shape does not match image")


@dataclass(eq=False)
class ViewSet:
    base_views: list
    aug_views: list = field(default_factory=list)


# --- loss primitives (torch) -------------------------------------------------

_ssim_window_cache: dict = {}


def _ssim_window(dtype):
    if dtype not in _ssim_window_cache:
        sigma, size = 1.5, 11
        coords = torch.arange(size, dtype=dtype) - size // 2
        g = torch.exp(-(coords**2) / (2 * sigma**2))
        g = g / g.sum()
        _ssim_window_cache[dtype] = g[:, None] @ g[None, :]
    return _ssim_window_cache[dtype]


def ssim_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of two (H, W, C) images with an 11x11 Gaussian window."""
    c = a.shape[2]
    win = _ssim_window(a.dtype).expand(c, 1, 11, 11)
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    mu_x = torch.nn.functional.conv2d(x, win, padding=5, groups=c)
    mu_y = torch.nn.functional.conv2d(y, win, padding=5, groups=c)
    xx = torch.nn.functional.conv2d(x * x, win, padding=5, groups=c) - mu_x**2
    yy = torch.nn.functional.conv2d(y * y, win, padding=5, groups=c) - mu_y**2
    xy = torch.nn.functional.conv2d(x * y, win, padding=5, groups=c) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    )
    return s.mean()


def photometric_t(pred: torch.Tensor, target: torch.Tensor, lambda_ssim: float):
    l1 = (pred - target).abs().mean()
    if lambda_ssim == 0:
        return l1
    return (1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim_t(pred, target))


def depth_normals_t(depth: torch.Tensor, cam: Pinhole):
    """Camera-space normals from central differences of a depth map.

    Returns (normals (H, W, 3), valid mask) with normals oriented toward
    the camera; valid requires covered interior pixels.
    """
    h, w = depth.shape
    dtype = depth.dtype
    uu = torch.arange(w, dtype=dtype).expand(h, w)
    vv = torch.arange(h, dtype=dtype)[:, None].expand(h, w)
    pts = torch.stack(
        [(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy, torch.ones_like(uu)],
        dim=-1,
    ) * depth[:, :, None]
    du = torch.zeros_like(pts)
    dv = torch.zeros_like(pts)
    du[:, 1:-1] = 0.5 * (pts[:, 2:] - pts[:, :-2])
    dv[1:-1, :] = 0.5 * (pts[2:, :] - pts[:-2, :])
    n = torch.cross(du, dv, dim=-1)
    norm = n.norm(dim=-1, keepdim=True)
    covered = depth > 0
    valid = torch.zeros_like(covered)
    valid[1:-1, 1:-1] = (
        covered[1:-1, 1:-1]
        & covered[1:-1, 2:] & covered[1:-1, :-2]
        & covered[2:, 1:-1] & covered[:-2, 1:-1]
    )
    valid = valid & (norm[..., 0] > 1e-12)
    n = n / torch.clamp(norm, min=1e-12)
    flip = (n * pts).sum(-1, keepdim=True) > 0
    n = torch.where(flip, -n, n)
    return n, valid


def base_loss_t(out: dict, target: torch.Tensor, cfg: TrainConfig, cam: Pinhole,
                iteration: int | None = None):
    loss = photometric_t(out["color"], target, cfg.lambda_ssim)
    it = iteration if iteration is not None else max(cfg.dist_from_iteration,
                                                     cfg.norm_from_iteration)
    if cfg.lambda_dist > 0 and it >= cfg.dist_from_iteration:
        loss = loss + cfg.lambda_dist * out["distortion"].mean()
    if cfg.lambda_norm > 0 and it >= cfg.norm_from_iteration:
        nmap, valid = depth_normals_t(out["depth"], cam)
        per_px = out["alpha"] - (out["normal"] * nmap).sum(-1)
        count = int(valid.sum())
        if count > 0:
            loss = loss + cfg.lambda_norm * (per_px * valid).sum() / count
    return loss


def aug_loss_t(out: dict, target: torch.Tensor, mask: torch.Tensor,
               conf: torch.Tensor, cfg: TrainConfig):
    c = torch.clamp(conf, 0.0, 1.0)[:, :, None]
    m = mask[:, :, None].to(target.dtype)
    pred = (1.0 - m) * out["color"] + c * m * out["color"]
    return photometric_t(pred, target, cfg.lambda_ssim)


def distill_loss_t(pred_feat: torch.Tensor, target_feat: torch.Tensor,
                   mask: torch.Tensor):
    count = int(mask.sum())
    if count == 0:
        return pred_feat.sum() * 0.0
    diff = (pred_feat - target_feat).abs().sum(-1)
    return (diff * mask.to(pred_feat.dtype)).sum() / count


def _adjoint_eval(maps: dict, fn):
    """Evaluate fn over leaf copies of the given maps; return value + grads."""
    leaves = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True)
              for k, v in maps.items()}
    loss = fn(leaves)
    loss.backward()
    adj = {k: (t.grad.numpy() if t.grad is not None else np.zeros(t.shape))
           for k, t in leaves.items()}
    return float(loss.detach()), adj


def loss_base(render: RenderOutput, target: np.ndarray, cfg: TrainConfig,
              cam: Pinhole | None = None):
    """Base-view loss and its adjoints with respect to the rendered maps."""
    maps = {"color": render.color, "distortion": render.distortion,
            "depth": render.depth, "normal": render.normal,
            "alpha": render.alpha}
    tgt = torch.tensor(target, dtype=torch.float64)
    if cam is None and cfg.lambda_norm > 0:
        raise ValueError("cam is required when lambda_norm > 0")

    def fn(m):
        return base_loss_t(m, tgt, cfg, cam)

    return _adjoint_eval(maps, fn)


def loss_aug(render: RenderOutput, target: np.ndarray, mask: np.ndarray,
             confidence: np.ndarray, cfg: TrainConfig):
    """Uncertainty-weighted augmented-view loss + adjoint on the color map."""
    tgt = torch.tensor(target, dtype=torch.float64)
    msk = torch.tensor(np.asarray(mask, dtype=np.float64))
    conf = torch.tensor(np.asarray(confidence, dtype=np.float64))

    def fn(m):
        return aug_loss_t(m, tgt, msk, conf, cfg)

    return _adjoint_eval({"color": render.color}, fn)


def loss_distill(render_feature: np.ndarray, target_feature: np.ndarray,
                 mask: np.ndarray):
    """Masked L1 feature distillation + adjoint on the feature map."""
    tgt = torch.tensor(target_feature, dtype=torch.float64)
    msk = torch.tensor(np.asarray(mask, dtype=np.float64))

    def fn(m):
        return distill_loss_t(m["feature"], tgt, msk)

    value, adj = _adjoint_eval({"feature": render_feature}, fn)
    return value, adj


# --- feature ingestion --------------------------------------------------------


def reduce_features(fmap: np.ndarray, out_dim: int = 16):
    """PCA-project an H x W x D feature map to out_dim channels.

    Returns (reduced map, (mean, projection)) so further maps can reuse the
    same projection.
    """
    h, w, d = fmap.shape
    if d <= out_dim:
        return fmap.astype(np.float64), (np.zeros(d), np.eye(d))
    flat = fmap.reshape(-1, d).astype(np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = vt[:out_dim].T  # (D, out_dim)
    return (centered @ proj).reshape(h, w, out_dim), (mean, proj)


def apply_feature_projection(fmap: np.ndarray, projection) -> np.ndarray:
    mean, proj = projection
    h, w, d = fmap.shape
    return ((fmap.reshape(-1, d) - mean) @ proj).reshape(h, w, -1)


# --- training loop -------------------------------------------------------------


def voxel_downsample(pc: PointCloud, voxel: float) -> PointCloud:
    """Keep the first point per voxel cell, in index order."""
    keys = np.floor(pc.positions / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    keep = np.sort(first)
    return PointCloud(
        positions=pc.positions[keep], colors=pc.colors[keep],
        normals=None if pc.normals is None else pc.normals[keep],
    )


class _SceneParams:
    """Raw (unconstrained) trainable tensors for a surfel cloud."""

    # double precision: at desk scale many surfels carry genuinely tiny
    # gradients, and float32 rounding noise turns their Adam-normalized
    # updates into random walks that degrade the scene
    DTYPE = torch.float64

    def __init__(self, cloud: SurfelCloud):
        dt = self.DTYPE
        self.positions = torch.tensor(cloud.positions, dtype=dt, requires_grad=True)
        self.quats = torch.tensor(cloud.rotations, dtype=dt, requires_grad=True)
        self.log_scales = torch.tensor(np.log(cloud.scales), dtype=dt,
                                       requires_grad=True)
        op = np.clip(cloud.opacities, 1e-6, 1 - 1e-6)
        self.opacity_logit = torch.tensor(np.log(op / (1 - op)), dtype=dt,
                                          requires_grad=True)
        self.colors = torch.tensor(cloud.colors, dtype=dt, requires_grad=True)
        self.features = torch.tensor(cloud.features, dtype=dt, requires_grad=True)
        self.provenance = cloud.provenance.copy()

    def physical(self):
        return {
            "positions": self.positions,
            "rotations": self.quats / self.quats.norm(dim=1, keepdim=True),
            "scales": torch.exp(self.log_scales),
            "opacities": torch.sigmoid(self.opacity_logit),
            "colors": self.colors,
            "features": self.features,
        }

    def export(self, cull_opacity: float = OPACITY_CULL) -> SurfelCloud:
        with torch.no_grad():
            phys = {k: v.detach() for k, v in self.physical().items()}
        opac = phys["opacities"].numpy()
        keep = opac >= cull_opacity
        if not keep.any():
            keep = np.ones(len(opac), dtype=bool)
        return SurfelCloud(
            positions=phys["positions"].numpy()[keep],
            rotations=phys["rotations"].numpy()[keep],
            scales=phys["scales"].numpy()[keep],
            opacities=np.clip(opac[keep], 0.0, 1.0),
            colors=np.clip(phys["colors"].numpy()[keep], 0.0, 1.0),
            features=phys["features"].numpy()[keep],
            provenance=self.provenance[keep],
        )


def _render_view(params: _SceneParams, cam, pose, cfg):
    phys = params.physical()
    return render_torch(
        phys["positions"], phys["rotations"], phys["scales"],
        phys["opacities"], phys["colors"], phys["features"],
        cam, pose, torch.tensor(cfg.background, dtype=_SceneParams.DTYPE),
    )


def _view_loss(params: _SceneParams, view, cfg: TrainConfig,
               iteration: int | None = None):
    dt = _SceneParams.DTYPE
    out = _render_view(params, view.cam, view.pose, cfg)
    target = torch.tensor(view.image, dtype=dt)
    parts = {"base": 0.0, "aug": 0.0, "distill": 0.0}
    if isinstance(view, AugView):
        mask = torch.tensor(np.asarray(view.mask), dtype=dt)
        conf = torch.tensor(np.asarray(view.confidence), dtype=dt)
        loss = aug_loss_t(out, target, mask, conf, cfg)
        parts["aug"] = loss
    else:
        loss = base_loss_t(out, target, cfg, view.cam, iteration=iteration)
        parts["base"] = loss
    if view.feature_target is not None and cfg.lambda_feat > 0:
        ft = torch.tensor(view.feature_target, dtype=dt)
        fm = torch.tensor(np.asarray(view.feature_mask)
                          if view.feature_mask is not None
                          else np.ones(view.image.shape[:2]), dtype=dt)
        d = distill_loss_t(out["feature"], ft, fm)
        parts["distill"] = d
        loss = loss + cfg.lambda_feat * d
    return loss, parts


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def train_scene(init: PointCloud, views: ViewSet, cfg: TrainConfig):
    """Optimize a surfel cloud against the view set.

    Returns (SurfelCloud, trace) where trace rows are
    (iteration, L_base, L_aug, L_distill, total).
    """
    if len(init) == 0:
        raise ValueError("initial point cloud is empty")
    if not views.base_views:
        raise ValueError("need at least one base view")
    torch.manual_seed(cfg.seed)

    pc = init
    if len(pc) > MAX_INIT_POINTS:
        lo, hi = pc.bounds()
        pc = voxel_downsample(pc, float(np.max(hi - lo)) / 256.0)
    fdim = 0  # without distillation targets there is nothing to train
    for v in views.base_views + views.aug_views:
        if v.feature_target is not None:
            fdim = v.feature_target.shape[2]
            break
    cloud = surfels_from_points(pc, feature_dim=fdim)
    params = _SceneParams(cloud)

    opt = torch.optim.Adam([
        {"params": [params.positions], "lr": cfg.lr_position},
        {"params": [params.quats], "lr": cfg.lr_rotation},
        {"params": [params.log_scales], "lr": cfg.lr_scale},
        {"params": [params.opacity_logit], "lr": cfg.lr_opacity},
        {"params": [params.colors], "lr": cfg.lr_color},
        {"params": [params.features], "lr": cfg.lr_feature},
    ], eps=1e-15)

    schedule = list(views.base_views) + list(views.aug_views)
    trace = np.zeros((cfg.iterations, 5))
    for it in range(cfg.iterations):
        opt.param_groups[0]["lr"] = cfg.lr_position * (
            cfg.lr_position_final_scale ** (it / max(cfg.iterations - 1, 1))
        )
        view = schedule[it % len(schedule)]
        loss, parts = _view_loss(params, view, cfg, iteration=it)
        total = float(loss.detach())
        if not math.isfinite(total):
            raise DivergenceError(
                f"non-finite loss {total} at iteration {it}"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace[it] = (it, _scalar(parts["base"]), _scalar(parts["aug"]),
                     _scalar(parts["distill"]), total)
    return params.export(), trace


def refine_composite(cloud: SurfelCloud, views: ViewSet, cfg: TrainConfig,
                     lambda_sds: float = 0.01, sds_hook=None) -> SurfelCloud:
    """Composition refinement: object surfels learn color/opacity only.

    Scene surfels stay frozen unless `sds_hook(iteration, positions) ->
    (N, 3)` supplies external position gradients, which are applied to the
    scene rows scaled by lambda_sds. Untouched fields come back bit-identical.
    """
    obj = cloud.provenance == PROVENANCE_OBJECT
    params = _SceneParams(cloud)
    init_positions = params.positions.detach().numpy().copy()
    for t in (params.positions, params.quats, params.log_scales, params.features):
        t.requires_grad_(False)
    obj_t = torch.tensor(obj)

    groups = [
        {"params": [params.opacity_logit], "lr": cfg.lr_opacity},
        {"params": [params.colors], "lr": cfg.lr_color},
    ]
    if sds_hook is not None:
        params.positions.requires_grad_(True)
        groups.append({"params": [params.positions], "lr": cfg.lr_position})
    opt = torch.optim.Adam(groups, eps=1e-15)

    for it in range(cfg.iterations):
        view = views.base_views[it % len(views.base_views)]
        loss, _ = _view_loss(params, view, cfg, iteration=it)
        if not math.isfinite(float(loss.detach())):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        with torch.no_grad():
            # photometric refinement only touches the object's appearance
            params.opacity_logit.grad[~obj_t] = 0.0
            params.colors.grad[~obj_t] = 0.0
            if sds_hook is not None:
                g = sds_hook(it, params.positions.detach().numpy())
                scene_grad = torch.tensor(np.asarray(g), dtype=_SceneParams.DTYPE)
                if params.positions.grad is None:
                    params.positions.grad = torch.zeros_like(params.positions)
                # scene geometry moves only by the external gradient source
                params.positions.grad[~obj_t] = (
                    lambda_sds * scene_grad[~obj_t.numpy()])
                params.positions.grad[obj_t] = 0.0
        opt.step()

    with torch.no_grad():
        positions = cloud.positions.copy()
        if sds_hook is not None:
            # copy back only rows the hook actually moved, so untouched scene
            # rows keep their original double-precision values
            final = params.positions.numpy()
            moved = (final != init_positions).any(axis=1) & ~obj
            positions[moved] = final[moved]
        colors = cloud.colors.copy()
        colors[obj] = np.clip(params.colors.numpy()[obj], 0.0, 1.0)
        opacities = cloud.opacities.copy()
        opacities[obj] = torch.sigmoid(params.opacity_logit).numpy()[obj]
    return SurfelCloud(
        positions=positions, rotations=cloud.rotations, scales=cloud.scales,
        opacities=opacities, colors=colors, features=cloud.features,
        provenance=cloud.provenance,
    )
