import numpy as np
import pytest

from scenesmith.cameras import Pinhole, RigidPose, look_at
from scenesmith.rasterizer import rasterize, rasterize_with_grads
from scenesmith.surfels import SurfelCloud

FDIM = 2


def random_cloud(rng, n, spread=0.6, fdim=FDIM, z_center=2.5):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    pos = rng.normal(size=(n, 3)) * spread
    pos[:, 2] = z_center + rng.uniform(-0.6, 0.6, size=n)
    return SurfelCloud(
        positions=pos,
        rotations=q,
        scales=rng.uniform(0.08, 0.35, size=(n, 2)),
        opacities=rng.uniform(0.3, 0.9, size=n),
        colors=rng.uniform(size=(n, 3)),
        features=rng.normal(size=(n, fdim)),
    )


def single_surfel_cloud(color=(1.0, 0.0, 0.0), opacity=1.0, z=2.0, scale=0.5):
    return SurfelCloud(
        positions=np.array([[0.0, 0.0, z]]),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        scales=np.array([[scale, scale]]),
        opacities=np.array([opacity]),
        colors=np.array([color]),
        features=np.zeros((1, FDIM)),
    )


CAM = Pinhole.from_fov(64, 64, 60.0)
POSE = RigidPose.identity()


class TestRasterizeForward:
    def test_empty_cloud_is_background(self):
        cloud = SurfelCloud(np.zeros((0, 3)), np.zeros((0, 4)),
                            np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)),
                            np.zeros((0, FDIM)))
        out = rasterize(cloud, CAM, POSE, background=(0.1, 0.2, 0.3))
        assert np.allclose(out.color, [0.1, 0.2, 0.3])
        assert (out.alpha == 0).all()

    def test_single_surfel_peak_at_principal_point(self):
        out = rasterize(single_surfel_cloud(), CAM, POSE)
        cy, cx = int(CAM.cy), int(CAM.cx)
        assert out.alpha[cy, cx] == out.alpha.max()  # clamp plateau at peak
        assert np.abs(out.color[cy, cx] - [1, 0, 0]).max() < 0.011
        assert abs(out.depth[cy, cx] - 2.0) < 0.01  # alpha-eps bias ~0.1%

    def test_occlusion_with_high_weight(self):
        near = single_surfel_cloud(color=(1, 0, 0), opacity=1.0, z=1.5, scale=2.0)
        far = single_surfel_cloud(color=(0, 1, 0), opacity=1.0, z=3.0, scale=2.0)
        both = near.concat(far)
        out = rasterize(both, CAM, POSE)
        cy, cx = int(CAM.cy), int(CAM.cx)
        # nearer surfel has w = 0.99 at its center: <= 1.5% residual
        assert np.abs(out.color[cy, cx] - [1, 0, 0]).max() < 0.015

    def test_alpha_in_unit_interval(self):
        rng = np.random.default_rng(0)
        for seed in range(4):
            cloud = random_cloud(np.random.default_rng(seed), 30)
            out = rasterize(cloud, CAM, POSE)
            assert out.alpha.min() >= 0.0 and out.alpha.max() <= 1.0 + 1e-12

    def test_storage_order_invariance(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, 25)
        out_a = rasterize(cloud, CAM, POSE)
        perm = rng.permutation(25)
        cloud_b = SurfelCloud(cloud.positions[perm], cloud.rotations[perm],
                              cloud.scales[perm], cloud.opacities[perm],
                              cloud.colors[perm], cloud.features[perm],
                              cloud.provenance[perm])
        out_b = rasterize(cloud_b, CAM, POSE)
        for key in ("color", "depth", "normal", "feature", "alpha",
                    "distortion"):
            assert np.array_equal(getattr(out_a, key), getattr(out_b, key)), key

    def test_render_repeatable_bit_for_bit(self):
        cloud = random_cloud(np.random.default_rng(2), 20)
        out_a = rasterize(cloud, CAM, POSE)
        out_b = rasterize(cloud, CAM, POSE)
        for key in ("color", "depth", "normal", "feature", "alpha",
                    "distortion"):
            assert np.array_equal(getattr(out_a, key), getattr(out_b, key))

    def test_background_compositing_identity(self):
        cloud = single_surfel_cloud(opacity=0.6)
        bg = (0.25, 0.5, 0.75)
        out = rasterize(cloud, CAM, POSE, background=bg)
        recon = out.color - (1 - out.alpha[..., None]) * np.array(bg)
        premult = recon  # foreground contribution
        assert (premult.min() > -1e-9)

    def test_surfel_normal_faces_camera(self):
        out = rasterize(single_surfel_cloud(), CAM, POSE)
        cy, cx = int(CAM.cy), int(CAM.cx)
        n = out.normal[cy, cx]
        assert n[2] < 0  # oriented against the viewing ray


class TestRasterizeGradients:
    def _fd_check(self, cloud, cam, pose, adjoints, params, rel_tol=1e-3,
                  abs_floor=1e-6, h=1e-4):
        got = rasterize_with_grads(cloud, cam, pose, (0.0, 0.0, 0.0), adjoints)

        def loss_at(c):
            out = rasterize(c, cam, pose, background=(0.0, 0.0, 0.0))
            total = 0.0
            for key, adj in adjoints.items():
                total += float((getattr(out, key) * adj).sum())
            return total

        arrays = {
            "position": cloud.positions, "rotation": cloud.rotations,
            "scales": cloud.scales, "opacity": cloud.opacities,
            "color": cloud.colors, "feature": cloud.features,
        }
        for name in params:
            arr = arrays[name]
            grad = got[name]
            it = np.ndindex(arr.shape)
            for idx in it:
                orig = arr[idx]
                arr[idx] = orig + h
                hi = loss_at(cloud)
                arr[idx] = orig - h
                lo = loss_at(cloud)
                arr[idx] = orig
                fd = (hi - lo) / (2 * h)
                err = abs(grad[idx] - fd)
                tol = max(abs_floor, rel_tol * max(abs(fd), abs(grad[idx])))
                assert err <= tol, (name, idx, grad[idx], fd)

    def test_zero_adjoint_zero_gradients(self):
        cloud = random_cloud(np.random.default_rng(3), 5)
        adj = {"color": np.zeros((64, 64, 3))}
        grads = rasterize_with_grads(cloud, CAM, POSE, (0, 0, 0), adj)
        for v in grads.values():
            assert np.allclose(v, 0.0)

    def test_position_gradient_vs_l2_target(self):
        # single-surfel scene, L2 loss against a shifted target
        cloud = single_surfel_cloud(color=(0.9, 0.4, 0.2), opacity=0.8,
                                    scale=0.4)
        target = rasterize(single_surfel_cloud(color=(0.9, 0.4, 0.2),
                                               opacity=0.8, scale=0.4),
                           CAM, POSE).color
        target = np.roll(target, 3, axis=1)

        def l2_and_adj(c):
            out = rasterize(c, CAM, POSE)
            diff = out.color - target
            return float((diff**2).sum()), {"color": 2 * diff}

        base, adj = l2_and_adj(cloud)
        grads = rasterize_with_grads(cloud, CAM, POSE, (0, 0, 0), adj)
        h = 1e-4
        for axis in range(2):
            cloud.positions[0, axis] += h
            hi, _ = l2_and_adj(cloud)
            cloud.positions[0, axis] -= 2 * h
            lo, _ = l2_and_adj(cloud)
            cloud.positions[0, axis] += h
            fd = (hi - lo) / (2 * h)
            assert abs(grads["position"][0, axis] - fd) <= max(
                1e-6, 1e-3 * abs(fd))

    def test_opacity_gradient_sign(self):
        # darker near surfel over a brighter far surfel: raising the near
        # opacity moves the pixel away from the bright target -> positive
        # d(loss)/d(alpha_near) ... i.e. gradient sign must match FD
        near = single_surfel_cloud(color=(0.1, 0.1, 0.1), opacity=0.4, z=1.5,
                                   scale=1.0)
        far = single_surfel_cloud(color=(0.9, 0.9, 0.9), opacity=0.95, z=3.0,
                                  scale=2.0)
        cloud = near.concat(far)
        target = np.full((64, 64, 3), 0.9)

        def loss(c):
            out = rasterize(c, CAM, POSE)
            return float(((out.color - target) ** 2).sum())

        out = rasterize(cloud, CAM, POSE)
        adj = {"color": 2 * (out.color - target)}
        grads = rasterize_with_grads(cloud, CAM, POSE, (0, 0, 0), adj)
        h = 1e-5
        cloud.opacities[0] += h
        hi = loss(cloud)
        cloud.opacities[0] -= 2 * h
        lo = loss(cloud)
        cloud.opacities[0] += h
        fd = (hi - lo) / (2 * h)
        assert fd > 0 and grads["opacity"][0] > 0
        assert abs(grads["opacity"][0] - fd) <= max(1e-6, 1e-3 * abs(fd))

    @pytest.mark.slow
    def test_all_parameter_classes_small_scene(self):
        rng = np.random.default_rng(5)
        cloud = random_cloud(rng, 4)
        adjoints = {
            "color": rng.normal(size=(64, 64, 3)),
            "alpha": rng.normal(size=(64, 64)),
            "depth": rng.normal(size=(64, 64)) * 0.1,
            "normal": rng.normal(size=(64, 64, 3)) * 0.1,
            "feature": rng.normal(size=(64, 64, FDIM)) * 0.1,
            "distortion": rng.normal(size=(64, 64)) * 0.1,
        }
        self._fd_check(cloud, CAM, POSE, adjoints,
                       ["position", "rotation", "scales", "opacity", "color",
                        "feature"], h=1e-6)
