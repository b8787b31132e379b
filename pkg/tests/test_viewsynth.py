import numpy as np
import pytest

from scenesmith.cameras import Pinhole, RigidPose, backproject_pixel, look_at
from scenesmith.pointcloud import PointCloud, estimate_normals, lift_panorama
from scenesmith.viewsynth import (UNCERTAINTY_THRESHOLD, augment_views,
                                  content_fill, render_points,
                                  uncertain_from_similarity, uncertainty_map,
                                  with_uncertainty)

from synthetic import room_panorama, step_scene


def _single_point_cloud(z=2.0):
    return PointCloud(positions=np.array([[0.0, 0.0, z]]),
                      colors=np.array([[0.2, 0.9, 0.4]]))


class TestRenderPoints:
    def test_optical_axis_disc(self):
        cam = Pinhole.from_fov(64, 64)
        view = render_points(_single_point_cloud(), cam, RigidPose.identity(),
                             splat_px=2)
        cy, cx = int(cam.cy), int(cam.cx)
        assert view.depth[cy, cx] == 2.0
        assert np.allclose(view.rgb[cy, cx], [0.2, 0.9, 0.4])
        assert view.hole_mask[cy, cx] == 0
        assert view.depth[cy, cx + 2] == 2.0   # inside the disc
        assert view.depth[cy, cx + 3] == 0.0   # outside

    def test_z_buffer_prefers_nearer(self):
        pc = PointCloud(positions=np.array([[0, 0, 1.0], [0, 0, 3.0]]),
                        colors=np.array([[1.0, 0, 0], [0, 1.0, 0]]))
        cam = Pinhole.from_fov(32, 32)
        view = render_points(pc, cam, RigidPose.identity())
        assert np.allclose(view.rgb[16, 16], [1, 0, 0])
        assert view.depth[16, 16] == 1.0
        assert view.point_index[16, 16] == 0

    def test_empty_cloud_all_holes(self):
        pc = PointCloud(positions=np.zeros((0, 3)), colors=np.zeros((0, 3)))
        cam = Pinhole.from_fov(16, 16)
        view = render_points(pc, cam, RigidPose.identity())
        assert view.hole_mask.all()
        assert (view.depth == 0).all()

    def test_depth_backprojection_consistency(self):
        # every covered pixel back-projects near some source point
        pc = lift_panorama(room_panorama(96, 48))
        cam = Pinhole.from_fov(48, 48, 90.0)
        pose = look_at([0, 0, 0], [0, 0, 1])
        splat = 2
        view = render_points(pc, cam, pose, splat_px=splat)
        ys, xs = np.nonzero(view.hole_mask == 0)
        world = backproject_pixel(xs, ys, view.depth[ys, xs], cam, pose)
        src = pc.positions[view.point_index[ys, xs]]
        # splat_px-equivalent world distance at the pixel's depth
        allowed = (splat + 1) * view.depth[ys, xs] / cam.fx + 1e-9
        dist = np.linalg.norm(world - src, axis=1)
        assert (dist <= allowed).all()


class TestAugmentViews:
    def test_zero_offset_is_identity(self):
        pc = lift_panorama(room_panorama(64, 32))
        cam = Pinhole.from_fov(32, 32, 90.0)
        base = look_at([0, 0, 0], [0, 0, 1])
        view = render_points(pc, cam, base)
        aug = augment_views(pc, cam, base, [[0.0, 0.0, 0.0]])[0]
        assert np.array_equal(aug.rgb, view.rgb)
        assert np.array_equal(aug.depth, view.depth)

    def test_offsets_grow_holes_on_room(self):
        pc = lift_panorama(room_panorama(128, 64))
        cam = Pinhole.from_fov(48, 48, 90.0)
        base = look_at([0, 0, 0], [0, 0, 1])
        base_holes = render_points(pc, cam, base).hole_mask.sum()
        views = augment_views(pc, cam, base, [[0.1, 0, 0], [-0.1, 0, 0]])
        assert len(views) == 2
        for v in views:
            assert v.hole_mask.sum() >= base_holes

    def test_default_count(self):
        pc = lift_panorama(room_panorama(32, 16))
        cam = Pinhole.from_fov(16, 16, 90.0)
        base = look_at([0, 0, 0], [0, 0, 1])
        from scenesmith.viewsynth import default_offsets

        assert len(augment_views(pc, cam, base, default_offsets(pc))) == 4

    def test_orientation_unchanged(self):
        pc = _single_point_cloud()
        cam = Pinhole.from_fov(16, 16)
        base = look_at([0.3, 0.2, -1.0], [0, 0, 1])
        aug = augment_views(pc, cam, base, [[0.05, 0.0, 0.0]])[0]
        assert np.array_equal(aug.camera[1].rotation, base.rotation)
        assert np.allclose(aug.camera[1].center, base.center + [0.05, 0, 0])


class TestUncertainty:
    def test_fronto_parallel_plane_certain(self):
        n = 64
        cam = Pinhole.from_fov(n, n, 60.0)
        uu, vv = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
        z = np.full((n, n), 2.0)
        pts = np.stack([(uu - cam.cx) / cam.fx * z, (vv - cam.cy) / cam.fy * z,
                        z], axis=-1).reshape(-1, 3)
        pc = PointCloud(positions=pts, colors=np.zeros_like(pts),
                        normals=np.tile([0, 0, -1.0], (len(pts), 1)))
        view = render_points(pc, cam, RigidPose.identity(), splat_px=2)
        sim, mask = uncertainty_map(view, pc)
        interior = np.zeros((n, n), dtype=bool)
        interior[8:-8, 8:-8] = True
        assert sim[interior].min() > 0.99
        assert mask[interior].sum() == 0

    def test_threshold_boundary(self):
        sim = np.array([[0.749, 0.751]])
        mask = uncertain_from_similarity(sim)
        assert mask[0, 0] == 1 and mask[0, 1] == 0

    def test_step_scene_discontinuity_masked(self):
        pc, cam = step_scene(64, 64)
        view = render_points(pc, cam, RigidPose.identity(), splat_px=2)
        sim, mask = uncertainty_map(view, pc)
        mid = 32
        # interiors are certain, the step band is masked
        assert mask[10:-10, 6:mid - 6].sum() == 0
        assert mask[10:-10, mid + 6:-6].sum() == 0
        assert mask[10:-10, mid - 3:mid + 3].any()

    def test_missing_normals_rejected(self):
        pc = _single_point_cloud()
        cam = Pinhole.from_fov(16, 16)
        view = render_points(pc, cam, RigidPose.identity())
        with pytest.raises(ValueError):
            uncertainty_map(view, pc)

    def test_uncertain_superset_of_holes(self):
        pc = estimate_normals(lift_panorama(room_panorama(48, 24)), k=8)
        cam = Pinhole.from_fov(32, 32, 90.0)
        view = render_points(pc, cam, look_at([0, 0, 0], [0, 0, 1]))
        _, mask = uncertainty_map(view, pc)
        assert (mask.astype(bool) | ~view.hole_mask.astype(bool)).all()

    def test_with_uncertainty_zero_on_holes(self):
        pc = estimate_normals(lift_panorama(room_panorama(48, 24)), k=8)
        cam = Pinhole.from_fov(32, 32, 90.0)
        view = with_uncertainty(
            render_points(pc, cam, look_at([0, 0, 0], [0, 0, 1])), pc)
        assert (view.uncertainty[view.hole_mask.astype(bool)] == 0).all()
        assert view.uncertainty.min() >= 0 and view.uncertainty.max() <= 1


class TestContentFill:
    def test_empty_mask_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((12, 12, 3))
        out = content_fill(img, np.zeros((12, 12)))
        assert np.array_equal(out, img)

    def test_single_pixel_constant_boundary(self):
        img = np.full((9, 9, 3), 0.37)
        mask = np.zeros((9, 9))
        mask[4, 4] = 1
        out = content_fill(img, mask)
        assert np.abs(out[4, 4] - 0.37).max() < 1e-6

    def test_unmasked_bit_identical(self):
        rng = np.random.default_rng(1)
        img = rng.random((16, 16, 3))
        mask = np.zeros((16, 16))
        mask[5:9, 6:11] = 1
        out = content_fill(img, mask)
        keep = mask == 0
        assert np.array_equal(out[keep], img[keep])

    def test_maximum_principle(self):
        rng = np.random.default_rng(2)
        img = rng.random((20, 20, 3))
        mask = np.zeros((20, 20))
        mask[3:9, 3:9] = 1
        mask[12:18, 10:19] = 1
        out = content_fill(img, mask)
        from scipy import ndimage

        labels, n = ndimage.label(mask.astype(bool))
        for comp in range(1, n + 1):
            ring = ndimage.binary_dilation(labels == comp) & (mask == 0)
            lo = img[ring].min(axis=0) - 1e-9
            hi = img[ring].max(axis=0) + 1e-9
            vals = out[labels == comp]
            assert (vals >= lo).all() and (vals <= hi).all()

    def test_fully_masked_rejected(self):
        with pytest.raises(ValueError):
            content_fill(np.zeros((4, 4, 3)), np.ones((4, 4)))

    def test_grayscale_supported(self):
        img = np.linspace(0, 1, 64).reshape(8, 8)
        mask = np.zeros((8, 8))
        mask[4, 4] = 1
        out = content_fill(img, mask)
        assert out.shape == (8, 8)
        assert abs(out[4, 4] - img[4, 4]) < 0.1
