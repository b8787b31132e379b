import json

import numpy as np
import pytest

from scenesmith import fileio
from scenesmith.cameras import Pinhole

from synthetic import box_surface, noisy_floor, room_panorama


@pytest.fixture(scope="session")
def pano_files(tmp_path_factory):
    """Small panorama PNG + D4DD depth pair with a few invalid pixels."""
    root = tmp_path_factory.mktemp("pano")
    frame = room_panorama(64, 32)
    rgb8 = (np.clip(frame.rgb, 0, 1) * 255 + 0.5).astype(np.uint8) / 255.0
    depth = frame.depth.copy().astype(np.float32)
    depth[0, :5] = 0.0  # invalid pixels are skipped by lift
    pano = root / "pano.png"
    d4dd = root / "depth.d4dd"
    fileio.write_png(pano, rgb8)
    fileio.write_depth_raster(d4dd, depth)
    valid = int((depth > 0).sum())
    return {"pano": pano, "depth": d4dd, "valid": valid}


@pytest.fixture(scope="session")
def physics_files(tmp_path_factory):
    """Floor scene PLY, floating box object PLY, and a prior JSON."""
    root = tmp_path_factory.mktemp("physics")
    floor_pc = noisy_floor(extent=0.25, spacing=2e-3)
    box = box_surface(half=(0.15, 0.15, 0.15), samples=10)
    scene_path = root / "scene.ply"
    obj_path = root / "object.ply"
    prior_path = root / "prior.json"
    fileio.save_pointcloud_ply(scene_path, floor_pc)
    fileio.save_pointcloud_ply(obj_path, box)
    prior_path.write_text(json.dumps(
        {"center": [0.0, 0.0, 0.0], "dims": [0.3, 0.3, 0.3], "yaw": 0.0}))
    return {"scene": scene_path, "object": obj_path, "prior": prior_path,
            "root": root}


@pytest.fixture(scope="session")
def surfel_scene_ply(tmp_path_factory):
    """A small trained-free surfel scene PLY plus a camera JSON."""
    from scenesmith.pointcloud import estimate_normals, lift_panorama
    from scenesmith.surfels import save_surfels_ply, surfels_from_points
    from scenesmith.cameras import look_at

    root = tmp_path_factory.mktemp("surfels")
    pc = estimate_normals(lift_panorama(room_panorama(48, 24)), k=8)
    cloud = surfels_from_points(pc, feature_dim=2)
    path = root / "scene_surfels.ply"
    save_surfels_ply(path, cloud)
    cam = Pinhole.from_fov(48, 48, 75.0)
    pose = look_at([0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    cam_path = root / "camera.json"
    cam_path.write_text(json.dumps(
        {"pinhole": cam.to_dict(), "pose": pose.to_dict()}))
    return {"surfels": path, "camera": cam_path, "root": root}
