"""Panorama-to-surfel scene engine.

Pipeline stages: lift a panoramic RGB-D frame to a point cloud, reconstruct
a 2D Gaussian surfel scene against base and augmented views, composite
objects with physics-aware pose optimization, and export multi-view
trajectory/heatmap/entity conditioning bundles for video generators.
"""

from .cameras import (CameraRing, Pinhole, RigidPose, direction_to_pixel,
                      look_at, outward_cameras, pinhole_project,
                      pixel_to_direction, ring_cameras)
from .compose import (PhysicsConfig, PoseParams, PosePrior, apply_pose,
                      collision_loss, fuse, gravity_loss, optimize_pose,
                      physics_loss, place_initial, scale_to_prior)
from .conditioning import (ConditioningBundle, Trajectory3D, ViewTrack,
                           build_bundle, export_bundle, gaussian_heatmap,
                           import_bundle, kmeans_parts, pool_entity,
                           project_trajectory)
from .errors import (BehindCameraError, DivergenceError, InputFormatError,
                     NoFloorError)
from .pointcloud import (EquirectFrame, FloorPlane, PointCloud,
                         depth_gradient_mask, detect_floor, estimate_normals,
                         lift_panorama, nearest_within)
from .rasterizer import RenderOutput, rasterize, rasterize_with_grads
from .surfels import (Surfel, SurfelCloud, build_covariance, flatten_2d,
                      gaussian_weight, project_covariance,
                      surfels_from_points)
from .training import (AugView, BaseView, TrainConfig, ViewSet, loss_aug,
                       loss_base, loss_distill, refine_composite,
                       train_scene)
from .viewsynth import (SynthView, augment_views, content_fill,
                        render_points, uncertainty_map, with_uncertainty)

__version__ = "0.1.0"
