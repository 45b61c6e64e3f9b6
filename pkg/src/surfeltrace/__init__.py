"""Emission-aware 2D Gaussian surfel toolkit.

Reconstruction and rendering of indoor scenes as planar Gaussian primitives:
ray-traced alpha compositing, differentiable radiant reconstruction, albedo
recovery against a radiance cache, multi-bounce path tracing, light baking,
declarative editing, and bit-exact file formats.
"""

from .autodiff import GradientSet, backward_trace, raw_adjoints_from_normalized
from .bvh import Bvh, Scene, build_accel
from .camera import Camera, cosine_direction, cosine_sample, pixel_ray, project
from .editing import (EditOp, EditScript, RigidTransform, Selection,
                      apply_edits, make_sphere_emitter, select_all,
                      select_box, select_sphere, threshold_emission_mask)
from .errors import (FormatError, GenerationError, InvalidInputError,
                     NumericFailure)
from .formats import (DatasetManifest, PsnrResult, ViewRecord, image_read,
                      image_write, linear_to_srgb, mask_read, mask_write,
                      metrics_psnr, preview_write, scene_read, scene_write,
                      snap_to_storage)
from .gaussians import (DEFAULT_R_CUT, Frame, Gaussian2D, GaussianCloud, Ray,
                        frame_from_quaternion, intersect, response)
from .losses import (LossWeights, loss_color, loss_distance_normal,
                     loss_emission, loss_normal, pq_decode, pq_derivative,
                     pq_encode, ssim)
from .rng import RngStream, py_key_uniform
from .synthetic import (BoxSpec, BoxTruth, compute_radiance_cache,
                        gen_box_scene, gen_dataset, gen_views, load_views,
                        oracle_parallel_planes, orbit_cameras)
from .tracer import (TraceResult, normalize_aggregates, trace, trace_brute,
                     trace_rows)
from .training import (TrainConfig, TrainView, bake_radiance,
                       init_cloud_from_points, stage0_train,
                       stage1_recover_albedo)
from .transport import (ImageBuffer, RenderConfig, denoise, path_trace_pixel,
                        render_path_traced, render_radiant,
                        render_single_bounce, shade_single_bounce)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
