"""splatsim: a headless driving simulator on 3D Gaussian splat assets."""

from .env import DrivingEnv, EpisodeResult, Observation, PoseSource, RenderSettings, ScenarioConfig
from .physics import Controls, Obb, VehicleConfig, VehicleState, sat_obb_overlap, step_fixed
from .poses import PoseSet, derive_gravity, normalize_scene, parse_colmap, parse_pose_json
from .render import Framebuffer, PinholeCamera, eval_sh, project_gaussian, render, render_to_png
from .rl import PolicyParams, PpoConfig, compute_gae, evaluate, ppo_update, train
from .splats import (
    Aabb,
    Gaussian,
    SplatScene,
    apply_rigid_transform,
    compute_bounds,
    crop_scene,
    load_splat_ply,
    save_splat_ply,
)
from .track import RoadSpline, Track, TrackConfig, build_spline, export_track, place_blocks
from .transforms import RigidTransform

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "Controls",
    "DrivingEnv",
    "EpisodeResult",
    "Framebuffer",
    "Gaussian",
    "Obb",
    "Observation",
    "PinholeCamera",
    "PolicyParams",
    "PoseSet",
    "PoseSource",
    "PpoConfig",
    "RenderSettings",
    "RigidTransform",
    "RoadSpline",
    "ScenarioConfig",
    "SplatScene",
    "Track",
    "TrackConfig",
    "VehicleConfig",
    "VehicleState",
    "apply_rigid_transform",
    "build_spline",
    "compute_bounds",
    "compute_gae",
    "crop_scene",
    "derive_gravity",
    "eval_sh",
    "evaluate",
    "export_track",
    "load_splat_ply",
    "normalize_scene",
    "parse_colmap",
    "parse_pose_json",
    "place_blocks",
    "ppo_update",
    "project_gaussian",
    "render",
    "render_to_png",
    "sat_obb_overlap",
    "save_splat_ply",
    "step_fixed",
    "train",
]
