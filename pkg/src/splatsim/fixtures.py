"""Procedural test scenes: pose manifests and box-splat assets.

Everything here is synthetic and seed-deterministic so the full pipeline
(ingest, track, physics, rendering, training) runs without any captured data.
Cameras follow the CV convention (+z forward, +y down), so manifests pair with
up_convention "camera_neg_y_up".
"""

from __future__ import annotations

import json

import numpy as np

from .splats import SplatScene, save_splat_ply
from .transforms import RigidTransform, matrix_to_quat

CAMERA_HEIGHT = 1.5  # capture rig height above the road surface


def _look_rotation(forward: np.ndarray, world_up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera quaternion for a CV camera looking along `forward`."""
    z = np.asarray(forward, dtype=np.float64)
    z = z / np.linalg.norm(z)
    up = np.asarray(world_up, dtype=np.float64)
    y = -(up - np.dot(up, z) * z)
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return matrix_to_quat(np.column_stack([x, y, z]))


def straight_path_points(length: float = 40.0, spacing: float = 2.0) -> np.ndarray:
    n = int(round(length / spacing)) + 1
    pts = np.zeros((n, 3))
    pts[:, 0] = np.arange(n) * spacing
    pts[:, 2] = CAMERA_HEIGHT
    return pts


def l_path_points(leg: float = 30.0, turn_radius: float = 12.0, spacing: float = 2.0) -> np.ndarray:
    """Straight leg along +x, a 90-degree right turn, then a leg along -y."""
    pts = [np.array([x, 0.0, CAMERA_HEIGHT]) for x in np.arange(0.0, leg + 1e-9, spacing)]
    center = np.array([leg, -turn_radius, CAMERA_HEIGHT])
    arc_len = 0.5 * np.pi * turn_radius
    n_arc = max(int(round(arc_len / spacing)), 2)
    for i in range(1, n_arc + 1):
        ang = 0.5 * np.pi * i / n_arc
        pts.append(center + turn_radius * np.array([np.sin(ang), np.cos(ang), 0.0]))
    end = pts[-1]
    for d in np.arange(spacing, leg + 1e-9, spacing):
        pts.append(end + np.array([0.0, -d, 0.0]))
    return np.array(pts)


def write_pose_manifest(points: np.ndarray, path) -> None:
    """Camera at each point, looking toward the next (last copies previous)."""
    n = len(points)
    entries = []
    for i in range(n):
        j = min(i + 1, n - 1)
        k = j - 1 if j == i else i
        fwd = points[j] - points[k]
        rot = _look_rotation(fwd)
        entries.append(
            {
                "label": f"frame_{i:05d}.png",
                "position": [float(v) for v in points[i]],
                "rotation": [float(v) for v in rot],
                "order": i,
            }
        )
    with open(str(path), "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=1)


def _make_scene(means, scales, colors, opacity_logit=4.0) -> SplatScene:
    n = len(means)
    rotations = np.zeros((n, 4), dtype=np.float32)
    rotations[:, 0] = 1.0
    sh = np.zeros((n, 1, 3), dtype=np.float32)
    # f_dc such that eval_sh at degree 0 lands near the requested color
    sh[:, 0, :] = (np.asarray(colors, dtype=np.float64) - 0.5) / 0.28209479177387814
    return SplatScene(
        means=np.asarray(means, dtype=np.float32),
        scales_log=np.log(np.asarray(scales, dtype=np.float64)).astype(np.float32),
        rotations=rotations,
        opacity_logits=np.full(n, opacity_logit, dtype=np.float32),
        sh=sh,
        sh_degree=0,
        local_to_world=RigidTransform.identity(),
        source_path="<procedural>",
    )


def make_environment_scene(path_points: np.ndarray, seed: int = 0,
                           density: float = 1.0, road_drop: float = 0.75) -> SplatScene:
    """Corridor environment: a gray road carpet plus colored roadside blobs.

    The visual road sits `road_drop` below the capture path, matching where
    the invisible collider track puts the physical road for the default
    vehicle. `density` scales the splat count (bench scaling runs).
    """
    rng = np.random.default_rng(seed)
    means, scales, colors = [], [], []
    road_z = CAMERA_HEIGHT - road_drop

    seg = np.diff(path_points, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)

    def along_path(n):
        t = rng.uniform(0.0, len(seg), n)
        idx = np.minimum(t.astype(int), len(seg) - 1)
        base = path_points[idx] + (t - idx)[:, None] * seg[idx]
        fwd = seg[idx] / seg_len[idx][:, None]
        left = np.cross(np.array([0.0, 0.0, 1.0]), fwd)
        return base, left

    n_road = max(int(40 * len(path_points) * density), 8)
    base, left = along_path(n_road)
    road = base + rng.uniform(-4.0, 4.0, n_road)[:, None] * left
    road[:, 2] = road_z + rng.uniform(-0.03, 0.03, n_road)
    means.append(road)
    scales.append(np.column_stack([rng.uniform(0.3, 0.6, n_road),
                                   rng.uniform(0.3, 0.6, n_road),
                                   rng.uniform(0.02, 0.05, n_road)]))
    shade = rng.uniform(0.25, 0.45, n_road)
    colors.append(np.column_stack([shade, shade, shade]))

    n_side = max(int(24 * len(path_points) * density), 8)
    base, left = along_path(n_side)
    side = rng.choice([-1.0, 1.0], n_side)
    offset = rng.uniform(5.0, 10.0, n_side)
    blobs = base + (side * offset)[:, None] * left
    blobs[:, 2] = road_z + rng.uniform(0.2, 3.0, n_side)
    means.append(blobs)
    scales.append(rng.uniform(0.15, 0.45, (n_side, 3)))
    colors.append(rng.uniform(0.2, 0.95, (n_side, 3)))

    return _make_scene(
        np.concatenate(means), np.concatenate(scales), np.concatenate(colors),
        opacity_logit=1.5,
    )


def make_vehicle_scene(half_extents=(2.2, 0.9, 0.75), color=(0.8, 0.1, 0.1),
                       seed: int = 1, n: int = 240) -> SplatScene:
    """Car-shaped splat blob: points on the surface of a box, forward +x, up +z."""
    rng = np.random.default_rng(seed)
    he = np.asarray(half_extents, dtype=np.float64)
    pts = rng.uniform(-1.0, 1.0, (n, 3))
    face = rng.integers(0, 3, n)
    sign = rng.choice([-1.0, 1.0], n)
    pts[np.arange(n), face] = sign
    means = pts * he
    scales = np.full((n, 3), 0.12)
    base = np.asarray(color, dtype=np.float64)
    colors = np.clip(base + rng.normal(0.0, 0.05, (n, 3)), 0.05, 0.95)
    return _make_scene(means, scales, colors)


def generate_fixture_set(out_dir, scene: str = "straight", seed: int = 0,
                         density: float = 1.0) -> dict:
    """Write poses + environment/ego/agent PLYs for one synthetic scene.

    Returns the asset paths, ready to drop into a simulator config.
    """
    import os

    os.makedirs(str(out_dir), exist_ok=True)
    if scene == "straight":
        points = straight_path_points()
    elif scene == "turn":
        points = l_path_points()
    else:
        raise ValueError(f"unknown fixture scene {scene!r}; pick 'straight' or 'turn'")

    paths = {
        "poses": f"{out_dir}/{scene}_poses.json",
        "environment": f"{out_dir}/{scene}_env.ply",
        "ego": f"{out_dir}/ego.ply",
        "agent": f"{out_dir}/agent.ply",
    }
    write_pose_manifest(points, paths["poses"])
    save_splat_ply(make_environment_scene(points, seed=seed, density=density),
                   paths["environment"])
    save_splat_ply(make_vehicle_scene(color=(0.8, 0.1, 0.1), seed=seed + 1), paths["ego"])
    save_splat_ply(make_vehicle_scene(color=(0.1, 0.2, 0.8), seed=seed + 2), paths["agent"])
    return paths
