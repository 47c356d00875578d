"""Camera extrinsics ingestion and scene normalization.

Two sources are supported: COLMAP `images.txt` (world-to-camera quaternion and
translation per image) and a plain JSON pose manifest (world-from-camera,
already ordered). Poses drive three things downstream: the origin transposition
of the environment asset, the gravity vector, and the road spline knots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import EmptyPoseSet, MalformedLine, MalformedManifest
from .splats import SplatScene, apply_rigid_transform
from .transforms import RigidTransform, quat_conjugate, quat_normalize, quat_rotate

UP_CONVENTIONS = ("camera_z_up", "camera_neg_y_up")

DEFAULT_G = 9.81

# camera-frame axis that points "up", per convention
_UP_AXIS_LOCAL = {
    "camera_z_up": np.array([0.0, 0.0, 1.0]),
    "camera_neg_y_up": np.array([0.0, -1.0, 0.0]),
}


@dataclass(frozen=True, eq=False)
class CameraPose:
    position: np.ndarray   # (3,) world, meters
    rotation: np.ndarray   # (4,) unit quaternion, world-from-camera
    up_axis: np.ndarray    # (3,) world-space unit vector of the configured up axis
    label: str
    order_key: int


@dataclass(frozen=True, eq=False)
class PoseSet:
    poses: tuple[CameraPose, ...]
    up_convention: str = "camera_z_up"
    gravity: Optional[np.ndarray] = None  # (3,) m/s^2, set by derive_gravity

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses])

    def up_axes(self) -> np.ndarray:
        return np.array([p.up_axis for p in self.poses])


def _world_up_axis(rotation_wc: np.ndarray, up_convention: str) -> np.ndarray:
    if up_convention not in _UP_AXIS_LOCAL:
        raise ValueError(f"unknown up convention {up_convention!r}")
    up = quat_rotate(rotation_wc, _UP_AXIS_LOCAL[up_convention])
    return up / np.linalg.norm(up)


def parse_colmap(images_path, up_convention: str = "camera_z_up") -> PoseSet:
    """Parse COLMAP text `images.txt` into an ordered PoseSet.

    Image lines carry the world-to-camera rotation q and translation t; the
    camera center is -R^T t and the world-from-camera rotation is q conjugate.
    Poses are sorted lexicographically by image name. Gravity stays unset until
    derive_gravity.
    """
    entries = []
    expect_image_line = True
    with open(str(images_path), "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not expect_image_line:
                # points2D line, content ignored
                expect_image_line = True
                continue
            parts = line.split()
            if len(parts) < 10:
                raise MalformedLine(
                    f"image line needs 10 fields (ID QW QX QY QZ TX TY TZ CAM NAME), got {len(parts)}",
                    lineno,
                )
            try:
                q_wc = np.array([float(v) for v in parts[1:5]])
                t = np.array([float(v) for v in parts[5:8]])
            except ValueError:
                raise MalformedLine(f"non-numeric pose field in {line!r}", lineno)
            name = parts[9]
            q_wc = quat_normalize(q_wc)
            rotation = quat_normalize(quat_conjugate(q_wc))  # world-from-camera
            position = -quat_rotate(rotation, t)             # -R^T t
            entries.append((name, position, rotation))
            expect_image_line = False

    if not entries:
        raise EmptyPoseSet(f"no images found in {images_path}")

    entries.sort(key=lambda e: e[0])
    poses = tuple(
        CameraPose(
            position=pos,
            rotation=rot,
            up_axis=_world_up_axis(rot, up_convention),
            label=name,
            order_key=i,
        )
        for i, (name, pos, rot) in enumerate(entries)
    )
    return PoseSet(poses=poses, up_convention=up_convention)


def parse_pose_json(path, up_convention: str = "camera_z_up") -> PoseSet:
    """Parse the pose-manifest JSON: a list of {label, position, rotation, order}.

    Rotations are world-from-camera (w, x, y, z) and are normalized on load.
    Entries are sorted by `order` with a stable tie-break on label.
    """
    with open(str(path), "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise MalformedManifest(f"invalid JSON: {e}")
    if not isinstance(doc, list):
        raise MalformedManifest("manifest root must be a list of pose entries")
    if not doc:
        raise EmptyPoseSet(f"no poses in {path}")

    parsed = []
    for i, entry in enumerate(doc):
        where = f"entry {i}" + (f" ({entry.get('label')!r})" if isinstance(entry, dict) else "")
        if not isinstance(entry, dict):
            raise MalformedManifest(f"{where}: expected an object")
        for key in ("label", "position", "rotation", "order"):
            if key not in entry:
                raise MalformedManifest(f"{where}: missing key {key!r}")
        try:
            position = np.asarray(entry["position"], dtype=np.float64).reshape(3)
            rotation = np.asarray(entry["rotation"], dtype=np.float64).reshape(4)
            order = int(entry["order"])
            label = str(entry["label"])
        except (TypeError, ValueError) as e:
            raise MalformedManifest(f"{where}: {e}")
        if not np.isfinite(position).all() or not np.isfinite(rotation).all():
            raise MalformedManifest(f"{where}: non-finite pose values")
        if np.linalg.norm(rotation) == 0.0:
            raise MalformedManifest(f"{where}: zero-norm rotation")
        parsed.append((order, label, position, quat_normalize(rotation)))

    parsed.sort(key=lambda e: (e[0], e[1]))
    poses = tuple(
        CameraPose(
            position=pos,
            rotation=rot,
            up_axis=_world_up_axis(rot, up_convention),
            label=label,
            order_key=order,
        )
        for order, label, pos, rot in parsed
    )
    return PoseSet(poses=poses, up_convention=up_convention)


def derive_gravity(poses: PoseSet, g: float = DEFAULT_G) -> PoseSet:
    """Set gravity to -g times the first camera's up axis."""
    if len(poses) == 0:
        raise EmptyPoseSet("cannot derive gravity from an empty pose set")
    up = poses.poses[0].up_axis
    return replace(poses, gravity=-g * (up / np.linalg.norm(up)))


def normalize_scene(scene: SplatScene, poses: PoseSet) -> tuple[SplatScene, PoseSet]:
    """Translate scene and poses so the first camera sits at the origin.

    A pure translation: relative geometry, orientations and up axes are
    unchanged.
    """
    if len(poses) == 0:
        raise EmptyPoseSet("cannot normalize against an empty pose set")
    shift = -poses.poses[0].position
    moved = apply_rigid_transform(scene, RigidTransform.from_translation(shift))
    new_poses = tuple(replace(p, position=p.position + shift) for p in poses.poses)
    return moved, replace(poses, poses=new_poses)
