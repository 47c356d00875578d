"""3D Gaussian splat assets: load, store, transform, crop and persist.

Scenes follow the de-facto splat PLY layout: per-vertex position, DC and
higher-order spherical-harmonic color coefficients, opacity logit, log scales
and a rotation quaternion. Storage is float32; the scene-level rigid transform
is kept lazily and only baked into the primitives when writing to disk.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyScene, InvalidValue, MalformedHeader, MissingField
from .transforms import RigidTransform, quat_normalize

# f_rest coefficient count per SH degree (3 channels, degrees 0..3)
_F_REST_TO_DEGREE = {0: 0, 9: 1, 24: 2, 45: 3}
_DEGREE_TO_COEFFS = {0: 1, 1: 4, 2: 9, 3: 16}

_PLY_TYPES = {
    "float": ("<f4", 4),
    "float32": ("<f4", 4),
    "double": ("<f8", 8),
    "float64": ("<f8", 8),
    "uchar": ("<u1", 1),
    "uint8": ("<u1", 1),
    "char": ("<i1", 1),
    "int8": ("<i1", 1),
    "short": ("<i2", 2),
    "int16": ("<i2", 2),
    "ushort": ("<u2", 2),
    "uint16": ("<u2", 2),
    "int": ("<i4", 4),
    "int32": ("<i4", 4),
    "uint": ("<u4", 4),
    "uint32": ("<u4", 4),
}


@dataclass(frozen=True, eq=False)
class Gaussian:
    """A single splat primitive (convenience view; scenes store arrays)."""

    mean: np.ndarray          # (3,) scene units
    scale_log: np.ndarray     # (3,) log of per-axis std-dev
    rotation: np.ndarray      # (4,) unit quaternion (w, x, y, z)
    opacity_logit: float
    sh: np.ndarray            # (K, 3) SH coefficients, row 0 is f_dc


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned box with closed bounds."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64).reshape(3))
        if np.any(self.min > self.max):
            raise ValueError("Aabb min must be <= max componentwise")

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return np.all((points >= self.min) & (points <= self.max), axis=-1)


@dataclass(frozen=True, eq=False)
class SplatScene:
    """A splat asset: primitive arrays plus a lazy scene-level rigid transform."""

    means: np.ndarray           # (N, 3) float32, local frame
    scales_log: np.ndarray      # (N, 3) float32
    rotations: np.ndarray       # (N, 4) float32 unit quaternions
    opacity_logits: np.ndarray  # (N,) float32
    sh: np.ndarray              # (N, K, 3) float32, K in {1, 4, 9, 16}
    sh_degree: int
    local_to_world: RigidTransform
    source_path: str = ""

    def __len__(self) -> int:
        return self.means.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i].copy(),
            scale_log=self.scales_log[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(),
        )

    def world_means(self) -> np.ndarray:
        """Primitive means mapped through local_to_world, float64."""
        if self.local_to_world.is_identity():
            return self.means.astype(np.float64)
        return self.local_to_world.apply_points(self.means)

    def with_transform(self, t: RigidTransform) -> "SplatScene":
        """Same primitives with local_to_world replaced (not composed)."""
        return replace(self, local_to_world=t)


def _infer_degree(f_rest_count: int) -> int:
    if f_rest_count not in _F_REST_TO_DEGREE:
        raise MalformedHeader(
            f"unsupported f_rest property count {f_rest_count}; expected one of 0/9/24/45"
        )
    return _F_REST_TO_DEGREE[f_rest_count]


def _required_fields(f_rest_count: int) -> list[str]:
    fields = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    fields += [f"f_rest_{i}" for i in range(f_rest_count)]
    fields += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return fields


def _parse_header(fh) -> tuple[str, int, list[tuple[str, str]]]:
    """Returns (format, vertex_count, [(name, type), ...]) for the vertex element."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise MalformedHeader("not a PLY file (missing 'ply' magic)")
    fmt = None
    vertex_count = None
    properties: list[tuple[str, str]] = []
    in_vertex_element = False
    while True:
        raw = fh.readline()
        if not raw:
            raise MalformedHeader("unexpected EOF in header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith("comment"):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise MalformedHeader(f"unsupported PLY format: {line}")
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex_element = parts[1] == "vertex"
            if in_vertex_element:
                try:
                    vertex_count = int(parts[2])
                except (IndexError, ValueError):
                    raise MalformedHeader(f"bad element line: {line}")
        elif parts[0] == "property" and in_vertex_element:
            if parts[1] == "list":
                raise MalformedHeader("list properties are not supported on vertices")
            if len(parts) != 3:
                raise MalformedHeader(f"bad property line: {line}")
            if parts[1] not in _PLY_TYPES:
                raise MalformedHeader(f"unknown property type {parts[1]!r}")
            properties.append((parts[2], parts[1]))
    if fmt is None:
        raise MalformedHeader("missing format line")
    if vertex_count is None:
        raise MalformedHeader("missing vertex element")
    return fmt, vertex_count, properties


def load_splat_ply(path) -> SplatScene:
    """Load a splat PLY (ascii or binary little-endian).

    One Gaussian per vertex; rotations are normalized on load and
    local_to_world starts as identity. The SH degree is inferred from the
    number of f_rest properties.
    """
    path = str(path)
    with open(path, "rb") as fh:
        fmt, count, properties = _parse_header(fh)
        names = [name for name, _ in properties]
        f_rest_count = sum(1 for n in names if n.startswith("f_rest_"))
        degree = _infer_degree(f_rest_count)
        for field in _required_fields(f_rest_count):
            if field not in names:
                raise MissingField(field)

        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, _PLY_TYPES[typ][0]) for name, typ in properties])
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise MalformedHeader(
                    f"truncated vertex data: expected {dtype.itemsize * count} bytes"
                )
            data = np.frombuffer(raw, dtype=dtype, count=count)
        else:
            text = fh.read().decode("ascii")
            rows = [ln.split() for ln in text.splitlines() if ln.strip()]
            if len(rows) < count:
                raise MalformedHeader(f"expected {count} ascii vertex rows, found {len(rows)}")
            arr = np.array(rows[:count], dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(count, -1)
            if arr.shape[1] != len(properties):
                raise MalformedHeader(
                    f"ascii row has {arr.shape[1]} values, header lists {len(properties)}"
                )
            data = {name: arr[:, i] for i, (name, _) in enumerate(properties)}

    def col(name):
        return np.asarray(data[name], dtype=np.float32)

    means = np.stack([col("x"), col("y"), col("z")], axis=1)
    scales = np.stack([col("scale_0"), col("scale_1"), col("scale_2")], axis=1)
    rots = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    opacity = col("opacity")

    n_coeffs = _DEGREE_TO_COEFFS[degree]
    sh = np.zeros((count, n_coeffs, 3), dtype=np.float32)
    sh[:, 0, 0] = col("f_dc_0")
    sh[:, 0, 1] = col("f_dc_1")
    sh[:, 0, 2] = col("f_dc_2")
    if f_rest_count:
        rest = np.stack([col(f"f_rest_{i}") for i in range(f_rest_count)], axis=1)
        # file layout is planar per channel: all R coeffs, then G, then B
        per_channel = f_rest_count // 3
        sh[:, 1:, :] = rest.reshape(count, 3, per_channel).transpose(0, 2, 1)

    for name, arr in (("mean", means), ("scale", scales), ("rotation", rots),
                      ("opacity", opacity), ("sh", sh.reshape(count, -1))):
        bad = ~np.isfinite(arr if arr.ndim > 1 else arr[:, None])
        if bad.any():
            vertex = int(np.nonzero(bad.any(axis=1))[0][0])
            raise InvalidValue(f"non-finite {name} value", vertex)

    if count:
        rots = quat_normalize(rots).astype(np.float32)

    return SplatScene(
        means=means,
        scales_log=scales,
        rotations=rots,
        opacity_logits=opacity,
        sh=sh,
        sh_degree=degree,
        local_to_world=RigidTransform.identity(),
        source_path=path,
    )


def save_splat_ply(scene: SplatScene, path) -> None:
    """Write a binary little-endian splat PLY.

    The scene transform is baked into means and rotation quaternions before
    writing (scales are invariant under rigid motion), so the file always
    round-trips through load_splat_ply with an identity transform.
    """
    n = len(scene)
    if scene.local_to_world.is_identity():
        means = scene.means.astype(np.float32)
        rots = scene.rotations.astype(np.float32)
    else:
        means = scene.local_to_world.apply_points(scene.means).astype(np.float32)
        rots = quat_normalize(
            scene.local_to_world.apply_quats(scene.rotations)
        ).astype(np.float32)

    per_channel = {0: 0, 1: 3, 2: 8, 3: 15}[scene.sh_degree]
    f_rest_count = per_channel * 3
    names = _required_fields(f_rest_count)

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")

    out = np.empty((n, len(names)), dtype=np.float32)
    out[:, 0:3] = means
    out[:, 3:6] = scene.sh[:, 0, :]
    if f_rest_count:
        out[:, 6:6 + f_rest_count] = (
            scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, f_rest_count)
        )
    base = 6 + f_rest_count
    out[:, base] = scene.opacity_logits
    out[:, base + 1:base + 4] = scene.scales_log
    out[:, base + 4:base + 8] = rots

    with open(str(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(out.tobytes())


def crop_scene(scene: SplatScene, box: Aabb) -> SplatScene:
    """Keep exactly the gaussians whose world-space mean lies inside `box`.

    Bounds are closed; primitive order is preserved. The covariance extent is
    ignored: a gaussian straddling the box boundary is kept iff its mean is in.
    """
    keep = box.contains(scene.world_means())
    return replace(
        scene,
        means=scene.means[keep],
        scales_log=scene.scales_log[keep],
        rotations=scene.rotations[keep],
        opacity_logits=scene.opacity_logits[keep],
        sh=scene.sh[keep],
    )


def compute_bounds(scene: SplatScene) -> Aabb:
    """Tight axis-aligned box over world-space means (3-sigma extent excluded)."""
    if len(scene) == 0:
        raise EmptyScene("cannot compute bounds of an empty scene")
    w = scene.world_means()
    return Aabb(w.min(axis=0), w.max(axis=0))


def apply_rigid_transform(scene: SplatScene, t: RigidTransform) -> SplatScene:
    """Compose `t` with the scene transform; primitive records stay untouched."""
    return replace(scene, local_to_world=t.compose(scene.local_to_world))
