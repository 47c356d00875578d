"""Deterministic CPU rasterizer for Gaussian splat scenes.

Pipeline per frame: every gaussian of every scene is projected to a 2D
screen-space gaussian (EWA: cov2d = J W Sigma W^T J^T plus a 0.3-pixel
low-pass), colored by evaluating its spherical harmonics with the view
direction in the owning scene's local frame, depth-sorted globally, binned
into 16x16 pixel tiles by its 3-sigma footprint and composited front to back.

A gaussian contributes to a pixel iff the pixel center lies inside its
3-sigma ellipse (squared Mahalanobis distance <= 9); compositing accumulates
w_i = alpha_i * G_i * T_i with T <- T * (1 - alpha_i * G_i) and stops once
T < 1/255. Pixel (ix, iy) samples at (ix + 0.5, iy + 0.5). The whole pass is
single-threaded numpy, so output is bit-stable for fixed input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidDegree
from .splats import SplatScene
from .transforms import RigidTransform, quat_to_matrix, quats_to_matrices

TILE = 16
FOOTPRINT_SIGMA = 3.0
MAHA_CUTOFF = FOOTPRINT_SIGMA * FOOTPRINT_SIGMA
TERMINATION_T = 1.0 / 255.0
COV2D_LOWPASS = 0.3

# real spherical harmonics constants, degrees 0..3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """Pinhole intrinsics plus a world-from-camera rigid transform.

    Camera frame: +z forward, +x right, +y down (image rows grow along +y).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: RigidTransform
    near: float = 0.05

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    @staticmethod
    def from_fov(width: int, height: int, fov_x_deg: float,
                 world_from_camera: RigidTransform, near: float = 0.05) -> "PinholeCamera":
        f = width / (2.0 * np.tan(np.deg2rad(fov_x_deg) / 2.0))
        return PinholeCamera(
            fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
            width=width, height=height,
            world_from_camera=world_from_camera, near=near,
        )


@dataclass(frozen=True, eq=False)
class ProjectedSplat:
    mean2d: np.ndarray   # (2,) pixels
    cov2d: np.ndarray    # (2, 2) pixels^2, positive definite
    color: np.ndarray    # (3,) in [0, 1]
    alpha: float
    depth: float         # camera-space z


@dataclass(eq=False)
class Framebuffer:
    rgb: np.ndarray            # (H, W, 3) in [0, 1]
    transmittance: np.ndarray  # (H, W) in [0, 1]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


def eval_sh(sh: np.ndarray, view_dir_local: np.ndarray, degree: int) -> np.ndarray:
    """View-dependent RGB from SH coefficients: clamp(0.5 + sum basis*coeff).

    `sh` is (K, 3) or (N, K, 3); `view_dir_local` is a matching unit direction
    (or batch) expressed in the asset's local frame.
    """
    sh = np.asarray(sh, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
        view_dir_local = np.asarray(view_dir_local, dtype=np.float64)[None]
    if degree < 0 or degree > 3:
        raise InvalidDegree(f"degree must be in 0..3, got {degree}")
    needed = (degree + 1) ** 2
    if sh.shape[1] < needed:
        raise InvalidDegree(
            f"degree {degree} needs {needed} coefficients, scene stores {sh.shape[1]}"
        )
    d = np.asarray(view_dir_local, dtype=np.float64)
    x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]

    rgb = SH_C0 * sh[:, 0]
    if degree >= 1:
        rgb = rgb - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        rgb = (
            rgb
            + SH_C2[0] * xy * sh[:, 4]
            + SH_C2[1] * yz * sh[:, 5]
            + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
            + SH_C2[3] * xz * sh[:, 7]
            + SH_C2[4] * (xx - yy) * sh[:, 8]
        )
    if degree >= 3:
        rgb = (
            rgb
            + SH_C3[0] * y * (3.0 * xx - yy) * sh[:, 9]
            + SH_C3[1] * xy * z * sh[:, 10]
            + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, 11]
            + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, 12]
            + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, 14]
            + SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, 15]
        )
    rgb = np.clip(rgb + 0.5, 0.0, 1.0)
    return rgb[0] if single else rgb


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(eq=False)
class _ProjectedBatch:
    """Flat arrays of visible splats, globally depth-sorted."""

    mean2d: np.ndarray      # (N, 2)
    conic: np.ndarray       # (N, 3): inverse cov2d entries (a, b, c)
    color: np.ndarray       # (N, 3)
    alpha: np.ndarray       # (N,)
    depth: np.ndarray       # (N,)
    bbox: np.ndarray        # (N, 4): x0, y0, x1, y1 pixel bounds (inclusive)


def _project_scene(scene: SplatScene, cam: PinholeCamera):
    """Vectorized projection of one scene; returns per-splat arrays + keep mask."""
    n = len(scene)
    if n == 0:
        return None

    cam_from_world = cam.world_from_camera.inverse()
    w_rot = cam_from_world.matrix()

    means_world = scene.world_means()
    p_cam = means_world @ w_rot.T + cam_from_world.translation
    depth = p_cam[:, 2]
    keep = depth > cam.near
    if not keep.any():
        return None

    p_cam = p_cam[keep]
    depth = depth[keep]
    means_world = means_world[keep]

    scene_rot = quat_to_matrix(scene.local_to_world.rotation)
    rot_g = quats_to_matrices(scene.rotations[keep].astype(np.float64))
    rot_total = scene_rot @ rot_g
    scales = np.exp(scene.scales_log[keep].astype(np.float64))
    # Sigma_world = R diag(s^2) R^T
    rs = rot_total * scales[:, None, :]
    sigma_world = rs @ rs.transpose(0, 2, 1)
    sigma_cam = w_rot @ sigma_world @ w_rot.T

    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    inv_z = 1.0 / z
    jac = np.zeros((p_cam.shape[0], 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * x * inv_z * inv_z
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * y * inv_z * inv_z
    cov2d = jac @ sigma_cam @ jac.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_LOWPASS
    cov2d[:, 1, 1] += COV2D_LOWPASS

    mean2d = np.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=1)

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    inv_det = 1.0 / det
    conic = np.stack(
        [cov2d[:, 1, 1] * inv_det, -cov2d[:, 0, 1] * inv_det, cov2d[:, 0, 0] * inv_det], axis=1
    )

    alpha = _sigmoid(scene.opacity_logits[keep].astype(np.float64))

    cam_pos = cam.world_from_camera.translation
    dirs = means_world - cam_pos
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs_local = dirs @ scene_rot  # R^T applied row-wise
    color = eval_sh(scene.sh[keep].astype(np.float64), dirs_local, scene.sh_degree)

    # conservative 3-sigma pixel bounds from the cov2d eigen radius
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(np.maximum(mid + disc, 0.0))
    x0 = np.floor(mean2d[:, 0] - radius).astype(np.int64)
    x1 = np.ceil(mean2d[:, 0] + radius).astype(np.int64)
    y0 = np.floor(mean2d[:, 1] - radius).astype(np.int64)
    y1 = np.ceil(mean2d[:, 1] + radius).astype(np.int64)
    on_screen = (x1 >= 0) & (x0 < cam.width) & (y1 >= 0) & (y0 < cam.height)

    bbox = np.stack(
        [
            np.clip(x0, 0, cam.width - 1),
            np.clip(y0, 0, cam.height - 1),
            np.clip(x1, 0, cam.width - 1),
            np.clip(y1, 0, cam.height - 1),
        ],
        axis=1,
    )
    idx = np.nonzero(keep)[0]
    return (
        mean2d[on_screen],
        conic[on_screen],
        color[on_screen],
        alpha[on_screen],
        depth[on_screen],
        bbox[on_screen],
        idx[on_screen],
    )


def project_gaussian(
    g, scene_xf: RigidTransform, cam: PinholeCamera, sh_degree: Optional[int] = None
) -> Optional[ProjectedSplat]:
    """Project one gaussian; returns None when culled (behind near plane or
    with a 3-sigma footprint entirely off screen)."""
    sh = np.asarray(g.sh, dtype=np.float32)
    degree = sh_degree if sh_degree is not None else {1: 0, 4: 1, 9: 2, 16: 3}[sh.shape[0]]
    scene = SplatScene(
        means=np.asarray(g.mean, dtype=np.float32)[None],
        scales_log=np.asarray(g.scale_log, dtype=np.float32)[None],
        rotations=np.asarray(g.rotation, dtype=np.float32)[None],
        opacity_logits=np.array([g.opacity_logit], dtype=np.float32),
        sh=sh[None],
        sh_degree=degree,
        local_to_world=scene_xf,
    )
    out = _project_scene(scene, cam)
    if out is None or out[0].shape[0] == 0:
        return None
    mean2d, conic, color, alpha, depth, _, _ = out
    a, b, c = conic[0]
    inv = np.array([[a, b], [b, c]])
    return ProjectedSplat(
        mean2d=mean2d[0],
        cov2d=np.linalg.inv(inv),
        color=color[0],
        alpha=float(alpha[0]),
        depth=float(depth[0]),
    )


def render(
    scenes: Sequence[SplatScene],
    cam: PinholeCamera,
    background=(0.0, 0.0, 0.0),
) -> Framebuffer:
    """Composite all scenes into a framebuffer (see module docstring)."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)

    parts = []
    for s_idx, scene in enumerate(scenes):
        out = _project_scene(scene, cam)
        if out is None:
            continue
        mean2d, conic, color, alpha, depth, bbox, gidx = out
        sidx = np.full(len(depth), s_idx, dtype=np.int64)
        parts.append((mean2d, conic, color, alpha, depth, bbox, sidx, gidx))

    h, w = cam.height, cam.width
    rgb = np.zeros((h, w, 3))
    rgb[:] = bg  # tiles no splat touches keep the background
    transmittance = np.ones((h, w))
    if not parts:
        return Framebuffer(rgb=rgb, transmittance=transmittance)

    mean2d = np.concatenate([p[0] for p in parts])
    conic = np.concatenate([p[1] for p in parts])
    color = np.concatenate([p[2] for p in parts])
    alpha = np.concatenate([p[3] for p in parts])
    depth = np.concatenate([p[4] for p in parts])
    bbox = np.concatenate([p[5] for p in parts])
    sidx = np.concatenate([p[6] for p in parts])
    gidx = np.concatenate([p[7] for p in parts])

    # global front-to-back order; ties broken by (scene index, gaussian index)
    order = np.lexsort((gidx, sidx, depth))
    mean2d, conic, color, alpha, bbox = (
        mean2d[order], conic[order], color[order], alpha[order], bbox[order]
    )

    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    tx0 = bbox[:, 0] // TILE
    tx1 = bbox[:, 2] // TILE
    ty0 = bbox[:, 1] // TILE
    ty1 = bbox[:, 3] // TILE

    for ty in range(tiles_y):
        row_hit = (ty0 <= ty) & (ty <= ty1)
        if not row_hit.any():
            continue
        ys = ty * TILE
        ye = min(ys + TILE, h)
        py = np.arange(ys, ye, dtype=np.float64) + 0.5
        for tx in range(tiles_x):
            hit = row_hit & (tx0 <= tx) & (tx <= tx1)
            if not hit.any():
                continue
            sel = np.nonzero(hit)[0]  # preserves global depth order
            xs = tx * TILE
            xe = min(xs + TILE, w)
            px = np.arange(xs, xe, dtype=np.float64) + 0.5

            dx = px[None, None, :] - mean2d[sel, 0][:, None, None]
            dy = py[None, :, None] - mean2d[sel, 1][:, None, None]
            a = conic[sel, 0][:, None, None]
            b = conic[sel, 1][:, None, None]
            c = conic[sel, 2][:, None, None]
            maha = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy

            g = np.where(maha <= MAHA_CUTOFF, np.exp(-0.5 * maha), 0.0)
            a_eff = alpha[sel][:, None, None] * g

            # sequential front-to-back compositing as an exact prefix product:
            # a splat contributes iff transmittance before it is >= 1/255
            one_minus = 1.0 - a_eff
            t_before = np.cumprod(one_minus, axis=0)
            t_before = np.concatenate(
                [np.ones((1,) + t_before.shape[1:]), t_before[:-1]], axis=0
            )
            weights = a_eff * t_before * (t_before >= TERMINATION_T)

            tile_rgb = np.einsum("spq,sc->pqc", weights, color[sel])
            t_final = 1.0 - weights.sum(axis=0)
            rgb[ys:ye, xs:xe] = tile_rgb + t_final[:, :, None] * bg
            transmittance[ys:ye, xs:xe] = t_final

    return Framebuffer(rgb=np.clip(rgb, 0.0, 1.0), transmittance=transmittance)


def render_to_png(fb: Framebuffer, path) -> None:
    """8-bit RGB PNG with value = round(channel * 255)."""
    from PIL import Image

    data = np.rint(np.clip(fb.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(str(path))


def framebuffer_bytes(fb: Framebuffer) -> bytes:
    """Raw RGB8 rows (width * height * 3 bytes), the wire image format."""
    return np.rint(np.clip(fb.rgb, 0.0, 1.0) * 255.0).astype(np.uint8).tobytes()
