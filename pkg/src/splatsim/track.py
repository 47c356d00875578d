"""Road spline from camera knots and the invisible collider track along it.

The spline is a centripetal Catmull-Rom curve through every camera position,
converted to per-segment cubic Hermite form. Endpoints use phantom-point
duplication; the duplicated phantom keeps the adjacent knot-parameter spacing
(a zero spacing would degenerate the centripetal parameterization). Arc length
is tabulated by adaptive chord subdivision and inverted on evaluation.

Road blocks are placed at fixed arc-length spacing `f`, each a floor slab plus
two walls, dropped by half the vehicle height so the capture path runs at
camera height. Renderers never see them: the track only exists for physics.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateKnotWarning, OutOfRange, SingleSegmentTrackWarning, TooFewKnots
from .physics import Obb
from .poses import CameraPose, PoseSet
from .transforms import matrix_to_quat

# consecutive floor slabs overlap along the spline so curved tracks leave no
# wheel-sized gaps at block seams
_BLOCK_LENGTH_OVERLAP = 1.3

_CR_ALPHA = 0.5  # centripetal


def _hermite_coeffs(u: np.ndarray):
    u2 = u * u
    u3 = u2 * u
    h00 = 2 * u3 - 3 * u2 + 1
    h10 = u3 - 2 * u2 + u
    h01 = -2 * u3 + 3 * u2
    h11 = u3 - u2
    return h00, h10, h01, h11


def _hermite_dcoeffs(u: np.ndarray):
    u2 = u * u
    d00 = 6 * u2 - 6 * u
    d10 = 3 * u2 - 4 * u + 1
    d01 = -6 * u2 + 6 * u
    d11 = 3 * u2 - 2 * u
    return d00, d10, d01, d11


def _slerp(a: np.ndarray, b: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Spherical interpolation between unit vectors, batched over rows."""
    dot = np.clip(np.sum(a * b, axis=-1, keepdims=True), -1.0, 1.0)
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    t = t[..., None]
    near = sin_theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        wa = np.where(near, 1.0 - t, np.sin((1.0 - t) * theta) / sin_theta)
        wb = np.where(near, t, np.sin(t * theta) / sin_theta)
    out = wa * a + wb * b
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


@dataclass(eq=False)
class RoadSpline:
    """Centripetal Catmull-Rom curve through the camera knots.

    arc_table maps arc length (meters) to the global curve parameter
    (segment index + local u); it is strictly increasing by construction.
    """

    knots: np.ndarray       # (N, 3)
    knot_ups: np.ndarray    # (N, 3) unit
    arc_table: np.ndarray   # (M, 2): column 0 arc length, column 1 parameter
    up_mode: str = "slerp"  # or "nearest"
    # Hermite representation (filled by build_spline)
    tangents: np.ndarray = field(default=None, repr=False)       # (N, 3) d/dt
    knot_params: np.ndarray = field(default=None, repr=False)    # (N,) centripetal t
    knot_arcs: np.ndarray = field(default=None, repr=False)      # (N,) arc length at knots

    @property
    def total_length(self) -> float:
        return float(self.arc_table[-1, 0])

    def _segment_points(self, seg: np.ndarray, u: np.ndarray):
        p0 = self.knots[seg]
        p1 = self.knots[seg + 1]
        dt = (self.knot_params[seg + 1] - self.knot_params[seg])[:, None]
        m0 = self.tangents[seg] * dt
        m1 = self.tangents[seg + 1] * dt
        h00, h10, h01, h11 = _hermite_coeffs(u[:, None])
        pos = h00 * p0 + h10 * m0 + h01 * p1 + h11 * m1
        d00, d10, d01, d11 = _hermite_dcoeffs(u[:, None])
        deriv = d00 * p0 + d10 * m0 + d01 * p1 + d11 * m1
        return pos, deriv

    def eval_many(self, s: np.ndarray):
        """Vectorized eval: (positions, tangents, ups) for arc lengths `s`."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        total = self.total_length
        if np.any(s < -1e-9) or np.any(s > total + 1e-9):
            raise OutOfRange(f"arc length outside [0, {total}]")
        s = np.clip(s, 0.0, total)

        param = np.interp(s, self.arc_table[:, 0], self.arc_table[:, 1])
        nseg = len(self.knots) - 1
        seg = np.clip(param.astype(np.int64), 0, nseg - 1)
        u = np.clip(param - seg, 0.0, 1.0)

        pos, deriv = self._segment_points(seg, u)
        norms = np.linalg.norm(deriv, axis=1, keepdims=True)
        chord = self.knots[seg + 1] - self.knots[seg]
        chord /= np.linalg.norm(chord, axis=1, keepdims=True)
        small = norms[:, 0] < 1e-12
        tangent = np.where(small[:, None], chord, deriv / np.where(norms == 0, 1.0, norms))

        if self.up_mode == "nearest":
            pick = (u >= 0.5).astype(np.int64)
            up = self.knot_ups[seg + pick]
        else:
            up = _slerp(self.knot_ups[seg], self.knot_ups[seg + 1], u)
        # re-orthogonalize against the tangent
        up = up - np.sum(up * tangent, axis=1, keepdims=True) * tangent
        up /= np.linalg.norm(up, axis=1, keepdims=True)
        return pos, tangent, up

    def eval(self, s: float):
        """Position, unit tangent and unit up at arc length s in [0, total]."""
        pos, tan, up = self.eval_many(np.array([float(s)]))
        return pos[0], tan[0], up[0]

    def eval_positions(self, s: np.ndarray) -> np.ndarray:
        """Positions only (no tangent/up work); same domain rules as eval_many."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        total = self.total_length
        if np.any(s < -1e-9) or np.any(s > total + 1e-9):
            raise OutOfRange(f"arc length outside [0, {total}]")
        s = np.clip(s, 0.0, total)
        param = np.interp(s, self.arc_table[:, 0], self.arc_table[:, 1])
        nseg = len(self.knots) - 1
        seg = np.clip(param.astype(np.int64), 0, nseg - 1)
        u = np.clip(param - seg, 0.0, 1.0)
        pos, _ = self._segment_points(seg, u)
        return pos


def _segment_arclength_table(spline: RoadSpline, seg: int, rel_tol: float = 1e-4):
    """Cumulative chord lengths over one segment, subdividing until converged."""
    n = 64
    prev = None
    while True:
        u = np.linspace(0.0, 1.0, n + 1)
        seg_idx = np.full(n + 1, seg)
        pos, _ = spline._segment_points(seg_idx, u)
        chords = np.linalg.norm(np.diff(pos, axis=0), axis=1)
        total = chords.sum()
        if prev is not None and abs(total - prev) <= rel_tol * max(total, 1e-12):
            return u, np.concatenate([[0.0], np.cumsum(chords)])
        if n >= 2048:
            return u, np.concatenate([[0.0], np.cumsum(chords)])
        prev = total
        n *= 2


def build_spline(poses: PoseSet, up_mode: str = "slerp") -> RoadSpline:
    """Interpolating spline with every camera position as a knot.

    Duplicate consecutive knots are merged (with a warning) since they carry
    no path information and would break the centripetal parameterization.
    """
    positions = poses.positions()
    ups = poses.up_axes()

    keep = [0]
    for i in range(1, len(positions)):
        if np.linalg.norm(positions[i] - positions[keep[-1]]) < 1e-9:
            warnings.warn(
                f"duplicate consecutive camera position at index {i}; merged",
                DuplicateKnotWarning,
            )
        else:
            keep.append(i)
    knots = positions[keep].astype(np.float64)
    knot_ups = ups[keep].astype(np.float64)
    knot_ups /= np.linalg.norm(knot_ups, axis=1, keepdims=True)

    n = len(knots)
    if n < 2:
        raise TooFewKnots(f"need at least 2 distinct knots, got {n}")

    # centripetal knot parameters
    seg_dt = np.linalg.norm(np.diff(knots, axis=0), axis=1) ** _CR_ALPHA
    t = np.concatenate([[0.0], np.cumsum(seg_dt)])

    # phantom duplication at both ends; the phantom inherits the neighbor
    # spacing so the tangent formula stays non-degenerate
    t_prev = np.concatenate([[t[0] - seg_dt[0]], t[:-1]])
    t_next = np.concatenate([t[1:], [t[-1] + seg_dt[-1]]])
    p_prev = np.concatenate([[knots[0]], knots[:-1]], axis=0)
    p_next = np.concatenate([knots[1:], [knots[-1]]], axis=0)

    d_prev = (knots - p_prev) / (t - t_prev)[:, None]
    d_next = (p_next - knots) / (t_next - t)[:, None]
    w_prev = (t_next - t) / (t_next - t_prev)
    w_next = (t - t_prev) / (t_next - t_prev)
    tangents = d_prev * w_prev[:, None] + d_next * w_next[:, None]

    spline = RoadSpline(
        knots=knots,
        knot_ups=knot_ups,
        arc_table=np.zeros((1, 2)),
        up_mode=up_mode,
        tangents=tangents,
        knot_params=t,
        knot_arcs=None,
    )

    params = [0.0]
    arcs = [0.0]
    knot_arcs = [0.0]
    offset = 0.0
    for seg in range(n - 1):
        u, cum = _segment_arclength_table(spline, seg)
        params.extend(seg + u[1:])
        arcs.extend(offset + cum[1:])
        offset += cum[-1]
        knot_arcs.append(offset)
    spline.arc_table = np.column_stack([arcs, params])
    spline.knot_arcs = np.array(knot_arcs)
    if not np.all(np.diff(spline.arc_table[:, 0]) > 0):
        raise TooFewKnots("degenerate spline: arc length table is not strictly increasing")
    return spline


@dataclass(frozen=True, eq=False)
class TrackConfig:
    """Road block geometry knobs, scaled from vehicle dimensions."""

    spacing: float = 1.0              # meters between block origins along the spline
    road_width_factor: float = 2.0    # road width = factor * vehicle width
    wall_height_factor: float = 2.0   # wall height = factor * vehicle height
    wall_thickness: float = 0.2
    drop_offset_factor: float = 0.5   # blocks drop factor * vehicle height below the spline

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError("spacing must be > 0")
        for name in ("road_width_factor", "wall_height_factor", "wall_thickness",
                     "drop_offset_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True, eq=False)
class RoadBlock:
    index: int
    center: np.ndarray    # dropped position
    up: np.ndarray        # unit, orthogonal to forward
    forward: np.ndarray   # unit, toward the next block
    floor_box: Obb
    left_wall_box: Obb
    right_wall_box: Obb


@dataclass(frozen=True, eq=False)
class Track:
    blocks: tuple[RoadBlock, ...]
    spline: RoadSpline
    config: TrackConfig
    vehicle_width: float
    vehicle_height: float

    @property
    def road_half_width(self) -> float:
        return self.config.road_width_factor * self.vehicle_width / 2.0

    @property
    def drop(self) -> float:
        return self.config.drop_offset_factor * self.vehicle_height

    def floor_boxes(self) -> list[Obb]:
        return [b.floor_box for b in self.blocks]

    def wall_boxes(self) -> list[Obb]:
        out = []
        for b in self.blocks:
            out.append(b.left_wall_box)
            out.append(b.right_wall_box)
        return out


def place_blocks(
    spline: RoadSpline,
    cfg: TrackConfig,
    vehicle_width: float,
    vehicle_height: float,
) -> Track:
    """Instantiate road blocks at arc positions r * spacing, r = 0..floor(L/f).

    Block r's forward points at block r+1's pre-drop position (the last block
    reuses its predecessor's forward); centers then drop by
    drop_offset_factor * vehicle_height along the local up.
    """
    total = spline.total_length
    n_segments = int(np.floor(total / cfg.spacing))
    if n_segments == 0:
        warnings.warn(
            f"block spacing {cfg.spacing} m >= spline length {total:.3f} m; "
            "emitting a 2-block track",
            SingleSegmentTrackWarning,
        )
        s_values = np.array([0.0, total])
    else:
        s_values = np.minimum(np.arange(n_segments + 1) * cfg.spacing, total)

    pos, _, up = spline.eval_many(s_values)

    forwards = np.diff(pos, axis=0)
    norms = np.linalg.norm(forwards, axis=1, keepdims=True)
    forwards = forwards / norms
    forwards = np.concatenate([forwards, forwards[-1:]], axis=0)

    # up orthogonal to the block forward, not to the spline tangent
    up = up - np.sum(up * forwards, axis=1, keepdims=True) * forwards
    up /= np.linalg.norm(up, axis=1, keepdims=True)

    drop = cfg.drop_offset_factor * vehicle_height
    centers = pos - drop * up

    road_hw = cfg.road_width_factor * vehicle_width / 2.0
    wall_hh = cfg.wall_height_factor * vehicle_height / 2.0
    half_len = cfg.spacing * _BLOCK_LENGTH_OVERLAP / 2.0
    floor_ht = cfg.wall_thickness / 2.0

    blocks = []
    for r in range(len(s_values)):
        f = forwards[r]
        u = up[r]
        left = np.cross(u, f)
        rot = matrix_to_quat(np.column_stack([f, left, u]))
        c = centers[r]
        floor_box = Obb(c - floor_ht * u, np.array([half_len, road_hw, floor_ht]), rot)
        wall_off = (road_hw + cfg.wall_thickness / 2.0) * left
        wall_up = wall_hh * u
        half_wall = np.array([half_len, cfg.wall_thickness / 2.0, wall_hh])
        blocks.append(
            RoadBlock(
                index=r,
                center=c,
                up=u,
                forward=f,
                floor_box=floor_box,
                left_wall_box=Obb(c + wall_off + wall_up, half_wall, rot),
                right_wall_box=Obb(c - wall_off + wall_up, half_wall, rot),
            )
        )

    return Track(
        blocks=tuple(blocks),
        spline=spline,
        config=cfg,
        vehicle_width=vehicle_width,
        vehicle_height=vehicle_height,
    )


def _obb_to_dict(o: Obb) -> dict:
    return {
        "center": o.center.tolist(),
        "half_extents": o.half_extents.tolist(),
        "rotation": o.rotation.tolist(),
    }


def _obb_from_dict(d: dict) -> Obb:
    return Obb(
        np.asarray(d["center"], dtype=np.float64),
        np.asarray(d["half_extents"], dtype=np.float64),
        np.asarray(d["rotation"], dtype=np.float64),
    )


def export_track(track: Track, path, format: str = "json") -> None:
    """Write the track as JSON block records or as an OBJ debug mesh."""
    if format == "json":
        doc = {
            "config": {
                "spacing": track.config.spacing,
                "road_width_factor": track.config.road_width_factor,
                "wall_height_factor": track.config.wall_height_factor,
                "wall_thickness": track.config.wall_thickness,
                "drop_offset_factor": track.config.drop_offset_factor,
            },
            "vehicle_width": track.vehicle_width,
            "vehicle_height": track.vehicle_height,
            "spline": {
                "knots": track.spline.knots.tolist(),
                "knot_ups": track.spline.knot_ups.tolist(),
                "up_mode": track.spline.up_mode,
            },
            "blocks": [
                {
                    "index": b.index,
                    "center": b.center.tolist(),
                    "up": b.up.tolist(),
                    "forward": b.forward.tolist(),
                    "floor_box": _obb_to_dict(b.floor_box),
                    "left_wall_box": _obb_to_dict(b.left_wall_box),
                    "right_wall_box": _obb_to_dict(b.right_wall_box),
                }
                for b in track.blocks
            ],
        }
        with open(str(path), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
    elif format == "obj":
        lines = ["# splatsim track debug mesh"]
        vert_base = 1
        for b in track.blocks:
            for box in (b.floor_box, b.left_wall_box, b.right_wall_box):
                corners = box.corners()
                lines.extend(f"v {c[0]} {c[1]} {c[2]}" for c in corners)
                # corners() orders by sign bits (---, --+, -+-, ... +++)
                quads = [
                    (0, 1, 3, 2), (4, 6, 7, 5),
                    (0, 2, 6, 4), (1, 5, 7, 3),
                    (0, 4, 5, 1), (2, 3, 7, 6),
                ]
                for a, bb, c, d in quads:
                    lines.append(f"f {vert_base + a} {vert_base + bb} {vert_base + c}")
                    lines.append(f"f {vert_base + a} {vert_base + c} {vert_base + d}")
                vert_base += 8
        with open(str(path), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown export format {format!r}")


def load_track(path) -> Track:
    """Rebuild a Track from its JSON export (inverse of export_track json)."""
    with open(str(path), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = TrackConfig(**doc["config"])

    knots = np.asarray(doc["spline"]["knots"], dtype=np.float64)
    ups = np.asarray(doc["spline"]["knot_ups"], dtype=np.float64)
    pose_set = PoseSet(
        poses=tuple(
            CameraPose(
                position=knots[i],
                rotation=np.array([1.0, 0.0, 0.0, 0.0]),
                up_axis=ups[i],
                label=f"knot_{i:04d}",
                order_key=i,
            )
            for i in range(len(knots))
        )
    )
    spline = build_spline(pose_set, up_mode=doc["spline"]["up_mode"])
    blocks = tuple(
        RoadBlock(
            index=b["index"],
            center=np.asarray(b["center"], dtype=np.float64),
            up=np.asarray(b["up"], dtype=np.float64),
            forward=np.asarray(b["forward"], dtype=np.float64),
            floor_box=_obb_from_dict(b["floor_box"]),
            left_wall_box=_obb_from_dict(b["left_wall_box"]),
            right_wall_box=_obb_from_dict(b["right_wall_box"]),
        )
        for b in doc["blocks"]
    )
    return Track(
        blocks=blocks,
        spline=spline,
        config=cfg,
        vehicle_width=doc["vehicle_width"],
        vehicle_height=doc["vehicle_height"],
    )
