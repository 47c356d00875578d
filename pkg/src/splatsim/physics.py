"""Fixed-timestep rigid-body vehicle with four raycast wheels.

The vehicle is a single rigid body. Each wheel casts a ray from its anchor along
the body's -up axis against track floor boxes; a hit inside the suspension
travel produces a spring/damper force plus drive, brake and lateral-friction
forces at the contact point. Collision detection against walls, agents and the
goal uses the 15-axis separating axis test on oriented boxes. Wall contacts get
a positional push-out along the minimum penetration axis; episodes terminate on
contact, so no impulse solver is needed.

All state is float64 and the step is single-threaded and branch-deterministic:
identical inputs produce bit-identical trajectories on one platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import SimulationDiverged
from .transforms import (
    cross3,
    matrix_to_quat,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    quats_to_matrices,
)

FIXED_DT = 0.02  # 50 Hz

_SAT_EPS = 1e-9  # padding for near-parallel edge cross products


@dataclass(frozen=True, eq=False)
class Obb:
    """Oriented box: center, half extents and a unit rotation quaternion."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(
            self, "half_extents", np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        )
        object.__setattr__(
            self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4)
        )
        if np.any(self.half_extents <= 0):
            raise ValueError("half_extents must be positive")

    def axes(self) -> np.ndarray:
        """Rotation matrix whose columns are the box axes."""
        return quat_to_matrix(self.rotation)

    def corners(self) -> np.ndarray:
        """(8, 3) corners ordered by sign bits over (x, y, z)."""
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64
        )
        return self.center + (signs * self.half_extents) @ self.axes().T


@dataclass(eq=False)
class ObbSet:
    """Packed boxes for vectorized queries."""

    centers: np.ndarray       # (N, 3)
    half_extents: np.ndarray  # (N, 3)
    rotations: np.ndarray     # (N, 3, 3)

    @staticmethod
    def from_obbs(obbs) -> "ObbSet":
        obbs = list(obbs)
        if not obbs:
            return ObbSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3, 3)))
        return ObbSet(
            centers=np.array([o.center for o in obbs]),
            half_extents=np.array([o.half_extents for o in obbs]),
            rotations=quats_to_matrices(np.array([o.rotation for o in obbs])),
        )

    def __len__(self) -> int:
        return self.centers.shape[0]

    def subset(self, idx: np.ndarray) -> "ObbSet":
        return ObbSet(self.centers[idx], self.half_extents[idx], self.rotations[idx])


# cross-axis index tables for A_i x B_j, flattened row-major over (i, j)
_CI = np.repeat(np.arange(3), 3)
_CJ = np.tile(np.arange(3), 3)
_CI1, _CI2 = (_CI + 1) % 3, (_CI + 2) % 3
_CJ1, _CJ2 = (_CJ + 1) % 3, (_CJ + 2) % 3


def _sat_separations(center_a, half_a, rot_a, others: ObbSet) -> np.ndarray:
    """(M, 15) signed separations; any positive entry means disjoint on that axis."""
    R = np.einsum("ij,mjk->mik", rot_a.T, others.rotations)      # A-frame to B-frame
    t = (others.centers - center_a) @ rot_a                      # B centers in A frame
    absR = np.abs(R) + _SAT_EPS
    hb = others.half_extents

    # faces of A: axis i
    rb_a = np.einsum("mj,mij->mi", hb, absR)
    sep_a = np.abs(t) - (half_a + rb_a)
    # faces of B: axis j
    ra_b = np.einsum("i,mij->mj", half_a, absR)
    proj_b = np.abs(np.einsum("mi,mij->mj", t, R))
    sep_b = proj_b - (ra_b + hb)
    # edge cross products A_i x B_j
    ra_c = half_a[_CI1] * absR[:, _CI2, _CJ] + half_a[_CI2] * absR[:, _CI1, _CJ]
    rb_c = hb[:, _CJ1] * absR[:, _CI, _CJ2] + hb[:, _CJ2] * absR[:, _CI, _CJ1]
    proj_c = np.abs(t[:, _CI2] * R[:, _CI1, _CJ] - t[:, _CI1] * R[:, _CI2, _CJ])
    sep_c = proj_c - (ra_c + rb_c)

    return np.concatenate([sep_a, sep_b, sep_c], axis=1)


def sat_obb_overlap(a: Obb, b: Obb) -> bool:
    """Exact oriented-box intersection via the 15-axis separating axis test.

    Touching faces count as overlap (separation must be strictly positive to
    report disjoint).
    """
    sep = _sat_separations(a.center, a.half_extents, a.axes(), ObbSet.from_obbs([b]))
    return bool(np.all(sep[0] <= 0.0))


def sat_overlap_set(box: Obb, others: ObbSet) -> np.ndarray:
    """Boolean overlap mask of one box against a packed set."""
    if len(others) == 0:
        return np.zeros(0, dtype=bool)
    sep = _sat_separations(box.center, box.half_extents, box.axes(), others)
    return np.all(sep <= 0.0, axis=1)


def sat_minimum_push(a: Obb, b: Obb) -> Optional[np.ndarray]:
    """World-space translation that moves `a` out of `b` along its face axes.

    Returns None when disjoint. Only the six face axes are candidates; for the
    shallow wall penetrations this resolver handles, a face axis is always the
    minimum direction and it avoids the degenerate edge-cross cases.
    """
    others = ObbSet.from_obbs([b])
    rot_a = a.axes()
    sep = _sat_separations(a.center, a.half_extents, rot_a, others)[0]
    if np.any(sep > 0.0):
        return None
    depths = -sep[:6]
    idx = int(np.argmin(depths))
    if idx < 3:
        axis = rot_a[:, idx]
    else:
        axis = b.axes()[:, idx - 3]
    if np.dot(a.center - b.center, axis) < 0:
        axis = -axis
    return axis * depths[idx]


def raycast_obbs(origins: np.ndarray, directions: np.ndarray, boxes: ObbSet):
    """Nearest non-negative hit distance per ray, or +inf on miss.

    Accepts one ray (shape (3,), returns float) or a batch (K, 3). Slab test
    in each box frame; rays starting inside a box hit at distance 0.
    """
    origins = np.asarray(origins, dtype=np.float64)
    single = origins.ndim == 1
    o_world = np.atleast_2d(origins)
    d_world = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    k = o_world.shape[0]
    if len(boxes) == 0:
        return np.inf if single else np.full(k, np.inf)

    rel = o_world[:, None, :] - boxes.centers[None, :, :]
    o = np.einsum("mji,kmj->kmi", boxes.rotations, rel)
    d = np.einsum("mji,kj->kmi", boxes.rotations, d_world)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-boxes.half_extents[None] - o) * inv
        t2 = (boxes.half_extents[None] - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # parallel-to-slab rays: inside keeps the interval open, outside kills it
    parallel = np.abs(d) < 1e-12
    inside = np.abs(o) <= boxes.half_extents[None]
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)

    tmin = lo.max(axis=2)
    tmax = hi.min(axis=2)
    hit = (tmax >= tmin) & (tmax >= 0.0)
    t = np.where(hit, np.maximum(tmin, 0.0), np.inf).min(axis=1)
    return float(t[0]) if single else t


@dataclass(frozen=True)
class WheelConfig:
    radius: float = 0.35
    rest_length: float = 0.3          # suspension travel at full droop
    stiffness: float = 35000.0        # N/m
    damping: float = 4500.0           # N*s/m
    anchors: tuple = (
        (1.3, 0.8, -0.75),
        (1.3, -0.8, -0.75),
        (-1.3, 0.8, -0.75),
        (-1.3, -0.8, -0.75),
    )


@dataclass(frozen=True)
class FrictionConfig:
    longitudinal: float = 1.2
    lateral: float = 1.5


@dataclass(frozen=True)
class VehicleConfig:
    mass: float = 1500.0
    motor_force: float = 2000.0
    brake_force: float = 3000.0
    max_steer: float = np.deg2rad(30.0)
    drag: float = 0.05                # linear damping, 1/s
    angular_drag: float = 1.0         # 1/s, keeps the unforced body from spinning
    body_half_extents: tuple = (2.2, 0.9, 0.75)
    wheel: WheelConfig = field(default_factory=WheelConfig)
    friction: FrictionConfig = field(default_factory=FrictionConfig)

    def __post_init__(self):
        if min(self.mass, self.motor_force, self.brake_force, self.max_steer) <= 0:
            raise ValueError("mass, motor_force, brake_force and max_steer must be positive")
        if self.max_steer >= np.pi / 2:
            raise ValueError("max_steer must be below 90 degrees")

    @property
    def width(self) -> float:
        return 2.0 * self.body_half_extents[1]

    @property
    def height(self) -> float:
        return 2.0 * self.body_half_extents[2]

    def inertia_body(self) -> np.ndarray:
        """Solid-box inertia tensor in the body frame."""
        hx, hy, hz = self.body_half_extents
        return (self.mass / 3.0) * np.diag([hy * hy + hz * hz,
                                            hx * hx + hz * hz,
                                            hx * hx + hy * hy])

    def static_compression(self, g: float = 9.81) -> float:
        """Suspension compression with the body at rest on all four wheels."""
        return self.mass * g / (4.0 * self.wheel.stiffness)


@dataclass(frozen=True)
class Controls:
    throttle: float = 0.0  # [-1, 1]
    steer: float = 0.0     # [-1, 1]
    brake: float = 0.0     # [0, 1]

    def clamped(self) -> "Controls":
        return Controls(
            throttle=float(np.clip(self.throttle, -1.0, 1.0)),
            steer=float(np.clip(self.steer, -1.0, 1.0)),
            brake=float(np.clip(self.brake, 0.0, 1.0)),
        )


@dataclass(frozen=True, eq=False)
class VehicleState:
    position: np.ndarray          # (3,) body center, world
    orientation: np.ndarray       # (4,) unit quaternion
    linear_velocity: np.ndarray   # (3,) m/s
    angular_velocity: np.ndarray  # (3,) rad/s, world frame
    wheel_compressions: np.ndarray  # (4,)
    controls: Controls = field(default_factory=Controls)

    @staticmethod
    def at_rest(position, orientation, compression: float = 0.0) -> "VehicleState":
        return VehicleState(
            position=np.asarray(position, dtype=np.float64),
            orientation=quat_normalize(orientation),
            linear_velocity=np.zeros(3),
            angular_velocity=np.zeros(3),
            wheel_compressions=np.full(4, float(compression)),
        )

    def body_obb(self, cfg: VehicleConfig) -> Obb:
        return Obb(self.position, np.asarray(cfg.body_half_extents), self.orientation)


@dataclass(frozen=True)
class ContactEvent:
    kind: str        # "wall" | "agent" | "goal"
    other_id: int
    time: float


@dataclass(eq=False)
class World:
    """Static track colliders plus the dynamic agent boxes and goal."""

    floors: ObbSet
    walls: ObbSet
    gravity: np.ndarray
    goal: Optional[Obb] = None
    agent_obbs: list = field(default_factory=list)

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64).reshape(3)
        self._goal_set = ObbSet.from_obbs([self.goal] if self.goal is not None else [])
        self._agent_set = ObbSet.from_obbs(self.agent_obbs)

    @staticmethod
    def from_track(track, gravity, goal: Optional[Obb] = None) -> "World":
        return World(
            floors=ObbSet.from_obbs(track.floor_boxes()),
            walls=ObbSet.from_obbs(track.wall_boxes()),
            gravity=np.asarray(gravity, dtype=np.float64),
            goal=goal,
        )

    def set_agents(self, obbs) -> None:
        self.agent_obbs = list(obbs)
        self._agent_set = ObbSet.from_obbs(self.agent_obbs)

    def near_mask(self, obbs: ObbSet, point: np.ndarray, radius: float) -> np.ndarray:
        if len(obbs) == 0:
            return np.zeros(0, dtype=bool)
        reach = radius + np.linalg.norm(obbs.half_extents, axis=1)
        return np.linalg.norm(obbs.centers - point, axis=1) <= reach


@dataclass(eq=False)
class WheelForces:
    suspension: np.ndarray   # (4, 3) world-frame spring+damper force per wheel
    traction: np.ndarray     # (4, 3) drive/brake/lateral force per wheel
    application: np.ndarray  # (4, 3) world point where traction applies
    anchors: np.ndarray      # (4, 3) world anchor points
    compressions: np.ndarray # (4,)
    grounded: np.ndarray     # (4,) bool
    normal_loads: np.ndarray # (4,)


def _wheel_world_frames(state: VehicleState, cfg: VehicleConfig):
    rot = quat_to_matrix(state.orientation)
    fwd, left, up = rot[:, 0], rot[:, 1], rot[:, 2]
    anchors_local = np.asarray(cfg.wheel.anchors, dtype=np.float64)
    anchors = state.position + anchors_local @ rot.T
    return rot, fwd, left, up, anchors_local, anchors


def wheel_update(state: VehicleState, cfg: VehicleConfig, track_or_world, dt: float) -> WheelForces:
    """Per-wheel suspension and traction forces against the track floors.

    Each wheel ray runs from its anchor along -body_up. A hit within
    rest_length + radius compresses the spring; drive force follows the wheel
    forward axis (front wheels steered), braking opposes longitudinal slip and
    lateral slip is cancelled up to the lateral friction budget. Airborne
    wheels contribute nothing.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if hasattr(track_or_world, "floors"):
        floors = track_or_world.floors
    else:
        floors = ObbSet.from_obbs(track_or_world.floor_boxes())

    rot, fwd, left, up, anchors_local, anchors = _wheel_world_frames(state, cfg)
    w = cfg.wheel
    max_dist = w.rest_length + w.radius

    dists = raycast_obbs(anchors, np.broadcast_to(-up, (4, 3)), floors)
    grounded = dists <= max_dist

    compressions = np.where(
        grounded, np.clip(max_dist - dists, 0.0, w.rest_length), 0.0
    )
    rates = (compressions - state.wheel_compressions) / dt
    loads = np.where(
        grounded, np.maximum(w.stiffness * compressions + w.damping * rates, 0.0), 0.0
    )
    suspension = loads[:, None] * up

    application = np.where(
        grounded[:, None], anchors - np.minimum(dists, max_dist)[:, None] * up, anchors
    )

    steer_angle = state.controls.steer * cfg.max_steer
    cos_s, sin_s = np.cos(steer_angle), np.sin(steer_angle)
    front = anchors_local[:, 0] > 0
    wheel_fwd = np.where(front[:, None], cos_s * fwd + sin_s * left, fwd)
    wheel_left = np.where(front[:, None], -sin_s * fwd + cos_s * left, left)

    v_contact = state.linear_velocity + cross3(
        state.angular_velocity, application - state.position
    )
    v_long = np.einsum("ij,ij->i", v_contact, wheel_fwd)
    v_lat = np.einsum("ij,ij->i", v_contact, wheel_left)

    share = cfg.mass / 4.0
    grip_long = cfg.friction.longitudinal * loads  # zero for airborne wheels
    grip_lat = cfg.friction.lateral * loads

    drive = np.clip(state.controls.throttle * cfg.motor_force / 4.0, -grip_long, grip_long)
    brake = np.zeros(4)
    if state.controls.brake > 0.0:
        moving = np.abs(v_long) > 1e-9
        cap = np.minimum(
            np.minimum(state.controls.brake * cfg.brake_force / 4.0,
                       share * np.abs(v_long) / dt),
            grip_long,
        )
        brake = np.where(moving, -np.sign(v_long) * cap, 0.0)
    lateral = np.clip(-share * v_lat / dt, -grip_lat, grip_lat)

    traction = (drive + brake)[:, None] * wheel_fwd + lateral[:, None] * wheel_left

    return WheelForces(
        suspension=suspension,
        traction=traction,
        application=application,
        anchors=anchors,
        compressions=compressions,
        grounded=grounded,
        normal_loads=loads,
    )


def step_fixed(
    state: VehicleState,
    cfg: VehicleConfig,
    world: World,
    dt: float = FIXED_DT,
    sim_time: float = 0.0,
) -> tuple[VehicleState, list[ContactEvent]]:
    """Advance the vehicle one fixed step and report contacts.

    Forces accumulate into velocity first; positions then advance with the
    mean of old and new velocity, which reproduces constant-acceleration
    trajectories (free fall) exactly. Contacts are computed after integration;
    wall hits also push the body out along the minimum penetration axis.
    """
    prune_radius = float(np.linalg.norm(cfg.body_half_extents)) + 5.0
    near_floors = world.floors.subset(world.near_mask(world.floors, state.position, prune_radius))
    local = World(floors=near_floors, walls=world.walls, gravity=world.gravity,
                  goal=world.goal, agent_obbs=world.agent_obbs)

    forces = wheel_update(state, cfg, local, dt)

    total_force = (
        cfg.mass * world.gravity
        - cfg.drag * cfg.mass * state.linear_velocity
        + forces.suspension.sum(axis=0)
        + forces.traction.sum(axis=0)
    )
    torque = (
        cross3(forces.anchors - state.position, forces.suspension)
        + cross3(forces.application - state.position, forces.traction)
    ).sum(axis=0)

    new_velocity = state.linear_velocity + (total_force / cfg.mass) * dt

    rot = quat_to_matrix(state.orientation)
    inertia_world = rot @ cfg.inertia_body() @ rot.T
    ang_accel = np.linalg.solve(inertia_world, torque)
    new_omega = (state.angular_velocity + ang_accel * dt) * max(0.0, 1.0 - cfg.angular_drag * dt)

    new_position = state.position + 0.5 * (state.linear_velocity + new_velocity) * dt

    omega_quat = np.concatenate([[0.0], new_omega])
    dq = 0.5 * quat_multiply(omega_quat, state.orientation)
    new_orientation = quat_normalize(state.orientation + dq * dt)

    events: list[ContactEvent] = []
    body = Obb(new_position, np.asarray(cfg.body_half_extents), new_orientation)

    wall_mask = world.near_mask(world.walls, new_position, prune_radius)
    wall_idx = np.nonzero(wall_mask)[0]
    if wall_idx.size:
        hits = sat_overlap_set(body, world.walls.subset(wall_idx))
        for j in wall_idx[hits]:
            events.append(ContactEvent(kind="wall", other_id=int(j), time=sim_time))
        for j in wall_idx[hits]:
            wall = Obb(
                world.walls.centers[j],
                world.walls.half_extents[j],
                matrix_to_quat(world.walls.rotations[j]),
            )
            push = sat_minimum_push(body, wall)
            if push is not None:
                new_position = new_position + push
                body = Obb(new_position, np.asarray(cfg.body_half_extents), new_orientation)

    if len(world._agent_set):
        agent_hits = sat_overlap_set(body, world._agent_set)
        for aid in np.nonzero(agent_hits)[0]:
            events.append(ContactEvent(kind="agent", other_id=int(aid), time=sim_time))

    if world.goal is not None and sat_overlap_set(body, world._goal_set)[0]:
        events.append(ContactEvent(kind="goal", other_id=0, time=sim_time))

    new_state = VehicleState(
        position=new_position,
        orientation=new_orientation,
        linear_velocity=new_velocity,
        angular_velocity=new_omega,
        wheel_compressions=forces.compressions,
        controls=state.controls,
    )

    if not (
        np.isfinite(new_state.position).all()
        and np.isfinite(new_state.linear_velocity).all()
        and np.isfinite(new_state.orientation).all()
    ):
        raise SimulationDiverged(f"non-finite vehicle state at t={sim_time:.3f}")

    return new_state, events
