"""Episodic driving tasks: reset/step semantics, observations and agents.

An environment wires together the splat assets, the extrinsics-derived spline
track, the raycast vehicle and (for the agent task) spline-bound follower
vehicles. Episodes terminate on wall or agent contact (negative), on reaching
the goal collider (positive), or truncate at max_steps.

Rewards: +1 goal, -1 collision, plus optional per-step progress shaping
(shaping_coef * delta_s / spline_length) and a small time penalty. Shaping can
be zeroed from the config to leave only the terminal signals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import EpisodeFinished
from .physics import (
    FIXED_DT,
    Controls,
    Obb,
    VehicleConfig,
    VehicleState,
    World,
    raycast_obbs,
    step_fixed,
)
from .poses import DEFAULT_G, derive_gravity, parse_colmap, parse_pose_json
from .render import Framebuffer, PinholeCamera, render
from .splats import SplatScene, load_splat_ply
from .track import RoadSpline, Track, TrackConfig, build_spline, place_blocks
from .transforms import (
    RigidTransform,
    cross3,
    matrix_to_quat,
    quat_from_frame,
    quat_to_matrix,
)

TASKS = ("straight_small", "turn_large", "agent_small")
OBS_MODES = ("vector", "image", "both")

VECTOR_DIM = 12
N_RAYS = 7
RAY_MAX_RANGE = 50.0
LEAD_SENTINEL = -1.0


@dataclass(frozen=True)
class PoseSource:
    """Where the camera extrinsics come from."""

    path: str
    format: str = "json"               # "json" | "colmap"
    up_convention: str = "camera_z_up"
    g: float = DEFAULT_G


@dataclass(frozen=True)
class RenderSettings:
    width: int = 320
    height: int = 240
    fov_deg: float = 70.0
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.05


@dataclass(frozen=True)
class ScenarioConfig:
    task: str = "straight_small"
    env_asset: str = ""
    ego_asset: str = ""
    agent_asset: str = ""
    spawn_s: float = 3.0
    goal_s: float = 35.0
    goal_half_extents: tuple = (0.5, 1.8, 1.5)
    agent_initial_s: float = 18.0      # spawn_s + initial gap
    agent_speed: float = 4.0
    max_steps: int = 3000
    obs_mode: str = "vector"
    image_size: tuple = (84, 84)
    seed: int = 0
    shaping_coef: float = 1.0          # 0 disables progress shaping
    time_penalty: float = 1e-4

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.obs_mode not in OBS_MODES:
            raise ValueError(f"unknown obs_mode {self.obs_mode!r}")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if not 0 <= self.spawn_s < self.goal_s:
            raise ValueError("need 0 <= spawn_s < goal_s")


@dataclass(eq=False)
class Observation:
    vector: Optional[np.ndarray] = None  # (12,)
    image: Optional[np.ndarray] = None   # (h, w, 3) float in [0, 1]


@dataclass(eq=False)
class AgentFollower:
    """Kinematic vehicle advancing along the spline at constant speed."""

    s: float
    speed: float
    body: Obb
    asset: Optional[SplatScene] = None


@dataclass(frozen=True)
class EpisodeResult:
    outcome: str      # "goal" | "collision_wall" | "collision_agent" | "timeout"
    steps: int
    total_reward: float


class DrivingEnv:
    """One simulation instance; single-threaded, deterministic per seed."""

    def __init__(
        self,
        scenario: ScenarioConfig,
        pose_source: PoseSource,
        track_config: TrackConfig = None,
        vehicle: VehicleConfig = None,
        render_settings: RenderSettings = None,
    ):
        self.scenario = scenario
        self.vehicle_config = vehicle or VehicleConfig()
        self.track_config = track_config or TrackConfig()
        self.render_settings = render_settings or RenderSettings()

        if pose_source.format == "colmap":
            poses = parse_colmap(pose_source.path, pose_source.up_convention)
        elif pose_source.format == "json":
            poses = parse_pose_json(pose_source.path, pose_source.up_convention)
        else:
            raise ValueError(f"unknown pose format {pose_source.format!r}")
        self.poses = derive_gravity(poses, pose_source.g)

        self.spline: RoadSpline = build_spline(self.poses)
        self.track: Track = place_blocks(
            self.spline,
            self.track_config,
            self.vehicle_config.width,
            self.vehicle_config.height,
        )
        if scenario.goal_s > self.spline.total_length + 1e-9:
            raise ValueError(
                f"goal_s {scenario.goal_s} beyond spline length {self.spline.total_length:.2f}"
            )

        gp, gt, gu = self.spline.eval(min(scenario.goal_s, self.spline.total_length))
        goal_center = gp - self.track.drop * gu
        self.goal = Obb(goal_center, np.asarray(scenario.goal_half_extents),
                        quat_from_frame(gt, gu))

        self.world = World.from_track(self.track, gravity=self.poses.gravity, goal=self.goal)

        self.agents: list[AgentFollower] = []
        self._env_scene: Optional[SplatScene] = None
        self._agent_scene: Optional[SplatScene] = None

        self.state: Optional[VehicleState] = None
        self.ego_s = scenario.spawn_s
        self._steps = 0
        self._time = 0.0
        self._total_reward = 0.0
        self._finished = True
        self.last_result: Optional[EpisodeResult] = None

    # -- assets are only needed for image observations; load them lazily ----

    def _ensure_scenes(self):
        if self._env_scene is None and self.scenario.env_asset:
            self._env_scene = load_splat_ply(self.scenario.env_asset)
        if (
            self._agent_scene is None
            and self.agents
            and self.scenario.agent_asset
        ):
            self._agent_scene = load_splat_ply(self.scenario.agent_asset)

    @property
    def needs_image(self) -> bool:
        return self.scenario.obs_mode in ("image", "both")

    @property
    def dt(self) -> float:
        return FIXED_DT

    # -- episode control ------------------------------------------------------

    def reset(self, seed: Optional[int] = None, lateral_offset: Optional[float] = None):
        """Place the ego on the spline at spawn_s and (re)spawn agents.

        The seed perturbs the spawn's lateral offset within +/-10% of the road
        half-width; everything else is deterministic.
        """
        if seed is None:
            seed = self.scenario.seed
        rng = np.random.default_rng(seed)
        if lateral_offset is None:
            lateral_offset = float(rng.uniform(-0.1, 0.1)) * self.track.road_half_width

        sc = self.scenario
        pos, tangent, up = self.spline.eval(sc.spawn_s)
        left = np.cross(up, tangent)
        surface = pos - self.track.drop * up

        g = float(np.linalg.norm(self.world.gravity))
        c0 = self.vehicle_config.static_compression(g)
        w = self.vehicle_config.wheel
        ride = w.rest_length + w.radius - c0
        hz = self.vehicle_config.body_half_extents[2]
        center = surface + (ride + hz) * up + lateral_offset * left

        self.state = VehicleState.at_rest(center, quat_from_frame(tangent, up), c0)
        self.ego_s = sc.spawn_s
        self._steps = 0
        self._time = 0.0
        self._total_reward = 0.0
        self._finished = False
        self.last_result = None

        self.agents = []
        if sc.task == "agent_small":
            self.agents.append(
                AgentFollower(s=sc.agent_initial_s, speed=sc.agent_speed,
                              body=self._agent_body(sc.agent_initial_s))
            )
        self._sync_agent_world()
        return self.observe()

    def _agent_body(self, s: float) -> Obb:
        pos, tangent, up = self.spline.eval(min(s, self.spline.total_length))
        center = pos - self.track.drop * up
        return Obb(center, np.asarray(self.vehicle_config.body_half_extents),
                   quat_from_frame(tangent, up))

    def _sync_agent_world(self):
        self.world.set_agents([a.body for a in self.agents])

    def update_agents(self, dt: float) -> None:
        """Advance followers along the spline; clamped (and parked) at the end."""
        total = self.spline.total_length
        for agent in self.agents:
            if agent.s >= total:
                agent.s = total
                agent.speed = 0.0
            else:
                agent.s = min(agent.s + agent.speed * dt, total)
            agent.body = self._agent_body(agent.s)
        self._sync_agent_world()

    def step(self, action):
        """Apply one action for one fixed physics step.

        Returns (observation, reward, terminated, truncated, info).
        """
        if self._finished or self.state is None:
            raise EpisodeFinished("call reset() before stepping")

        if isinstance(action, Controls):
            controls = action
        elif isinstance(action, dict):
            controls = Controls(
                throttle=float(action.get("throttle", 0.0)),
                steer=float(action.get("steer", 0.0)),
                brake=float(action.get("brake", 0.0)),
            )
        else:
            arr = np.asarray(action, dtype=np.float64).ravel()
            controls = Controls(*[float(v) for v in arr[:3]])
        clamped_controls = controls.clamped()
        was_clamped = (
            clamped_controls.throttle != controls.throttle
            or clamped_controls.steer != controls.steer
            or clamped_controls.brake != controls.brake
        )

        self.state = replace(self.state, controls=clamped_controls)
        self.state, contacts = step_fixed(
            self.state, self.vehicle_config, self.world, FIXED_DT, self._time
        )
        self.update_agents(FIXED_DT)
        self._time += FIXED_DT
        self._steps += 1

        prev_s = self.ego_s
        self.ego_s = self._project_to_spline(self.state.position, prev_s)
        delta_s = self.ego_s - prev_s

        sc = self.scenario
        reward = 0.0
        if sc.shaping_coef:
            reward += sc.shaping_coef * delta_s / self.spline.total_length
        reward -= sc.time_penalty

        outcome = None
        kinds = {c.kind for c in contacts}
        if "goal" in kinds:
            outcome = "goal"
            reward += 1.0
        elif "wall" in kinds:
            outcome = "collision_wall"
            reward -= 1.0
        elif "agent" in kinds:
            outcome = "collision_agent"
            reward -= 1.0

        terminated = outcome is not None
        truncated = False
        if not terminated and self._steps >= sc.max_steps:
            truncated = True
            outcome = "timeout"

        self._total_reward += reward
        if terminated or truncated:
            self._finished = True
            self.last_result = EpisodeResult(
                outcome=outcome, steps=self._steps, total_reward=self._total_reward
            )

        info = {
            "clamped": was_clamped,
            "outcome": outcome,
            "s": self.ego_s,
            "time": self._time,
        }
        return self.observe(), reward, terminated, truncated, info

    def _project_to_spline(self, position: np.ndarray, around_s: float) -> float:
        """Arc position of the nearest spline point, searched locally.

        One coarse scan around the previous value plus a parabolic refinement
        of the squared-distance minimum; deterministic and ~centimeter exact.
        """
        total = self.spline.total_length
        lo = max(0.0, around_s - 2.0)
        hi = min(total, around_s + 6.0)
        candidates = np.linspace(lo, hi, 49)
        pos = self.spline.eval_positions(candidates)
        d2 = np.einsum("ij,ij->i", pos - position, pos - position)
        i = int(np.argmin(d2))
        if 0 < i < len(candidates) - 1:
            denom = d2[i - 1] - 2.0 * d2[i] + d2[i + 1]
            if denom > 1e-18:
                step = candidates[1] - candidates[0]
                shift = 0.5 * (d2[i - 1] - d2[i + 1]) / denom
                return float(np.clip(candidates[i] + shift * step, 0.0, total))
        return float(candidates[i])

    # -- observations -----------------------------------------------------------

    def observe(self) -> Observation:
        obs = Observation()
        if self.scenario.obs_mode in ("vector", "both"):
            obs.vector = self._vector_obs()
        if self.needs_image:
            obs.image = self.render_observation().rgb
        return obs

    def _vector_obs(self) -> np.ndarray:
        state = self.state
        rot = quat_to_matrix(state.orientation)
        fwd, left, up = rot[:, 0], rot[:, 1], rot[:, 2]

        speed = float(np.dot(state.linear_velocity, fwd))

        spos, stan, sup = self.spline.eval(self.ego_s)
        sleft = cross3(sup, stan)
        lateral = float(np.dot(state.position - spos, sleft))
        heading = float(np.arctan2(np.dot(cross3(stan, fwd), sup), np.dot(stan, fwd)))
        dist_goal = self.scenario.goal_s - self.ego_s

        near = self.world.near_mask(self.world.walls, state.position, RAY_MAX_RANGE + 5.0)
        walls = self.world.walls.subset(near)
        angles = np.linspace(-np.pi / 2, np.pi / 2, N_RAYS)
        directions = np.cos(angles)[:, None] * fwd + np.sin(angles)[:, None] * left
        origins = np.broadcast_to(state.position, (N_RAYS, 3))
        rays = np.minimum(raycast_obbs(origins, directions, walls), RAY_MAX_RANGE)

        lead = LEAD_SENTINEL
        ahead = [a.s - self.ego_s for a in self.agents if a.s >= self.ego_s]
        if ahead:
            lead = min(ahead)

        vec = np.concatenate([[speed, lateral, heading, dist_goal], rays, [lead]])
        return vec.astype(np.float64)

    def observation_camera(self, width: int, height: int) -> PinholeCamera:
        """Front camera: at the body nose, lens on the capture-path height."""
        cfg = self.vehicle_config
        rot = quat_to_matrix(self.state.orientation)
        fwd, up = rot[:, 0], rot[:, 2]
        g = float(np.linalg.norm(self.world.gravity))
        c0 = cfg.static_compression(g)
        ride = cfg.wheel.rest_length + cfg.wheel.radius - c0
        hz = cfg.body_half_extents[2]
        # at rest the body center sits (ride + hz - drop) above the spline
        mount = self.track.drop - ride - hz
        position = self.state.position + cfg.body_half_extents[0] * fwd + mount * up
        cam_rot = np.column_stack([np.cross(fwd, up), -up, fwd])
        xf = RigidTransform(matrix_to_quat(cam_rot), position)
        return PinholeCamera.from_fov(
            width, height, self.render_settings.fov_deg, xf, self.render_settings.near
        )

    def render_observation(self, width: Optional[int] = None,
                           height: Optional[int] = None) -> Framebuffer:
        """Render environment plus agent assets from the ego front camera."""
        self._ensure_scenes()
        w = width or self.scenario.image_size[0]
        h = height or self.scenario.image_size[1]
        cam = self.observation_camera(w, h)
        scenes = []
        if self._env_scene is not None:
            scenes.append(self._env_scene)
        if self._agent_scene is not None:
            for agent in self.agents:
                xf = RigidTransform(
                    np.asarray(agent.body.rotation, dtype=np.float64),
                    agent.body.center,
                )
                scenes.append(self._agent_scene.with_transform(xf))
        return render(scenes, cam, self.render_settings.background)

    # -- misc -------------------------------------------------------------------

    @property
    def obs_spec(self) -> dict:
        spec = {
            "vector_dim": VECTOR_DIM if self.scenario.obs_mode in ("vector", "both") else 0,
            "image": list(self.scenario.image_size) if self.needs_image else None,
            "action": ["throttle", "steer", "brake"],
        }
        return spec
