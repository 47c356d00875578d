"""PPO trainer (clipped surrogate + GAE) and the evaluation loop.

Pure numpy: a tanh MLP policy with a Gaussian head (state-independent log-std)
and a separate value network, trained by analytic backprop with Adam. The
policy acts in a 2-D space (longitudinal command, steer); the longitudinal
command splits into throttle when positive and brake when negative before it
reaches the environment.

Everything is seed-deterministic: same config and seeds give bit-identical
rollouts, updates and checkpoints on one platform.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .env import DrivingEnv, ScenarioConfig
from .errors import DivergedUpdate
from .physics import Controls

LOG_2PI = float(np.log(2.0 * np.pi))

# fixed feature scaling for the 12-entry vector observation
OBS_SCALE = np.array([0.1, 0.5, 0.6, 0.02, *([0.02] * 7), 0.02])

ACTION_DIM = 2


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    rollout_len: int = 2048
    minibatch_size: int = 256
    epochs_per_update: int = 4
    total_env_steps: int = 200_000
    hidden_sizes: tuple = (64, 64)
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    seed: int = 0
    checkpoint_every_updates: int = 20

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")


def action_to_controls(action: np.ndarray) -> Controls:
    """Map the 2-D policy action to env controls.

    action[0] >= 0 drives, < 0 brakes; action[1] steers.
    """
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    return Controls(
        throttle=float(max(a[0], 0.0)),
        steer=float(a[1]),
        brake=float(max(-a[0], 0.0)),
    )


class PolicyParams:
    """Weights for the policy (Gaussian head) and value networks."""

    def __init__(self, obs_dim: int, hidden_sizes, action_dim: int = ACTION_DIM,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.hidden_sizes = tuple(hidden_sizes)

        def init_net(sizes):
            weights = []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                scale = np.sqrt(2.0 / fan_in)
                weights.append(rng.normal(0.0, scale, (fan_in, fan_out)))
                weights.append(np.zeros(fan_out))
            return weights

        pi_sizes = (obs_dim, *self.hidden_sizes, action_dim)
        v_sizes = (obs_dim, *self.hidden_sizes, 1)
        self.pi = init_net(pi_sizes)
        # small final layer keeps the initial action mean near zero
        self.pi[-2] = self.pi[-2] * 0.01
        self.v = init_net(v_sizes)
        self.log_std = np.full(action_dim, -0.5)

    def flat(self) -> list[np.ndarray]:
        return [*self.pi, *self.v, self.log_std]

    def names(self) -> list[str]:
        n_pi = len(self.pi) // 2
        names = []
        for i in range(n_pi):
            names += [f"pi.w{i}", f"pi.b{i}"]
        for i in range(len(self.v) // 2):
            names += [f"v.w{i}", f"v.b{i}"]
        names.append("log_std")
        return names

    def copy(self) -> "PolicyParams":
        dup = PolicyParams.__new__(PolicyParams)
        dup.obs_dim = self.obs_dim
        dup.action_dim = self.action_dim
        dup.hidden_sizes = self.hidden_sizes
        dup.pi = [w.copy() for w in self.pi]
        dup.v = [w.copy() for w in self.v]
        dup.log_std = self.log_std.copy()
        return dup

    # -- forward passes (caching activations for backprop) -----------------

    def _mlp_forward(self, weights, x):
        acts = [x]
        n_layers = len(weights) // 2
        h = x
        for i in range(n_layers):
            z = h @ weights[2 * i] + weights[2 * i + 1]
            h = z if i == n_layers - 1 else np.tanh(z)
            acts.append(h)
        return h, acts

    def policy_mean(self, obs: np.ndarray):
        raw, acts = self._mlp_forward(self.pi, np.atleast_2d(obs))
        return np.tanh(raw), raw, acts

    def value(self, obs: np.ndarray):
        v, acts = self._mlp_forward(self.v, np.atleast_2d(obs))
        return v[:, 0], acts

    def log_prob(self, obs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        mean, _, _ = self.policy_mean(obs)
        std = np.exp(self.log_std)
        z = (np.atleast_2d(actions) - mean) / std
        return (-0.5 * z * z - self.log_std - 0.5 * LOG_2PI).sum(axis=1)

    def entropy(self) -> float:
        return float(np.sum(self.log_std + 0.5 * (1.0 + LOG_2PI)))

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        mean, _, _ = self.policy_mean(obs)
        std = np.exp(self.log_std)
        noise = rng.standard_normal(mean.shape)
        action = mean + std * noise
        z = noise
        logp = (-0.5 * z * z - self.log_std - 0.5 * LOG_2PI).sum(axis=1)
        return action[0], float(logp[0])

    def act_deterministic(self, obs: np.ndarray) -> np.ndarray:
        mean, _, _ = self.policy_mean(obs)
        return mean[0]


@dataclass(eq=False)
class RolloutBuffer:
    capacity: int
    obs_dim: int = 12
    obs: np.ndarray = None
    actions: np.ndarray = None
    log_probs: np.ndarray = None
    rewards: np.ndarray = None
    values: np.ndarray = None
    dones: np.ndarray = None
    size: int = 0

    def __post_init__(self):
        self.obs = np.zeros((self.capacity, self.obs_dim))
        self.actions = np.zeros((self.capacity, ACTION_DIM))
        self.log_probs = np.zeros(self.capacity)
        self.rewards = np.zeros(self.capacity)
        self.values = np.zeros(self.capacity)
        self.dones = np.zeros(self.capacity, dtype=bool)

    def add(self, obs, action, log_prob, reward, value, done):
        i = self.size
        self.obs[i] = obs
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = done
        self.size += 1

    @property
    def full(self) -> bool:
        return self.size >= self.capacity

    def clear(self):
        self.size = 0


def compute_gae(rewards, values, dones, bootstrap_value, gamma, lam):
    """Generalized advantage estimation over one buffer.

    delta_t = r_t + gamma * v_{t+1} * (1 - done_t) - v_t
    A_t     = delta_t + gamma * lam * (1 - done_t) * A_{t+1}
    returns = advantages + values
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal length")

    n = len(rewards)
    advantages = np.zeros(n)
    next_value = float(bootstrap_value)
    gae = 0.0
    for t in range(n - 1, -1, -1):
        mask = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * mask - values[t]
        gae = delta + gamma * lam * mask * gae
        advantages[t] = gae
        next_value = values[t]
    return advantages, advantages + values


class Adam:
    def __init__(self, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _mlp_backward(weights, acts, grad_out):
    """Gradients of an MLP given cached activations; returns per-weight grads."""
    n_layers = len(weights) // 2
    grads = [None] * len(weights)
    g = grad_out
    for i in range(n_layers - 1, -1, -1):
        h_in = acts[i]
        grads[2 * i] = h_in.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0:
            g = (g @ weights[2 * i].T) * (1.0 - acts[i] * acts[i])
    return grads


def ppo_loss_and_grads(params: PolicyParams, obs, actions, old_log_probs, advantages,
                       returns, cfg: PpoConfig):
    """Clipped-surrogate loss, stats and analytic gradients for one minibatch."""
    n = obs.shape[0]
    mean, raw, pi_acts = params.policy_mean(obs)
    std = np.exp(params.log_std)
    z = (actions - mean) / std
    log_probs = (-0.5 * z * z - params.log_std - 0.5 * LOG_2PI).sum(axis=1)

    ratio = np.exp(log_probs - old_log_probs)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    policy_loss = -np.minimum(unclipped, clipped).mean()

    values, v_acts = params.value(obs)
    value_err = values - returns
    value_loss = 0.5 * float(np.mean(value_err**2))

    entropy = params.entropy()
    total_loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # d(total)/d(log_probs): gradient flows through the unclipped branch only
    # where it is the active minimum (standard PPO subgradient)
    use_unclipped = ((advantages >= 0) & (ratio <= 1.0 + cfg.clip_eps)) | (
        (advantages < 0) & (ratio >= 1.0 - cfg.clip_eps)
    )
    dlogp = -(use_unclipped * ratio * advantages) / n

    # log_prob backward: d/d mean = z / std, d/d log_std = z^2 - 1
    dmean = dlogp[:, None] * (z / std)
    dlog_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    dlog_std -= cfg.entropy_coef * np.ones(params.action_dim)  # entropy bonus

    draw = dmean * (1.0 - mean * mean)  # through tanh
    pi_grads = _mlp_backward(params.pi, pi_acts, draw)

    dvalue = (cfg.value_coef * value_err / n)[:, None]
    v_grads = _mlp_backward(params.v, v_acts, dvalue)

    stats = {
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "kl": float(np.mean(old_log_probs - log_probs)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
    }
    return total_loss, [*pi_grads, *v_grads, dlog_std], stats


def ppo_update(params: PolicyParams, buffer: RolloutBuffer, cfg: PpoConfig,
               optimizer: Adam, bootstrap_value: float,
               rng: np.random.Generator) -> dict:
    """One PPO update: GAE over the buffer, then minibatch epochs of Adam."""
    if not buffer.full:
        raise ValueError("rollout buffer must be full before an update")

    advantages, returns = compute_gae(
        buffer.rewards, buffer.values, buffer.dones, bootstrap_value, cfg.gamma, cfg.lam
    )
    adv_std = advantages.std()
    advantages = (advantages - advantages.mean()) / (adv_std + 1e-8)

    n = buffer.capacity
    stats = {}
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            loss, grads, stats = ppo_loss_and_grads(
                params,
                buffer.obs[idx],
                buffer.actions[idx],
                buffer.log_probs[idx],
                advantages[idx],
                returns[idx],
                cfg,
            )
            if not np.isfinite(loss):
                raise DivergedUpdate(f"non-finite PPO loss: {loss}")
            optimizer.step(params.flat(), grads)
    return stats


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: PolicyParams, cfg: PpoConfig, path) -> None:
    doc = {
        "config": asdict(cfg) | {"hidden_sizes": list(cfg.hidden_sizes)},
        "obs_dim": params.obs_dim,
        "action_dim": params.action_dim,
        "weights": [
            {"name": name, "shape": list(np.shape(w)), "data": np.asarray(w).ravel().tolist()}
            for name, w in zip(params.names(), params.flat())
        ],
    }
    with open(str(path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[PolicyParams, PpoConfig]:
    with open(str(path), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg_dict = dict(doc["config"])
    cfg_dict["hidden_sizes"] = tuple(cfg_dict["hidden_sizes"])
    cfg = PpoConfig(**cfg_dict)
    params = PolicyParams(doc["obs_dim"], cfg.hidden_sizes, doc["action_dim"])
    by_name = {w["name"]: np.asarray(w["data"], dtype=np.float64).reshape(w["shape"])
               for w in doc["weights"]}
    loaded = [by_name[name] for name in params.names()]
    n_pi = len(params.pi)
    params.pi = loaded[:n_pi]
    params.v = loaded[n_pi:n_pi + len(params.v)]
    params.log_std = loaded[-1]
    return params, cfg


# -- training loop ---------------------------------------------------------------


@dataclass(eq=False)
class TrainResult:
    params: PolicyParams
    curve: list  # rows of (env_steps, mean_episode_reward, success_rate)
    stats: dict


def _scaled(vec: np.ndarray) -> np.ndarray:
    return vec * OBS_SCALE


def _default_factory(scenario: ScenarioConfig, pose_source, track_config=None,
                     vehicle=None):
    if pose_source is None:
        raise ValueError("need either env_factory or pose_source to build the environment")

    def factory():
        return DrivingEnv(scenario, pose_source, track_config=track_config, vehicle=vehicle)

    return factory


def train(scenario: ScenarioConfig, cfg: PpoConfig, pose_source=None, env_factory=None,
          track_config=None, vehicle=None, curve_path=None, checkpoint_path=None,
          log=None) -> TrainResult:
    """Alternating rollout/update loop until total_env_steps.

    The environment comes from `env_factory` when given, otherwise from the
    scenario plus `pose_source` with default track/vehicle configs.
    """
    if env_factory is None:
        env_factory = _default_factory(scenario, pose_source, track_config, vehicle)
    env: DrivingEnv = env_factory()

    rng = np.random.default_rng(cfg.seed)
    obs_dim = len(OBS_SCALE)
    params = PolicyParams(obs_dim, cfg.hidden_sizes, rng=np.random.default_rng(cfg.seed + 1))
    optimizer = Adam([np.shape(w) for w in params.flat()], cfg.lr)
    buffer = RolloutBuffer(cfg.rollout_len, obs_dim)

    episode_seed = cfg.seed * 1_000_000
    obs = _scaled(env.reset(seed=episode_seed).vector)
    episode_rewards: list[float] = []
    episode_outcomes: list[str] = []
    ep_reward = 0.0

    curve = []
    stats = {}
    env_steps = 0
    n_updates = max(cfg.total_env_steps // cfg.rollout_len, 1)
    for update in range(n_updates):
        buffer.clear()
        while not buffer.full:
            action, logp = params.act(obs[None], rng)
            value, _ = params.value(obs[None])
            next_obs, reward, terminated, truncated, _ = env.step(action_to_controls(action))
            ep_reward += reward
            done = terminated  # truncation bootstraps, termination does not
            buffer.add(obs, action, logp, reward, float(value[0]), done)
            env_steps += 1
            if terminated or truncated:
                episode_rewards.append(ep_reward)
                episode_outcomes.append(env.last_result.outcome)
                ep_reward = 0.0
                episode_seed += 1
                obs = _scaled(env.reset(seed=episode_seed).vector)
            else:
                obs = _scaled(next_obs.vector)

        bootstrap, _ = params.value(obs[None])
        stats = ppo_update(params, buffer, cfg, optimizer, float(bootstrap[0]), rng)

        window_rewards = episode_rewards[-20:]
        window_outcomes = episode_outcomes[-20:]
        mean_r = float(np.mean(window_rewards)) if window_rewards else 0.0
        succ = (
            100.0 * sum(o == "goal" for o in window_outcomes) / len(window_outcomes)
            if window_outcomes else 0.0
        )
        curve.append((env_steps, mean_r, succ))
        if log:
            log(f"update {update + 1}/{n_updates} steps={env_steps} "
                f"reward={mean_r:.3f} success={succ:.0f}% kl={stats.get('kl', 0):.4f}")
        if checkpoint_path and (update + 1) % cfg.checkpoint_every_updates == 0:
            save_checkpoint(params, cfg, checkpoint_path)

    if curve_path:
        with open(str(curve_path), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["env_steps", "mean_episode_reward", "success_rate"])
            writer.writerows(curve)
    if checkpoint_path:
        save_checkpoint(params, cfg, checkpoint_path)
    return TrainResult(params=params, curve=curve, stats=stats)


def evaluate(params: PolicyParams, scenario: ScenarioConfig = None, episodes: int = 50,
             pose_source=None, env_factory=None, track_config=None, vehicle=None,
             base_seed: int = 10_000) -> tuple[float, list[str]]:
    """Deterministic-policy evaluation: accuracy % and per-episode outcomes.

    Episode seeds run base_seed .. base_seed + episodes - 1.
    """
    if env_factory is None:
        env_factory = _default_factory(scenario, pose_source, track_config, vehicle)
    env: DrivingEnv = env_factory()
    outcomes = []
    for ep in range(episodes):
        obs = env.reset(seed=base_seed + ep)
        while True:
            action = params.act_deterministic(_scaled(obs.vector)[None])
            obs, _, terminated, truncated, _ = env.step(action_to_controls(action))
            if terminated or truncated:
                outcomes.append(env.last_result.outcome)
                break
    accuracy = 100.0 * sum(o == "goal" for o in outcomes) / max(len(outcomes), 1)
    return accuracy, outcomes
