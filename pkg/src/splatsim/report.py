"""Benchmark report: headless episode loop with per-frame timing.

Reports CPU-honest columns (frame-time percentiles and peak resident memory)
as JSON, and renders a frame-time figure next to the delimited output.
"""

from __future__ import annotations

import json
import resource
import time
from dataclasses import asdict, dataclass

import numpy as np

from .env import DrivingEnv
from .physics import Controls


@dataclass(frozen=True)
class BenchReport:
    avg_fps: float
    p50_frame_ms: float
    p99_frame_ms: float
    peak_rss_mb: float
    gaussians_rendered: int
    steps_simulated: int
    frames: int
    wall_clock_s: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def peak_rss_mb() -> float:
    # ru_maxrss is kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def run_bench(env: DrivingEnv, duration_s: float, seed: int = 0,
              throttle: float = 0.4) -> tuple[BenchReport, np.ndarray]:
    """Scripted episode loop, rendering every step at the configured resolution.

    Returns the report plus the raw per-frame times (seconds) for plotting.
    """
    env.reset(seed=seed)
    env._ensure_scenes()
    gaussians = sum(
        len(s) for s in (env._env_scene, env._agent_scene) if s is not None
    )

    frame_times = []
    steps = 0
    action = Controls(throttle=throttle)
    t_start = time.perf_counter()
    while time.perf_counter() - t_start < duration_s:
        t0 = time.perf_counter()
        _, _, terminated, truncated, _ = env.step(action)
        env.render_observation(env.render_settings.width, env.render_settings.height)
        frame_times.append(time.perf_counter() - t0)
        steps += 1
        if terminated or truncated:
            seed += 1
            env.reset(seed=seed)
    elapsed = time.perf_counter() - t_start

    times = np.asarray(frame_times)
    report = BenchReport(
        avg_fps=len(times) / elapsed,
        p50_frame_ms=float(np.percentile(times, 50) * 1e3),
        p99_frame_ms=float(np.percentile(times, 99) * 1e3),
        peak_rss_mb=peak_rss_mb(),
        gaussians_rendered=gaussians,
        steps_simulated=steps,
        frames=len(times),
        wall_clock_s=elapsed,
    )
    return report, times


def save_frame_time_figure(times_s: np.ndarray, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ms = np.asarray(times_s) * 1e3
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax1.plot(ms, lw=0.8)
    ax1.set_xlabel("frame")
    ax1.set_ylabel("frame time (ms)")
    ax1.set_title("frame times")
    ax2.hist(ms, bins=min(40, max(len(ms) // 4, 4)), color="tab:blue", alpha=0.8)
    for q, style in ((50, "--"), (99, ":")):
        ax2.axvline(np.percentile(ms, q), color="tab:red", ls=style, label=f"p{q}")
    ax2.set_xlabel("frame time (ms)")
    ax2.set_ylabel("count")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)


def save_learning_curve_figure(curve_rows, path) -> None:
    """Plot (env_steps, mean reward, success rate) rows from training."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = np.asarray(curve_rows, dtype=np.float64)
    fig, ax1 = plt.subplots(figsize=(6.5, 3.6))
    ax1.plot(rows[:, 0], rows[:, 1], color="tab:blue", label="mean episode reward")
    ax1.set_xlabel("environment steps")
    ax1.set_ylabel("mean episode reward", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(rows[:, 0], rows[:, 2], color="tab:orange", label="success rate")
    ax2.set_ylabel("success rate (%)", color="tab:orange")
    ax2.set_ylim(-5, 105)
    fig.tight_layout()
    fig.savefig(str(path), dpi=110)
    plt.close(fig)
