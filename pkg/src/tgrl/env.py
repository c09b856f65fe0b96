"""Gym-style episode wrapper: simulator, action filter, reward and features."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import sim, tasks
from .graph import build_graph, flat_observation

EPISODE_STEPS = {"tracking": 500, "turn_ccw": 750, "turn_cw": 750}
DT_CONTROL = 0.02


@dataclass
class LpfState:
    previous: np.ndarray  # last filtered command per tendon (m)


def lpf_init(l0) -> LpfState:
    return LpfState(np.array(l0, dtype=float))


def lpf_apply(state: LpfState, raw, beta: float) -> tuple[np.ndarray, LpfState]:
    """First-order filter ``beta * previous + (1 - beta) * raw``."""
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    out = beta * state.previous + (1.0 - beta) * np.asarray(raw, dtype=float)
    return out, LpfState(out.copy())


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool  # true terminal; never set by time limits
    truncated: bool
    blowup: bool
    info: dict


def heading_frame(obs: sim.Observation, task_feature) -> tuple[sim.Observation, np.ndarray]:
    """Express an observation in the robot's heading frame.

    Ground-plane coordinates are taken relative to the observed CoM and
    rotated by minus the observed yaw; heights are unchanged. The same
    rotation applies to velocities and to the task vector, so a motion looks
    identical at every heading and position on flat ground.
    """
    P = np.array(obs.positions, dtype=float)
    V = np.array(obs.velocities, dtype=float)
    com, yaw = sim.com_and_yaw_from_endcaps(P)
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([[c, s], [-s, c]])
    P[:, :2] = (P[:, :2] - com) @ R.T
    V[:, :2] = V[:, :2] @ R.T
    return sim.Observation(P, V), R @ np.asarray(task_feature, dtype=float)


def policy_observation(obs: sim.Observation, task_feature) -> np.ndarray:
    """Flat policy input: heading-frame features (see :func:`heading_frame`)."""
    return flat_observation(*heading_frame(obs, task_feature))


class TensegrityEnv:
    """One primitive on one robot.

    Observations are flat heading-frame vectors (see :func:`policy_observation`);
    the frame and the task feature use the observed endcaps, so position
    noise reaches them as well. Rewards always use the true state.
    """

    def __init__(self, kind: str, config: sim.RobotConfig | None = None,
                 reward: tasks.RewardParams | None = None, noise_sigma: float = 0.0,
                 beta: float = 0.8, episode_steps: int | None = None, seed: int = 0):
        if kind not in tasks.TASK_KINDS:
            raise tasks.TaskError(f"unknown task kind {kind!r}")
        self.kind = kind
        self.config = config or sim.RobotConfig()
        self.model, base = sim.build_robot(self.config)
        # on a slope the robot is settled on level ground and then placed
        self.settle_model = self.model
        if self.config.slope_deg != 0.0:
            self.settle_model, _ = sim.build_robot(dataclasses.replace(self.config, slope_deg=0.0))
        self.base = sim.settle(self.settle_model, base)
        self.graph = build_graph(self.model)
        self.reward_params = reward or tasks.RewardParams()
        self.noise_sigma = float(noise_sigma)
        self.beta = float(beta)
        self.episode_steps = int(episode_steps or EPISODE_STEPS[kind])
        # separate streams: episodes drawn for a seed do not depend on the noise level
        self.rng = np.random.default_rng(seed)
        self.noise_rng = np.random.default_rng([seed, 1])
        self.l0 = self.model.l0.copy()
        self.l_min = self.model.l_min.copy()
        self.l_max = self.model.l_max.copy()
        self.state: sim.SimState | None = None
        self.task: tasks.TaskSpec | None = None

    def _observe(self) -> np.ndarray:
        obs = sim.observe(self.model, self.state, self.noise_sigma, self.noise_rng)
        p_obs, _ = sim.com_and_yaw_from_endcaps(obs.positions)
        return policy_observation(obs, tasks.task_feature(self.task, p_obs))

    def reset(self) -> np.ndarray:
        self.state, self.task = tasks.episode_reset(self.kind, self.model, self.base, self.rng,
                                                      settle_model=self.settle_model)
        self.p, self.yaw = sim.com_and_yaw(self.model, self.state)
        self.lpf = lpf_init(self.l0)
        self.t = 0
        return self._observe()

    def step(self, raw) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() first")
        raw = np.asarray(raw, dtype=float)
        command, self.lpf = lpf_apply(self.lpf, raw, self.beta)
        self.t += 1
        try:
            self.state = sim.step(self.model, self.state, command, DT_CONTROL)
        except sim.SimulationBlowup as exc:
            return StepResult(np.zeros(0), 0.0, False, True, True, {"error": str(exc)})
        p1, yaw1 = sim.com_and_yaw(self.model, self.state, self.yaw)
        data = tasks.StepData(self.p, p1, raw, self.l0, self.yaw, yaw1)
        r = tasks.step_reward(self.task, data, self.reward_params)
        info = {"p": p1, "yaw": yaw1, "command": command}
        self.p, self.yaw = p1, yaw1
        truncated = self.t >= self.episode_steps
        return StepResult(self._observe(), r, False, truncated, False, info)


def random_policy_return(env: TensegrityEnv, episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Episode returns under uniform random commands within the bounds."""
    out = []
    for _ in range(episodes):
        env.reset()
        total = 0.0
        while True:
            res = env.step(rng.uniform(env.l_min, env.l_max))
            total += res.reward
            if res.truncated or res.done:
                break
        out.append(total)
    return np.array(out)
