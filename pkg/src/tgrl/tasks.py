"""Locomotion primitives: rewards, episode resets and the waypoint planner."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import sim

TASK_KINDS = ("tracking", "turn_ccw", "turn_cw")
TRACKING_DISTANCE = 1.0


class TaskError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str
    p0: np.ndarray
    p_target: np.ndarray | None = None
    d_turn: int = 1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}")
        self.p0 = np.asarray(self.p0, dtype=float)
        if self.kind == "tracking":
            if self.p_target is None:
                raise TaskError("tracking task needs p_target")
            self.p_target = np.asarray(self.p_target, dtype=float)
            if np.linalg.norm(self.p_target - self.p0) == 0.0:
                raise TaskError("tracking target coincides with start position")
        else:
            self.d_turn = 1 if self.kind == "turn_ccw" else -1
        if self.d_turn not in (1, -1):
            raise TaskError("d_turn must be +1 or -1")

    @classmethod
    def tracking(cls, p0, p_target) -> "TaskSpec":
        return cls("tracking", p0, p_target)

    @classmethod
    def turning(cls, p0, ccw: bool = True) -> "TaskSpec":
        return cls("turn_ccw" if ccw else "turn_cw", p0)


@dataclass(frozen=True)
class RewardParams:
    lambda1: float = 1.0
    lambda2: float = 0.5
    sigma_tr: float = 0.3
    lambda_turn: float = 1.0
    lambda_c: float = 0.01

    def __post_init__(self):
        if self.sigma_tr <= 0:
            raise TaskError("sigma_tr must be positive")
        for name in ("lambda1", "lambda2", "lambda_turn", "lambda_c"):
            if getattr(self, name) < 0:
                raise TaskError(f"{name} must be non-negative")


def task_feature(task: TaskSpec, p) -> np.ndarray:
    """Tracking vector to the target; turning primitives get zeros."""
    if task.kind == "tracking":
        return task.p_target - np.asarray(p, dtype=float)
    return np.zeros(2)


# ---------------------------------------------------------------------------
# rewards


def tracking_potential(p, p0, p_target, params: RewardParams) -> float:
    p, p0, p_target = (np.asarray(x, dtype=float) for x in (p, p0, p_target))
    gap = p_target - p0
    n = math.hypot(gap[0], gap[1])
    if n == 0.0:
        raise TaskError("degenerate tracking task: p_target == p0")
    d = gap / n
    disp = p - p0
    along = d[0] * disp[0] + d[1] * disp[1]
    lateral = abs(d[0] * disp[1] - d[1] * disp[0])
    dist = math.hypot(p[0] - p_target[0], p[1] - p_target[1])
    return params.lambda1 * along * math.exp(-lateral**2 / (2 * params.sigma_tr**2)) - params.lambda2 * dist


def tracking_reward(p_t, p_t1, task: TaskSpec, params: RewardParams) -> float:
    return (tracking_potential(p_t1, task.p0, task.p_target, params)
            - tracking_potential(p_t, task.p0, task.p_target, params))


def turning_potential(p, p0, params: RewardParams) -> float:
    d = np.asarray(p, dtype=float) - np.asarray(p0, dtype=float)
    return -params.lambda_turn * float(d @ d)


def turning_reward(yaw_t: float, yaw_t1: float, p_t, p_t1, task: TaskSpec, params: RewardParams) -> float:
    dyaw = sim.wrap_angle(yaw_t1 - yaw_t)
    return task.d_turn * dyaw + (turning_potential(p_t1, task.p0, params) - turning_potential(p_t, task.p0, params))


def control_cost(a, l0, lambda_c: float) -> float:
    a, l0 = np.asarray(a, dtype=float), np.asarray(l0, dtype=float)
    if a.shape != l0.shape:
        raise TaskError(f"action shape {a.shape} != nominal shape {l0.shape}")
    return lambda_c * float(np.sum((a - l0) ** 2))


@dataclass
class StepData:
    p_t: np.ndarray
    p_t1: np.ndarray
    action: np.ndarray
    l0: np.ndarray
    yaw_t: float | None = None
    yaw_t1: float | None = None


def step_reward(task: TaskSpec, data: StepData, params: RewardParams) -> float:
    cost = control_cost(data.action, data.l0, params.lambda_c)
    if task.kind == "tracking":
        return tracking_reward(data.p_t, data.p_t1, task, params) - cost
    if data.yaw_t is None or data.yaw_t1 is None:
        raise TaskError(f"{task.kind} reward needs yaw_t and yaw_t1")
    return turning_reward(data.yaw_t, data.yaw_t1, data.p_t, data.p_t1, task, params) - cost


# ---------------------------------------------------------------------------
# episodes


def episode_reset(kind: str, model: sim.RobotModel, base: sim.SimState, rng: np.random.Generator,
                  settle_time: float = 3.0, retries: int = 3,
                  settle_model: sim.RobotModel | None = None) -> tuple[sim.SimState, TaskSpec]:
    """Settle the robot from a uniformly random yaw and draw the task.

    ``base`` is a resting pose centred on the origin. Tracking targets sit
    1 m away at a uniform waypoint angle in [-pi, pi) from the heading.
    Settling runs on ``settle_model`` when given (level ground for a sloped
    ``model``, where regularized friction never lets the robot come to rest).
    """
    if kind not in TASK_KINDS:
        raise TaskError(f"unknown task kind {kind!r}")
    last: Exception | None = None
    for _ in range(retries):
        yaw = rng.uniform(-math.pi, math.pi)
        phi = rng.uniform(-math.pi, math.pi)
        state = sim.transform_state(base, yaw)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", UserWarning)
                state = sim.settle(settle_model or model, state, settle_time)
            state.time = 0.0
        except (sim.SimulationBlowup, UserWarning) as exc:
            last = exc
            continue
        p0, heading = sim.com_and_yaw(model, state)
        if kind == "tracking":
            ang = heading + phi
            target = p0 + TRACKING_DISTANCE * np.array([math.cos(ang), math.sin(ang)])
            return state, TaskSpec.tracking(p0, target)
        return state, TaskSpec.turning(p0, ccw=(kind == "turn_ccw"))
    raise TaskError(f"robot failed to settle after {retries} attempts: {last}")


# ---------------------------------------------------------------------------
# waypoint composition


@dataclass(frozen=True)
class PlannerTolerances:
    turn_threshold: float = math.radians(30.0)
    # a turn keeps going until the heading error drops below this
    turn_release: float = math.radians(15.0)
    arrival_radius: float = 0.3
    lookahead: float = 1.0


@dataclass
class PrimitiveCommand:
    kind: str  # a task kind, or "done"
    target: np.ndarray | None = None
    waypoint_index: int = 0
    heading_error: float = 0.0


@dataclass
class PlannerState:
    waypoints: list[np.ndarray]
    index: int = 0
    current: str | None = None
    hits: list[int] = field(default_factory=list)

    @property
    def done(self) -> bool:
        return self.index >= len(self.waypoints)


def compose_plan(p, yaw: float, plan: PlannerState, tol: PlannerTolerances = PlannerTolerances(),
                 step: int = 0) -> PrimitiveCommand:
    """Pick the primitive for the current pose; consumes reached waypoints in ``plan``."""
    p = np.asarray(p, dtype=float)
    while not plan.done and np.linalg.norm(plan.waypoints[plan.index] - p) <= tol.arrival_radius:
        plan.index += 1
        plan.hits.append(step)
        plan.current = None
    if plan.done:
        plan.current = "done"
        return PrimitiveCommand("done", None, plan.index)
    wp = plan.waypoints[plan.index]
    gap = wp - p
    bearing = math.atan2(gap[1], gap[0])
    err = sim.wrap_angle(bearing - yaw)
    turning = plan.current in ("turn_ccw", "turn_cw")
    limit = tol.turn_release if turning else tol.turn_threshold
    if abs(err) > limit:
        kind = "turn_ccw" if err > 0 else "turn_cw"
        plan.current = kind
        return PrimitiveCommand(kind, None, plan.index, err)
    plan.current = "tracking"
    target = p + tol.lookahead * gap / np.linalg.norm(gap)
    return PrimitiveCommand("tracking", target, plan.index, err)
