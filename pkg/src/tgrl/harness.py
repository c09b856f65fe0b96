"""Experiment drivers behind the command line: train, eval, sweep, compose and bench."""

from __future__ import annotations

import csv
import json
import math
import os
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import checkpoint, sac, sim, svg, tasks
from .config import RunConfig, agent_checkpoint, agent_from_checkpoint, build_agent, parse_config
from .env import DT_CONTROL, TensegrityEnv, lpf_apply, lpf_init, policy_observation

SMOOTH_WINDOW = 10


class HarnessError(RuntimeError):
    pass


class BenchCacheError(HarnessError):
    pass


def timestamp() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_csv(path, header, rows) -> None:
    """CSV with a ``# run <ISO-8601>`` comment line before the header."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# run {timestamp()}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_jsonable(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def dump_json(obj) -> str:
    """Strict JSON: non-finite floats become null."""
    return json.dumps(_jsonable(obj), indent=2, allow_nan=False)


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def make_env(cfg: RunConfig, seed: int | None = None, noise_sigma: float | None = None,
             robot: sim.RobotConfig | None = None, task: str | None = None) -> TensegrityEnv:
    return TensegrityEnv(
        task or cfg.task, robot or cfg.robot_config(), cfg.reward,
        cfg.noise_sigma if noise_sigma is None else noise_sigma, cfg.sac.beta,
        cfg.episode_steps or None, cfg.seed if seed is None else seed,
    )


# ---------------------------------------------------------------------------
# train


def run_training(cfg: RunConfig, out_dir=None, on_episode=None) -> tuple[Path, list[dict]]:
    """Train and write checkpoint.ckpt, train_log.csv and resolved_config.json."""
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, out=str(out))
    (out / "resolved_config.json").write_text(cfg.to_json() + "\n")
    env = make_env(cfg)
    agent = build_agent(cfg, env.model)
    result = sac.train(env, agent, cfg.sac, cfg.steps, cfg.seed, on_episode)
    checkpoint.save(out / "checkpoint.ckpt", agent_checkpoint(agent, cfg, result.steps))
    write_csv(out / "train_log.csv", sac.LOG_COLUMNS, [[r[c] for c in sac.LOG_COLUMNS] for r in result.log])
    return out, result.log


def load_agent(path):
    if not Path(path).is_file():
        raise HarnessError(f"{path}: no such checkpoint")
    ckpt = checkpoint.load(path)
    agent, cfg = agent_from_checkpoint(ckpt)
    return agent, cfg


# ---------------------------------------------------------------------------
# eval


@dataclass
class EpisodeOutcome:
    ret: float
    phi: float  # waypoint angle relative to the initial heading (tracking)
    deviation: float  # final distance to the target (tracking)
    yaw_rate: float  # deg/s, CCW positive
    drift: float  # final CoM distance from the start (m)
    blowup: bool


def run_episode(agent: sac.Agent, env: TensegrityEnv, deterministic: bool = True,
                rng: np.random.Generator | None = None) -> EpisodeOutcome:
    obs = env.reset()
    p0, yaw0 = env.p.copy(), env.yaw
    task = env.task
    phi = 0.0
    if task.kind == "tracking":
        gap = task.p_target - p0
        phi = sim.wrap_angle(math.atan2(gap[1], gap[0]) - yaw0)
    total, blowup = 0.0, False
    while True:
        res = env.step(sac.act(agent, obs, rng, deterministic))
        if res.blowup:
            blowup = True
            break
        total += res.reward
        obs = res.obs
        if res.truncated or res.done:
            break
    T = env.t * DT_CONTROL
    dev = float(np.linalg.norm(env.p - task.p_target)) if task.kind == "tracking" else float("nan")
    return EpisodeOutcome(total, phi, dev, math.degrees(env.yaw - yaw0) / T, float(np.linalg.norm(env.p - p0)), blowup)


def evaluate(agent: sac.Agent, cfg: RunConfig, episodes: int, seed: int, noise_sigma: float | None = None,
             robot: sim.RobotConfig | None = None, task: str | None = None) -> list[EpisodeOutcome]:
    env = make_env(cfg, seed=seed, noise_sigma=noise_sigma, robot=robot, task=task)
    return [run_episode(agent, env) for _ in range(episodes)]


def _mean_std(xs) -> tuple[float, float]:
    xs = [x for x in xs if math.isfinite(x)]
    if not xs:
        return float("nan"), float("nan")
    return float(np.mean(xs)), float(np.std(xs))


def eval_metrics(outcomes: list[EpisodeOutcome], kind: str, bins: int = 8) -> dict:
    rets = [o.ret for o in outcomes]
    m = {"task": kind, "episodes": len(outcomes), "mean_return": _mean_std(rets)[0],
         "std_return": _mean_std(rets)[1], "blowups": sum(o.blowup for o in outcomes)}
    if kind == "tracking":
        m["deviation_mean"], m["deviation_std"] = _mean_std([o.deviation for o in outcomes])
        edges = np.linspace(-math.pi, math.pi, bins + 1)
        per = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            sel = [o.deviation for o in outcomes if lo <= o.phi < hi]
            mean, std = _mean_std(sel)
            per.append({"phi_lo_deg": math.degrees(lo), "phi_hi_deg": math.degrees(hi),
                        "n": len(sel), "deviation_mean": mean, "deviation_std": std})
        m["per_angle"] = per
        m["task_metric"] = m["deviation_mean"]
    else:
        m["yaw_rate_deg_s"], m["yaw_rate_std"] = _mean_std([o.yaw_rate for o in outcomes])
        m["drift_mean"], m["drift_std"] = _mean_std([o.drift for o in outcomes])
        m["task_metric"] = m["yaw_rate_deg_s"]
    return m


def latency_probe(agent: sac.Agent, cfg: RunConfig, n: int = 200, seed: int = 0) -> dict:
    """Median wall time of one deterministic policy forward pass on a single observation."""
    env = make_env(cfg, seed=seed)
    obs = env.reset()
    sac.act(agent, obs, None, True)
    times = []
    for _ in range(n):
        t0 = time.perf_counter()
        sac.act(agent, obs, None, True)
        times.append(time.perf_counter() - t0)
    return {"median_ms": 1e3 * statistics.median(times), "p90_ms": 1e3 * float(np.percentile(times, 90)), "n": n}


def cmd_eval(ckpt_path, task: str | None, episodes: int, seed: int, out_dir=None, latency: bool = False) -> dict:
    agent, cfg = load_agent(ckpt_path)
    if task is not None and task != cfg.task:
        raise HarnessError(f"task mismatch: requested {task!r} but checkpoint was trained on {cfg.task!r}")
    metrics = eval_metrics(evaluate(agent, cfg, episodes, seed), cfg.task)
    metrics["seed"] = seed
    if latency:
        metrics["latency"] = latency_probe(agent, cfg, seed=seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(dump_json(metrics) + "\n")
    return metrics


# ---------------------------------------------------------------------------
# sweep

SWEEP_AXES = ("stiffness", "noise", "slope")
DEFAULT_GRIDS = {
    "stiffness": [30.0, 150.0, 300.0, 450.0, 800.0, 1200.0],
    "noise": [0.0, 0.05, 0.15, 0.25],
    "slope": [0.0, 10.0, 25.0, 35.0],
}


def sweep(agent: sac.Agent, cfg: RunConfig, axis: str, grid, episodes: int, seed: int) -> list[list]:
    """Evaluate a fixed policy with one perturbation axis varied; rows follow ``SWEEP_HEADER``.

    A grid value at which the robot cannot be reset gets NaN metrics.
    """
    if axis not in SWEEP_AXES:
        raise HarnessError(f"unknown sweep axis {axis!r} (one of {', '.join(SWEEP_AXES)})")
    rows = []
    for value in grid:
        value = float(value)
        robot, noise = cfg.robot_config(), None
        if axis == "noise":
            noise = value
        else:
            robot = sim.apply_perturbation(robot, axis, value)
        try:
            outs = evaluate(agent, cfg, episodes, seed, noise_sigma=noise, robot=robot)
        except tasks.TaskError as exc:
            # e.g. a collapsed structure that never comes to rest: no episode can start
            warnings.warn(f"sweep {axis}={value:g}: {exc}", stacklevel=2)
            rows.append([value, math.nan, math.nan, math.nan, 0])
            continue
        m = eval_metrics(outs, cfg.task)
        rows.append([value, m["mean_return"], m["task_metric"], m["std_return"], m["blowups"]])
    return rows


SWEEP_HEADER = ("axis_value", "mean_return", "mean_task_metric", "std", "blowups")


def cmd_sweep(ckpt_path, axis: str, grid, episodes: int, seed: int, out_dir) -> Path:
    agent, cfg = load_agent(ckpt_path)
    rows = sweep(agent, cfg, axis, grid or DEFAULT_GRIDS.get(axis, []), episodes, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{axis}.csv"
    write_csv(path, SWEEP_HEADER, rows)
    return path


# ---------------------------------------------------------------------------
# compose


def square_waypoints(side: float = 1.5, start=(0.0, 0.0), heading: float = 0.0, ccw: bool = True) -> list[np.ndarray]:
    """Corners of a square walked from ``start``; the first leg runs along ``heading``."""
    d = np.array([math.cos(heading), math.sin(heading)])
    n = np.array([-d[1], d[0]]) * (1 if ccw else -1)
    s = np.asarray(start, dtype=float)
    return [s + side * d, s + side * (d + n), s + side * n, s.copy()]


def load_waypoints(path) -> list[np.ndarray]:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list) or not data or any(len(w) != 2 for w in data):
        raise HarnessError(f"{path}: waypoints must be a non-empty list of [x, y] pairs")
    return [np.asarray(w, dtype=float) for w in data]


@dataclass
class ComposeResult:
    rows: list  # (t, com, yaw, endcaps)
    events: list[dict]  # primitive switches
    hits: list[int]  # control step at which each waypoint was reached
    waypoints: list[np.ndarray]
    completed: bool
    steps: int


def compose(agents: dict[str, sac.Agent], waypoints, robot: sim.RobotConfig | None = None,
            max_steps: int = 6000, beta: float = 0.8, tol: tasks.PlannerTolerances = tasks.PlannerTolerances(),
            yaw0: float = 0.0) -> ComposeResult:
    """Closed-loop waypoint following with the planner switching between primitives.

    The robot starts at rest at the origin, heading along ``yaw0``.
    """
    missing = [k for k in tasks.TASK_KINDS if k not in agents]
    if missing:
        raise HarnessError(f"missing primitive checkpoint(s): {', '.join(missing)}")
    model, base = sim.build_robot(robot or sim.RobotConfig())
    state = sim.settle(model, sim.transform_state(base, yaw0))
    state.time = 0.0
    plan = tasks.PlannerState([np.asarray(w, dtype=float) for w in waypoints])
    lpf = lpf_init(model.l0)
    p, yaw = sim.com_and_yaw(model, state)
    rows, events = [], []
    prev = None
    step = 0
    for step in range(max_steps + 1):
        P, _ = sim.endcap_kinematics(model, state)
        rows.append((state.time, p, yaw, P))
        cmd = tasks.compose_plan(p, yaw, plan, tol, step)
        if cmd.kind == "done":
            break
        if cmd.kind != prev:
            events.append({"step": step, "t": state.time, "primitive": cmd.kind, "waypoint": cmd.waypoint_index})
            prev = cmd.kind
        if step == max_steps:
            break
        obs = sim.observe(model, state)
        feat = cmd.target - p if cmd.kind == "tracking" else np.zeros(2)
        raw = sac.act(agents[cmd.kind], policy_observation(obs, feat), None, deterministic=True)
        command, lpf = lpf_apply(lpf, raw, beta)
        state = sim.step(model, state, command, DT_CONTROL)
        p, yaw = sim.com_and_yaw(model, state, yaw)
    return ComposeResult(rows, events, list(plan.hits), plan.waypoints, plan.done, step)


def cmd_compose(ckpt_paths, waypoints_path, out_dir, max_steps: int = 6000) -> ComposeResult:
    agents = {}
    robot = None
    for path in ckpt_paths:
        agent, cfg = load_agent(path)
        agents[cfg.task] = agent
        robot = robot or cfg.robot_config()
    wps = load_waypoints(waypoints_path) if waypoints_path else square_waypoints()
    res = compose(agents, wps, robot, max_steps)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim.write_trajectory_csv(out / "trajectory.csv", res.rows)
    write_csv(out / "events.csv", ("step", "t", "primitive", "waypoint"),
              [[e["step"], e["t"], e["primitive"], e["waypoint"]] for e in res.events])
    write_csv(out / "waypoint_hits.csv", ("waypoint", "x", "y", "step", "t"),
              [[i, res.waypoints[i][0], res.waypoints[i][1], s, s * DT_CONTROL] for i, s in enumerate(res.hits)])
    com = np.array([r[1] for r in res.rows])
    W = np.array(res.waypoints)
    svg.write_plot(out / "trajectory.svg", [{
        "series": [svg.Series("CoM", com[:, 0], com[:, 1]), svg.Series("waypoints", W[:, 0], W[:, 1], markers=True)],
        "title": f"composed trajectory ({len(res.hits)}/{len(W)} waypoints)", "xlabel": "x (m)", "ylabel": "y (m)",
        "equal": True,
    }])
    return res


# ---------------------------------------------------------------------------
# bench


def smooth(y: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average over up to ``window`` episodes."""
    y = np.asarray(y, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(y)])
    idx = np.arange(1, len(y) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def final_return(log: list[dict], n: int = 10) -> float:
    rets = [float(r["return"]) for r in log if not int(float(r.get("blowup", 0)))]
    return float(np.mean(rets[-n:])) if rets else float("nan")


def cell_configs(matrix: dict, base: RunConfig, out: Path) -> list[tuple[str, RunConfig]]:
    cells = []
    for cell in matrix["cells"]:
        name = cell["name"]
        for seed in cell.get("seeds", [base.seed]):
            d = base.to_dict()
            d["actor"].update(cell.get("actor", {}))
            for key in ("task", "steps", "critic_hidden", "episode_steps"):
                if key in cell:
                    d[key] = cell[key]
            for key in ("sac", "reward", "robot"):
                d[key].update(cell.get(key, {}))
            d["seed"] = seed
            d["out"] = str(out / "cells" / name / f"seed{seed}")
            cells.append((name, parse_config(d, source=f"bench cell {name}")))
    return cells


def _cached(cfg: RunConfig, force: bool) -> bool:
    out = Path(cfg.out)
    resolved = out / "resolved_config.json"
    if not resolved.exists():
        return False
    old = parse_config(json.loads(resolved.read_text()), source=str(resolved))
    if old.digest() != cfg.digest():
        if force:
            return False
        raise BenchCacheError(f"{out}: cached run has config hash {old.digest()}, requested {cfg.digest()}; "
                              "refusing stale reuse (rerun with --force)")
    return (out / "checkpoint.ckpt").exists() and (out / "train_log.csv").exists()


def _train_cell(cfg_dict: dict) -> str:
    cfg = parse_config(cfg_dict)
    run_training(cfg)
    return cfg.out


def threads() -> int:
    try:
        return max(1, int(os.environ.get("TGRL_THREADS", "1")))
    except ValueError:
        return 1


def run_cells(cells: list[tuple[str, RunConfig]], force: bool = False, log=print) -> None:
    todo = [cfg for _, cfg in cells if not _cached(cfg, force)]
    if not todo:
        return
    n = min(threads(), len(todo))
    if n == 1:
        for cfg in todo:
            log(f"training {cfg.out}")
            run_training(cfg)
    else:
        with ProcessPoolExecutor(n) as pool:
            for out in pool.map(_train_cell, [c.to_dict() for c in todo]):
                log(f"finished {out}")


def aggregate(cells: list[tuple[str, RunConfig]]) -> dict[str, dict]:
    """Per configuration: raw and smoothed mean/std curves on a shared step grid plus per-seed finals."""
    groups: dict[str, list[RunConfig]] = {}
    for name, cfg in cells:
        groups.setdefault(name, []).append(cfg)
    out = {}
    for name, cfgs in groups.items():
        logs = [read_csv(Path(c.out) / "train_log.csv") for c in cfgs]
        finals = [final_return(lg) for lg in logs]
        if not all(logs):
            out[name] = {"steps": np.zeros(0), "finals": finals, "seeds": [c.seed for c in cfgs]}
            continue
        steps = [np.array([float(r["step"]) for r in lg]) for lg in logs]
        rets = [np.array([float(r["return"]) for r in lg]) for lg in logs]
        walls = [np.array([float(r["wall_ms"]) / 1e3 for r in lg]) for lg in logs]
        grid = steps[int(np.argmin([s[-1] for s in steps]))]
        raw = np.array([np.interp(grid, s, r) for s, r in zip(steps, rets)])
        sm = np.array([np.interp(grid, s, smooth(r)) for s, r in zip(steps, rets)])
        wall = np.array([np.interp(grid, s, w) for s, w in zip(steps, walls)])
        out[name] = {
            "steps": grid, "mean": raw.mean(0), "std": raw.std(0), "smooth_mean": sm.mean(0),
            "smooth_std": sm.std(0), "wall_s": wall.mean(0), "finals": finals, "seeds": [c.seed for c in cfgs],
        }
    return out


def cmd_bench(matrix_path, out_dir, force: bool = False, log=print) -> dict[str, dict]:
    matrix_path = Path(matrix_path)
    matrix = json.loads(matrix_path.read_text())
    if "cells" not in matrix or not matrix["cells"]:
        raise HarnessError(f"{matrix_path}: matrix needs a non-empty 'cells' list")
    base_spec = matrix.get("base", {})
    if isinstance(base_spec, str):
        base_spec = json.loads((matrix_path.parent / base_spec).read_text())
    base = parse_config(base_spec, source=f"{matrix_path} base")
    out = Path(out_dir)
    cells = cell_configs(matrix, base, out)
    run_cells(cells, force, log)
    agg = aggregate(cells)
    write_bench_outputs(agg, out)
    return agg


def write_bench_outputs(agg: dict[str, dict], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, a in agg.items():
        for i in range(len(a["steps"])):
            rows.append([name, int(a["steps"][i]), a["wall_s"][i], a["mean"][i], a["std"][i],
                         a["smooth_mean"][i], a["smooth_std"][i]])
    write_csv(out / "bench_curves.csv",
              ("config", "step", "wall_s", "mean_return", "std_return", "smooth_mean_return", "smooth_std_return"), rows)
    write_csv(out / "bench_summary.csv", ("config", "seed", "final10_return"),
              [[name, s, f] for name, a in agg.items() for s, f in zip(a["seeds"], a["finals"])])
    panels = []
    for xkey, xlabel in (("steps", "env steps"), ("wall_s", "wall-clock (s)")):
        series = [svg.Series(name, a[xkey], a["smooth_mean"], a["smooth_std"]) for name, a in agg.items()
                  if len(a["steps"])]
        panels.append({"series": series, "title": f"return vs {xlabel}", "xlabel": xlabel, "ylabel": "episode return"})
    svg.write_plot(out / "learning_curves.svg", panels)
