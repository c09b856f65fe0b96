"""Run configuration: JSON loading with full default expansion, and agent (de)serialization."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, policy, sac, sim, tasks
from .graph import build_graph
from .nn import AdamState


class ConfigFileError(ValueError):
    """Invalid configuration; the message names the file line when one is known."""


@dataclass
class ActorConfig:
    kind: str = "gnn"  # gnn | mlp
    depth: int = 2
    hidden: int = 64
    vertex_dim: int = 64
    # flat actor width; 0 picks the width whose size is closest to the matching graph actor
    mlp_hidden: int = 0
    mlp_layers: int = 2


@dataclass
class RunConfig:
    task: str = "tracking"
    seed: int = 0
    steps: int = 100_000
    out: str = "runs/default"
    episode_steps: int = 0  # 0 = task default
    noise_sigma: float = 0.0
    critic_hidden: list = field(default_factory=lambda: [256, 256])
    actor: ActorConfig = field(default_factory=ActorConfig)
    robot: sim.RobotConfig = field(default_factory=sim.RobotConfig)
    sac: sac.SacConfig = field(default_factory=sac.SacConfig)
    reward: tasks.RewardParams = field(default_factory=tasks.RewardParams)
    # list of {"kind": "stiffness" | "slope", "value": float}
    perturbations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def robot_config(self) -> sim.RobotConfig:
        cfg = self.robot
        for p in self.perturbations:
            cfg = sim.apply_perturbation(cfg, p["kind"], float(p["value"]))
        return cfg


_NESTED = {"actor": ActorConfig, "robot": sim.RobotConfig, "sac": sac.SacConfig, "reward": tasks.RewardParams}


def _line_of(text: str, path: list[str]) -> int | None:
    pos = 0
    for key in path:
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            return None
        pos = m.start()
    return text.count("\n", 0, pos) + 1


def _fail(text: str, source: str, path: list[str], msg: str):
    line = _line_of(text, path) if text else None
    where = f"{source}:{line}" if line else source
    raise ConfigFileError(f"{where}: {'.'.join(path)}: {msg}")


def _coerce(value, default, text, source, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            _fail(text, source, path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(text, source, path, f"expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(text, source, path, f"expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            _fail(text, source, path, f"expected string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            _fail(text, source, path, f"expected list, got {value!r}")
        return value
    return value


def _build(cls, data: dict, text: str, source: str, path: list[str]):
    if not isinstance(data, dict):
        _fail(text, source, path, f"expected object, got {type(data).__name__}")
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            _fail(text, source, path + [key], f"unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        default = getattr(proto, f.name)
        if f.name in _NESTED and cls is RunConfig:
            kwargs[f.name] = _build(_NESTED[f.name], data[f.name], text, source, path + [f.name])
        else:
            kwargs[f.name] = _coerce(data[f.name], default, text, source, path + [f.name])
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except (ValueError, TypeError) as exc:
        bad = next((k for k in kwargs if k in str(exc)), None)
        _fail(text, source, path + ([bad] if bad else []), str(exc))
    return obj


def parse_config(data: dict, text: str = "", source: str = "<config>") -> RunConfig:
    cfg = _build(RunConfig, data, text, source, [])
    if cfg.task not in tasks.TASK_KINDS:
        _fail(text, source, ["task"], f"unknown task {cfg.task!r} (one of {', '.join(tasks.TASK_KINDS)})")
    if cfg.actor.kind not in ("gnn", "mlp"):
        _fail(text, source, ["actor", "kind"], f"must be 'gnn' or 'mlp', got {cfg.actor.kind!r}")
    if cfg.actor.depth not in (1, 2, 3):
        _fail(text, source, ["actor", "depth"], f"must be 1, 2 or 3, got {cfg.actor.depth}")
    if cfg.steps < 0 or cfg.episode_steps < 0 or cfg.noise_sigma < 0:
        _fail(text, source, ["steps"], "steps, episode_steps and noise_sigma must be non-negative")
    for i, p in enumerate(cfg.perturbations):
        if not isinstance(p, dict) or p.get("kind") not in ("stiffness", "slope") or "value" not in p:
            _fail(text, source, ["perturbations"], f"entry {i} must be {{'kind': 'stiffness'|'slope', 'value': number}}")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFileError(f"{path}: no such file")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return parse_config(data, text, str(path))


def config_schema() -> dict:
    """JSON schema of the run configuration, with defaults."""
    def typ(v):
        if isinstance(v, bool):
            return {"type": "boolean"}
        if isinstance(v, int):
            return {"type": "integer"}
        if isinstance(v, float):
            return {"type": "number"}
        if isinstance(v, str):
            return {"type": "string"}
        if isinstance(v, list):
            return {"type": "array"}
        return {}

    def obj(cls):
        proto = cls()
        props = {}
        for f in dataclasses.fields(cls):
            v = getattr(proto, f.name)
            if dataclasses.is_dataclass(v):
                props[f.name] = obj(type(v))
            else:
                props[f.name] = {**typ(v), "default": v}
        return {"type": "object", "additionalProperties": False, "properties": props}

    schema = obj(RunConfig)
    schema["$schema"] = "http://json-schema.org/draft-07/schema#"
    schema["title"] = "tgrl run configuration"
    schema["properties"]["task"]["enum"] = list(tasks.TASK_KINDS)
    schema["properties"]["actor"]["properties"]["kind"]["enum"] = ["gnn", "mlp"]
    schema["properties"]["actor"]["properties"]["depth"]["enum"] = [1, 2, 3]
    return schema


# ---------------------------------------------------------------------------
# agents


def make_actor(cfg: ActorConfig, seed: int):
    if cfg.kind == "gnn":
        return policy.gnn_actor_init(cfg.depth, cfg.hidden, cfg.vertex_dim, seed)
    width = cfg.mlp_hidden
    if width <= 0:
        budget = policy.gnn_actor_init(cfg.depth, cfg.hidden, cfg.vertex_dim, seed).n_params()
        width = policy.mlp_hidden_for_budget(budget, cfg.mlp_layers)
    return policy.mlp_actor_init((width,) * cfg.mlp_layers, seed)


def build_agent(cfg: RunConfig, model: sim.RobotModel | None = None) -> sac.Agent:
    if model is None:
        model, _ = sim.build_robot(cfg.robot_config())
    actor = make_actor(cfg.actor, cfg.seed)
    critic = policy.critic_init(tuple(cfg.critic_hidden), cfg.seed + 1)
    return sac.make_agent(actor, critic, build_graph(model), model.l_min, model.l_max, cfg.sac)


def _opt_meta(opt: AdamState) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t}


def agent_checkpoint(agent: sac.Agent, cfg: RunConfig, step: int) -> checkpoint.Checkpoint:
    meta = {
        "actor": agent.actor.arch(),
        "critic": agent.critic.arch(),
        "task": cfg.task,
        "step": step,
        "updates": agent.updates,
        "optimizers": {
            "actor": _opt_meta(agent.actor_opt),
            "critic": _opt_meta(agent.critic_opt),
            "alpha": _opt_meta(agent.alpha_opt),
        },
        "bounds": {"l_min": agent.l_min.tolist(), "l_max": agent.l_max.tolist()},
    }
    arrays = {k: np.array(v, dtype=np.float64) for k, v in agent.named().items()}
    return checkpoint.Checkpoint(meta, arrays, cfg.to_dict())


def _restore_opt(meta: dict, arrays: dict, prefix: str) -> AdamState:
    opt = AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["t"])
    mp, vp = f"{prefix}.m.", f"{prefix}.v."
    for k, v in arrays.items():
        if k.startswith(mp):
            opt.m[k[len(mp):]] = v.copy()
        elif k.startswith(vp):
            opt.v[k[len(vp):]] = v.copy()
    return opt


def agent_from_checkpoint(ckpt: checkpoint.Checkpoint) -> tuple[sac.Agent, RunConfig]:
    cfg = parse_config(ckpt.config, source="<checkpoint config>")
    agent = build_agent(cfg)
    target = agent.named()
    params = {k: v for k, v in target.items() if not k.startswith("opt.")}
    for k, v in params.items():
        if k not in ckpt.arrays:
            raise checkpoint.ManifestError(f"checkpoint lacks array {k!r}")
        if ckpt.arrays[k].shape != v.shape:
            raise checkpoint.ManifestError(f"array {k!r}: checkpoint shape {ckpt.arrays[k].shape} != model {v.shape}")
        v[...] = ckpt.arrays[k]
    opts = ckpt.meta["optimizers"]
    agent.actor_opt = _restore_opt(opts["actor"], ckpt.arrays, "opt.actor")
    agent.critic_opt = _restore_opt(opts["critic"], ckpt.arrays, "opt.critic")
    agent.alpha_opt = _restore_opt(opts["alpha"], ckpt.arrays, "opt.alpha")
    agent.updates = ckpt.meta["updates"]
    return agent, cfg
