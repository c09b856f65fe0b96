"""Soft actor-critic: replay buffer, the three updates and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import policy
from .graph import GraphSpec, features_from_flat
from .nn import AdamState, Tape, TrainingError, adam_step
from .policy import CriticParams, N_ACTIONS


@dataclass
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr: float = 3e-4
    batch_size: int = 256
    target_entropy: float = -float(N_ACTIONS)
    init_alpha: float = 1.0
    buffer_capacity: int = 200_000
    steps_per_update: int = 1  # env steps between gradient updates
    warmup: int = 1000
    beta: float = 0.8
    # multiplies rewards seen by the critics; logged returns stay unscaled
    reward_scale: float = 1.0

    def validate(self) -> "SacConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.lr <= 0 or self.init_alpha <= 0 or self.reward_scale <= 0:
            raise ValueError("lr, init_alpha and reward_scale must be positive")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.steps_per_update < 1 or self.warmup < 0:
            raise ValueError("batch_size, buffer_capacity, steps_per_update must be >= 1 and warmup >= 0")
        return self


# ---------------------------------------------------------------------------
# replay


@dataclass
class Batch:
    obs: np.ndarray  # (B, 50) flat
    action: np.ndarray  # (B, 6) pre-filter command, metres
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO ring of flat transitions.

    Graph features are rebuilt from the flat vectors when a batch is drawn,
    so only one form of each observation is stored.
    """

    def __init__(self, capacity: int, obs_dim: int, action_dim: int = N_ACTIONS, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros((capacity, action_dim))
        self.reward = np.zeros(capacity)
        self.done = np.zeros(capacity)
        self.cursor = 0
        self.size = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def push(self, obs, action, reward: float, next_obs, done: bool) -> None:
        if not math.isfinite(reward):
            raise ValueError(f"non-finite reward {reward}")
        i = self.cursor
        self.obs[i] = obs
        self.action[i] = action
        self.reward[i] = reward
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int) -> Batch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = self.rng.integers(0, self.size, size=n)
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx])


# ---------------------------------------------------------------------------
# agent


@dataclass
class Agent:
    actor: object  # GnnActorParams | MlpActorParams
    critic: CriticParams
    target: CriticParams
    log_alpha: np.ndarray  # shape (1,)
    graph: GraphSpec
    l_min: np.ndarray
    l_max: np.ndarray
    actor_opt: AdamState = field(default_factory=AdamState)
    critic_opt: AdamState = field(default_factory=AdamState)
    alpha_opt: AdamState = field(default_factory=AdamState)
    updates: int = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.l_max + self.l_min)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.l_max - self.l_min)

    def normalize(self, action: np.ndarray) -> np.ndarray:
        return (action - self.mid) / self.half

    def named(self) -> dict[str, np.ndarray]:
        """Every parameter and optimizer array, keyed by a stable name."""
        out = {}
        out.update(self.actor.named())
        out.update(self.critic.named("critic"))
        out.update(self.target.named("target"))
        out["log_alpha"] = self.log_alpha
        out.update(self.actor_opt.arrays("opt.actor"))
        out.update(self.critic_opt.arrays("opt.critic"))
        out.update(self.alpha_opt.arrays("opt.alpha"))
        return out


def make_agent(actor, critic: CriticParams, graph: GraphSpec, l_min, l_max, cfg: SacConfig) -> Agent:
    return Agent(
        actor, critic, critic.copy(), np.array([math.log(cfg.init_alpha)]), graph,
        np.asarray(l_min, dtype=float), np.asarray(l_max, dtype=float),
        AdamState(lr=cfg.lr), AdamState(lr=cfg.lr), AdamState(lr=cfg.lr),
    )


def _actor_inputs(agent: Agent, obs: np.ndarray) -> dict:
    if agent.actor.kind == "gnn":
        f = features_from_flat(agent.graph, obs)
        return {"vertex": f.vertex, "edge": f.edge}
    return {"flat": obs}


def act(agent: Agent, obs: np.ndarray, rng: np.random.Generator | None, deterministic: bool = False) -> np.ndarray:
    """Command in metres for one flat observation."""
    tape = Tape(record=False)
    mean, log_std = policy.actor_apply(tape, agent.actor, agent.graph, _actor_inputs(agent, obs), named=False)
    dist = policy.ActionDistribution(mean.value, log_std.value, agent.l_min, agent.l_max)
    if deterministic:
        return dist.deterministic()
    action, _ = policy.sample_action(dist, rng)
    return action


def _check(loss: float, what: str, batch: Batch) -> None:
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite {what} loss; batch reward range [{batch.reward.min():.3g}, {batch.reward.max():.3g}], "
            f"|obs|max {np.abs(batch.obs).max():.3g}, n={len(batch.reward)}"
        )


def critic_targets(agent: Agent, batch: Batch, gamma: float, noise: np.ndarray) -> np.ndarray:
    """Soft Bellman targets from the target critics and a fresh next action."""
    tape = Tape(record=False)
    mean, log_std = policy.actor_apply(tape, agent.actor, agent.graph, _actor_inputs(agent, batch.next_obs), named=False)
    a_next, logp = policy.squashed_sample(tape, mean, log_std, noise, agent.half)
    q1, q2 = policy.critic_apply(tape, agent.target, batch.next_obs, a_next.value, prefix=None)
    soft = np.minimum(q1.value, q2.value) - agent.alpha * logp.value
    return batch.reward + gamma * (1.0 - batch.done) * soft


def critic_loss(agent: Agent, batch: Batch, y: np.ndarray) -> tuple[float, float, dict[str, np.ndarray]]:
    tape = Tape()
    q1, q2 = policy.critic_apply(tape, agent.critic, batch.obs, agent.normalize(batch.action))
    l1 = tape.mean(tape.square(tape.sub(q1, y)))
    l2 = tape.mean(tape.square(tape.sub(q2, y)))
    # the critics share no parameters, so one pass on the sum yields both gradients
    tape.backward(tape.add(l1, l2))
    return float(l1.value), float(l2.value), tape.named_grads()


def critic_update(agent: Agent, batch: Batch, gamma: float, rng: np.random.Generator) -> tuple[float, float]:
    noise = rng.standard_normal((len(batch.reward), N_ACTIONS))
    y = critic_targets(agent, batch, gamma, noise)
    l1, l2, grads = critic_loss(agent, batch, y)
    _check(l1 + l2, "critic", batch)
    adam_step(agent.critic.named("critic"), grads, agent.critic_opt)
    return l1, l2


def actor_loss(agent: Agent, batch: Batch, noise: np.ndarray) -> tuple[float, np.ndarray, dict[str, np.ndarray]]:
    """Mean of ``alpha * log pi - min(Q1, Q2)`` with reparameterized actions; critics are constants."""
    tape = Tape()
    mean, log_std = policy.actor_apply(tape, agent.actor, agent.graph, _actor_inputs(agent, batch.obs))
    a, logp = policy.squashed_sample(tape, mean, log_std, noise, agent.half)
    q1, q2 = policy.critic_apply(tape, agent.critic, batch.obs, a, prefix=None)
    loss = tape.mean(tape.sub(tape.mul(logp, agent.alpha), tape.minimum(q1, q2)))
    tape.backward(loss)
    grads = {k: v for k, v in tape.named_grads().items() if k.startswith("actor.")}
    return float(loss.value), logp.value, grads


def actor_update(agent: Agent, batch: Batch, rng: np.random.Generator) -> tuple[float, np.ndarray]:
    noise = rng.standard_normal((len(batch.reward), N_ACTIONS))
    loss, logp, grads = actor_loss(agent, batch, noise)
    _check(loss, "actor", batch)
    adam_step(agent.actor.named(), grads, agent.actor_opt)
    return loss, logp


def alpha_update(agent: Agent, logp: np.ndarray, target_entropy: float) -> float:
    """One Adam step on log(alpha) for ``-log_alpha * mean(log pi + H_target)``."""
    grad = -float(np.mean(logp + target_entropy))
    adam_step({"log_alpha": agent.log_alpha}, {"log_alpha": np.array([grad])}, agent.alpha_opt)
    return agent.alpha


def soft_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray], tau: float) -> None:
    if target.keys() != online.keys():
        raise ValueError("target and online parameter sets differ")
    for k, t in target.items():
        o = online[k]
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {o.shape}")
        t *= 1.0 - tau
        t += tau * o


def _strip(named: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in named.items()}


def update(agent: Agent, batch: Batch, cfg: SacConfig, rng: np.random.Generator) -> tuple[float, float, float]:
    l1, l2 = critic_update(agent, batch, cfg.gamma, rng)
    la, logp = actor_update(agent, batch, rng)
    # the entropy target refers to actions normalized to (-1, 1), not metres
    alpha_update(agent, logp + float(np.sum(np.log(agent.half))), cfg.target_entropy)
    soft_update(_strip(agent.target.named("target"), "target"), _strip(agent.critic.named("critic"), "critic"), cfg.tau)
    agent.updates += 1
    return l1, l2, la


# ---------------------------------------------------------------------------
# training loop


LOG_COLUMNS = ("step", "episode", "return", "critic1_loss", "critic2_loss", "actor_loss", "alpha", "wall_ms", "blowup")


@dataclass
class TrainResult:
    agent: Agent
    log: list[dict]
    steps: int


def train(env, agent: Agent, cfg: SacConfig, total_steps: int, seed: int,
          on_episode=None) -> TrainResult:
    """Run ``total_steps`` environment steps, logging one row per finished episode.

    The buffer stores the pre-filter command; the simulator receives the
    filtered one. A simulator blowup truncates the episode, drops the
    offending transition and sets the ``blowup`` column.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    buffer = ReplayBuffer(min(cfg.buffer_capacity, max(total_steps, 1)), policy.FLAT_OBS_DIM, seed=seed + 1)
    log: list[dict] = []
    start = time.perf_counter()
    obs = env.reset() if total_steps > 0 else None
    ep_return, episode = 0.0, 0
    losses: list[tuple[float, float, float]] = []
    for step in range(1, total_steps + 1):
        action = act(agent, obs, rng)
        res = env.step(action)
        if not res.blowup:
            buffer.push(obs, action, cfg.reward_scale * res.reward, res.obs, res.done)
            ep_return += res.reward
            obs = res.obs
        if step > cfg.warmup and step % cfg.steps_per_update == 0 and len(buffer) > 0:
            losses.append(update(agent, buffer.sample(cfg.batch_size), cfg, rng))
        if res.truncated or res.done or res.blowup:
            arr = np.array(losses) if losses else np.full((1, 3), np.nan)
            row = {
                "step": step, "episode": episode, "return": ep_return,
                "critic1_loss": float(np.mean(arr[:, 0])), "critic2_loss": float(np.mean(arr[:, 1])),
                "actor_loss": float(np.mean(arr[:, 2])), "alpha": agent.alpha,
                "wall_ms": (time.perf_counter() - start) * 1e3, "blowup": int(res.blowup),
            }
            log.append(row)
            if on_episode is not None:
                on_episode(row)
            episode += 1
            ep_return = 0.0
            losses = []
            if step < total_steps:
                obs = env.reset()
    return TrainResult(agent, log, total_steps)


def config_dict(cfg: SacConfig) -> dict:
    return asdict(cfg)
