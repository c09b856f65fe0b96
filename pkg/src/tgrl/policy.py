"""Actors and critics.

The graph actor runs ``depth`` message-passing layers over the morphology
graph and reads one Gaussian per actuated tendon off the pair of endpoint
vertices. The flat actor and the critics are plain MLPs on the flattened
observation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import EDGE_DIM, TASK_DIM, VERTEX_DIM, GraphSpec
from .nn import MlpParams, ShapeError, Tape, Tensor, mlp_apply, mlp_init

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
N_ACTIONS = 6
FLAT_OBS_DIM = 6 * VERTEX_DIM + TASK_DIM  # flattened vertex features + task feature
LOG_2PI = math.log(2 * math.pi)


@dataclass
class GnnActorParams:
    layers: list[tuple[MlpParams, MlpParams]]  # (message MLP, vertex-update MLP) per layer
    head: MlpParams

    kind = "gnn"

    @property
    def depth(self) -> int:
        return len(self.layers)

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (msg, upd) in enumerate(self.layers):
            out.update(msg.named(f"actor.layer{i}.message"))
            out.update(upd.named(f"actor.layer{i}.update"))
        out.update(self.head.named("actor.head"))
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.named().values())

    def arch(self) -> dict:
        msg, upd = self.layers[0]
        return {
            "kind": "gnn",
            "depth": self.depth,
            "hidden": msg.layers[0][0].shape[0],
            "vertex_dim": upd.out_dim,
        }


@dataclass
class MlpActorParams:
    net: MlpParams

    kind = "mlp"

    def named(self) -> dict[str, np.ndarray]:
        return self.net.named("actor.mlp")

    def n_params(self) -> int:
        return self.net.n_params()

    def arch(self) -> dict:
        return {"kind": "mlp", "hidden": [W.shape[0] for W, _ in self.net.layers[:-1]]}


@dataclass
class CriticParams:
    q1: MlpParams
    q2: MlpParams

    def named(self, prefix: str = "critic") -> dict[str, np.ndarray]:
        return {**self.q1.named(f"{prefix}.q1"), **self.q2.named(f"{prefix}.q2")}

    def arch(self) -> dict:
        return {"hidden": [W.shape[0] for W, _ in self.q1.layers[:-1]]}

    def copy(self) -> "CriticParams":
        dup = lambda m: MlpParams([(W.copy(), b.copy()) for W, b in m.layers], m.activation, m.output_activation)
        return CriticParams(dup(self.q1), dup(self.q2))


@dataclass
class ActionDistribution:
    mean: np.ndarray  # (..., 6) pre-squash
    log_std: np.ndarray
    l_min: np.ndarray
    l_max: np.ndarray

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.l_max + self.l_min)

    @property
    def half(self) -> np.ndarray:
        return 0.5 * (self.l_max - self.l_min)

    def deterministic(self) -> np.ndarray:
        return self.mid + self.half * np.tanh(self.mean)


# ---------------------------------------------------------------------------
# construction


def gnn_actor_init(depth: int = 2, hidden: int = 64, vertex_dim: int = 64, seed: int = 0,
                   activation: str = "relu") -> GnnActorParams:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    d_in = VERTEX_DIM
    for _ in range(depth):
        msg = mlp_init([2 * d_in + EDGE_DIM, hidden, hidden], activation, rng)
        upd = mlp_init([d_in + hidden, hidden, vertex_dim], activation, rng, output_activation="tanh")
        layers.append((msg, upd))
        d_in = vertex_dim
    head = mlp_init([2 * d_in, hidden, 2], activation, rng)
    return GnnActorParams(layers, head)


def mlp_actor_init(hidden=(189, 189), seed: int = 0, activation: str = "relu") -> MlpActorParams:
    return MlpActorParams(mlp_init([FLAT_OBS_DIM, *hidden, 2 * N_ACTIONS], activation, seed))


def critic_init(hidden=(256, 256), seed: int = 0, activation: str = "relu") -> CriticParams:
    rng = np.random.default_rng(seed)
    sizes = [FLAT_OBS_DIM + N_ACTIONS, *hidden, 1]
    return CriticParams(mlp_init(sizes, activation, rng), mlp_init(sizes, activation, rng))


def mlp_hidden_for_budget(n_params: int, n_hidden_layers: int = 2) -> int:
    """Width of an equal-width flat actor whose parameter count is closest to ``n_params``."""
    def count(h):
        sizes = [FLAT_OBS_DIM] + [h] * n_hidden_layers + [2 * N_ACTIONS]
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    return min(range(1, 4096), key=lambda h: abs(count(h) - n_params))


# ---------------------------------------------------------------------------
# forward passes (recorded on a tape)


def message_pass_layer(tape: Tape, graph: GraphSpec, V: Tensor, E: np.ndarray,
                       msg: MlpParams, upd: MlpParams, prefix: str | None = None) -> Tensor:
    """One round of messages along every directed edge, summed at the receiver.

    For a directed edge ``j -> i`` the message is ``msg(V_i, V_j, E_ji)``;
    the receiver updates as ``V_i' = upd(V_i, sum of its messages)``.
    """
    if V.shape[-1] * 2 + E.shape[-1] != msg.in_dim:
        raise ShapeError(f"vertex/edge widths {V.shape[-1]}/{E.shape[-1]} do not fit message MLP")
    recv = tape.mix(graph.gather_dst, V)
    send = tape.mix(graph.gather_src, V)
    m = mlp_apply(tape, msg, tape.concat([recv, send, E]), prefix and f"{prefix}.message")
    agg = tape.mix(graph.scatter_dst, m)
    return mlp_apply(tape, upd, tape.concat([V, agg]), prefix and f"{prefix}.update")


def gnn_actor_apply(tape: Tape, actor: GnnActorParams, graph: GraphSpec, vertex: np.ndarray,
                    edge: np.ndarray, named: bool = True) -> tuple[Tensor, Tensor]:
    """Pre-squash mean and clamped log-std per actuated tendon, shape (..., 6)."""
    if vertex.shape[-1] != VERTEX_DIM or edge.shape[-1] != EDGE_DIM:
        raise ShapeError(f"feature widths {vertex.shape[-1]}/{edge.shape[-1]} != {VERTEX_DIM}/{EDGE_DIM}")
    V = tape.leaf(vertex)
    for i, (msg, upd) in enumerate(actor.layers):
        V = message_pass_layer(tape, graph, V, edge, msg, upd, f"actor.layer{i}" if named else None)
    va = tape.mix(graph.gather_a, V)
    vb = tape.mix(graph.gather_b, V)
    prefix = "actor.head" if named else None
    # evaluate both orientations of every tendon and average them
    fwd = mlp_apply(tape, actor.head, tape.concat([va, vb]), prefix)
    rev = mlp_apply(tape, actor.head, tape.concat([vb, va]), prefix)
    out = tape.mul(tape.add(fwd, rev), 0.5)
    mean = tape.index(out, (..., 0))
    log_std = tape.clip(tape.index(out, (..., 1)), LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def mlp_actor_apply(tape: Tape, actor: MlpActorParams, obs_flat: np.ndarray,
                    named: bool = True) -> tuple[Tensor, Tensor]:
    if obs_flat.shape[-1] != FLAT_OBS_DIM:
        raise ShapeError(f"flat observation width {obs_flat.shape[-1]} != {FLAT_OBS_DIM}")
    out = mlp_apply(tape, actor.net, tape.leaf(obs_flat), "actor.mlp" if named else None)
    mean = tape.index(out, (..., slice(0, N_ACTIONS)))
    log_std = tape.clip(tape.index(out, (..., slice(N_ACTIONS, 2 * N_ACTIONS))), LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def actor_apply(tape: Tape, actor, graph: GraphSpec, batch: dict, named: bool = True) -> tuple[Tensor, Tensor]:
    """Dispatch on actor kind. ``batch`` carries 'vertex', 'edge' and 'flat' arrays."""
    if actor.kind == "gnn":
        return gnn_actor_apply(tape, actor, graph, batch["vertex"], batch["edge"], named)
    return mlp_actor_apply(tape, actor, batch["flat"], named)


def squashed_sample(tape: Tape, mean: Tensor, log_std: Tensor, noise: np.ndarray,
                    half: np.ndarray) -> tuple[Tensor, Tensor]:
    """Reparameterized tanh-Gaussian sample in (-1, 1) and its log-density in metres.

    The density includes the tanh and ``mid + half * x`` changes of variables.
    """
    std = tape.exp(log_std)
    u = tape.add(mean, tape.mul(std, noise))
    a = tape.tanh(u)
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    log_jac = tape.mul(tape.sub(tape.sub(math.log(2.0), u), tape.softplus(tape.mul(u, -2.0))), 2.0)
    const = -0.5 * noise**2 - 0.5 * LOG_2PI - np.log(half)
    per_dim = tape.sub(tape.sub(const, log_std), log_jac)
    return a, tape.sum(per_dim, axis=-1)


def critic_apply(tape: Tape, critic: CriticParams, obs_flat, action_norm,
                 prefix: str | None = "critic") -> tuple[Tensor, Tensor]:
    """Twin Q values; ``action_norm`` is the action rescaled to (-1, 1)."""
    if isinstance(action_norm, Tensor):
        x = tape.concat([obs_flat, action_norm])
    else:
        x = tape.leaf(np.concatenate([obs_flat, action_norm], axis=-1))
    if x.shape[-1] != critic.q1.in_dim:
        raise ShapeError(f"critic input width {x.shape[-1]} != {critic.q1.in_dim}")
    q1 = mlp_apply(tape, critic.q1, x, prefix and f"{prefix}.q1")
    q2 = mlp_apply(tape, critic.q2, x, prefix and f"{prefix}.q2")
    return tape.index(q1, (..., 0)), tape.index(q2, (..., 0))


# ---------------------------------------------------------------------------
# numpy-level API


def actor_forward(actor: GnnActorParams, graph: GraphSpec, features, l_min, l_max) -> ActionDistribution:
    tape = Tape(record=False)
    mean, log_std = gnn_actor_apply(tape, actor, graph, features.vertex, features.edge, named=False)
    return ActionDistribution(mean.value, log_std.value, np.asarray(l_min), np.asarray(l_max))


def mlp_actor_forward(actor: MlpActorParams, obs_flat, task_feat, l_min, l_max) -> ActionDistribution:
    obs_flat = np.asarray(obs_flat, dtype=float)
    x = np.concatenate([obs_flat, np.asarray(task_feat, dtype=float)], axis=-1) if task_feat is not None else obs_flat
    tape = Tape(record=False)
    mean, log_std = mlp_actor_apply(tape, actor, x, named=False)
    return ActionDistribution(mean.value, log_std.value, np.asarray(l_min), np.asarray(l_max))


def critic_forward(critic: CriticParams, obs_flat, task_feat, action, l_min, l_max) -> tuple[np.ndarray, np.ndarray]:
    """Twin Q estimates for an action given in metres."""
    obs_flat = np.asarray(obs_flat, dtype=float)
    if task_feat is not None:
        obs_flat = np.concatenate([obs_flat, np.asarray(task_feat, dtype=float)], axis=-1)
    mid, half = 0.5 * (np.asarray(l_max) + l_min), 0.5 * (np.asarray(l_max) - l_min)
    tape = Tape(record=False)
    q1, q2 = critic_apply(tape, critic, obs_flat, (np.asarray(action) - mid) / half, prefix=None)
    return q1.value, q2.value


def sample_action(dist: ActionDistribution, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw a command in metres, strictly inside the bounds, with its log-density."""
    noise = rng.standard_normal(np.shape(dist.mean))
    return squash(dist, noise)


def squash(dist: ActionDistribution, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    tape = Tape(record=False)
    a, logp = squashed_sample(tape, tape.leaf(dist.mean), tape.leaf(dist.log_std), noise, dist.half)
    action = dist.mid + dist.half * a.value
    # tanh saturates to +-1 in floating point for |u| > ~19
    eps = 1e-12 * dist.half
    action = np.clip(action, dist.l_min + eps, dist.l_max - eps)
    return action, logp.value


def count_params(actor) -> int:
    return actor.n_params()
