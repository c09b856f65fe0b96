"""Directed morphology graph of the robot and per-step feature encoding."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .sim import ACTIVE, PASSIVE, Observation
from .tasks import task_feature

EDGE_TYPES = ("rod", "passive_tendon", "active_tendon")
VERTEX_DIM = 8
EDGE_DIM = 4
TASK_DIM = 2


class GraphError(ValueError):
    pass


@dataclass
class GraphSpec:
    n_vertices: int
    edges: list[tuple[int, int, str]]  # sorted by (src, dst)
    active_pairs: list[tuple[int, int]]  # edge indices (i->j, j->i) per actuated tendon
    active_ends: np.ndarray  # (n_active, 2) vertex ids, tendon order of the robot model

    def __post_init__(self):
        V, E = self.n_vertices, len(self.edges)
        self.src = np.array([e[0] for e in self.edges], dtype=np.int64)
        self.dst = np.array([e[1] for e in self.edges], dtype=np.int64)
        self.types = np.array([EDGE_TYPES.index(e[2]) for e in self.edges], dtype=np.int64)
        self.gather_src = np.zeros((E, V))
        self.gather_src[np.arange(E), self.src] = 1.0
        self.gather_dst = np.zeros((E, V))
        self.gather_dst[np.arange(E), self.dst] = 1.0
        # scatter-sum of edge messages into their destination vertex
        self.scatter_dst = self.gather_dst.T.copy()
        n_a = len(self.active_ends)
        self.gather_a = np.zeros((n_a, V))
        self.gather_a[np.arange(n_a), self.active_ends[:, 0]] = 1.0
        self.gather_b = np.zeros((n_a, V))
        self.gather_b[np.arange(n_a), self.active_ends[:, 1]] = 1.0
        self.type_onehot = np.eye(len(EDGE_TYPES))[self.types]

    @property
    def vertices(self) -> list[int]:
        return list(range(self.n_vertices))

    def type_counts(self) -> dict[str, int]:
        return {t: int(np.sum(self.types == i)) for i, t in enumerate(EDGE_TYPES)}

    def to_json(self) -> str:
        return json.dumps(
            {
                "vertices": self.vertices,
                "edges": [{"src": s, "dst": d, "type": t} for s, d, t in self.edges],
                "active_pairs": [list(p) for p in self.active_pairs],
            },
            indent=2,
        )


@dataclass
class GraphFeatures:
    vertex: np.ndarray  # (..., V, 8)
    edge: np.ndarray  # (..., E, 4)


def build_graph(model) -> GraphSpec:
    """Graph with one vertex per endcap (rod-major, left before right).

    Every rod and tendon becomes a pair of opposite directed edges. Works for
    any rod count; only the three-bar robot is supported downstream.
    """
    n_rods = int(getattr(model, "n_rods", 3))
    V = 2 * n_rods
    physical: list[tuple[int, int, str]] = [(2 * r, 2 * r + 1, "rod") for r in range(n_rods)]
    active_ends = []
    for t in model.tendons:
        a, b = (int(x) for x in t.endpoints)
        if not (0 <= a < V and 0 <= b < V) or a == b:
            raise GraphError(f"tendon endpoints {t.endpoints} invalid for {V} vertices")
        if t.kind == ACTIVE:
            physical.append((a, b, "active_tendon"))
            active_ends.append((a, b))
        elif t.kind == PASSIVE:
            physical.append((a, b, "passive_tendon"))
        else:
            raise GraphError(f"unknown tendon kind {t.kind!r}")
    seen = set()
    for a, b, _ in physical:
        key = (min(a, b), max(a, b))
        if key in seen:
            raise GraphError(f"duplicate connection {key}")
        seen.add(key)
    edges = sorted([(a, b, k) for a, b, k in physical] + [(b, a, k) for a, b, k in physical])
    index = {(s, d): i for i, (s, d, _) in enumerate(edges)}
    pairs = [(index[(a, b)], index[(b, a)]) for a, b in active_ends]
    return GraphSpec(V, edges, pairs, np.array(active_ends, dtype=np.int64).reshape(-1, 2))


def encode_observation(graph: GraphSpec, obs: Observation, task, robot_p) -> GraphFeatures:
    """Vertex = (position, velocity, task feature); edge = (distance, type one-hot).

    The task feature is broadcast to every vertex: the tracking vector
    ``p_target - robot_p`` for tracking, zeros for the turning primitives.
    """
    return encode_features(graph, obs, task_feature(task, robot_p))


def encode_features(graph: GraphSpec, obs: Observation, task_feature) -> GraphFeatures:
    P = np.asarray(obs.positions, dtype=float)
    Vel = np.asarray(obs.velocities, dtype=float)
    task = np.broadcast_to(np.asarray(task_feature, dtype=float), (graph.n_vertices, TASK_DIM))
    vertex = np.concatenate([P, Vel, task], axis=1)
    dist = np.linalg.norm(P[graph.dst] - P[graph.src], axis=1, keepdims=True)
    edge = np.concatenate([dist, graph.type_onehot], axis=1)
    return GraphFeatures(vertex, edge)


def flat_observation(obs: Observation, task_feature) -> np.ndarray:
    """Flattened vertex features (6 x 8 = 48) followed by the task feature (2).

    The per-vertex copy of the task feature is redundant with the tail; it is
    kept so that the graph features can be rebuilt from the flat vector alone.
    """
    task = np.asarray(task_feature, dtype=float)
    P = np.asarray(obs.positions, dtype=float)
    vertex = np.concatenate([P, np.asarray(obs.velocities, dtype=float), np.broadcast_to(task, (len(P), TASK_DIM))], axis=1)
    return np.concatenate([vertex.ravel(), task])


def features_from_flat(graph: GraphSpec, flat: np.ndarray) -> GraphFeatures:
    """Inverse of :func:`flat_observation` into graph features; batched over leading axes."""
    flat = np.asarray(flat, dtype=float)
    lead = flat.shape[:-1]
    vertex = flat[..., : graph.n_vertices * VERTEX_DIM].reshape(*lead, graph.n_vertices, VERTEX_DIM)
    P = vertex[..., :3]
    dist = np.linalg.norm(P[..., graph.dst, :] - P[..., graph.src, :], axis=-1, keepdims=True)
    onehot = np.broadcast_to(graph.type_onehot, (*lead, *graph.type_onehot.shape))
    return GraphFeatures(vertex, np.concatenate([dist, onehot], axis=-1))


def automorphisms(graph: GraphSpec) -> list[np.ndarray]:
    """All vertex permutations that map the typed edge set onto itself (identity first)."""
    from itertools import permutations

    typed = {(s, d, t) for s, d, t in graph.edges}
    out = []
    for perm in permutations(range(graph.n_vertices)):
        if all((perm[s], perm[d], t) in typed for s, d, t in graph.edges):
            out.append(np.array(perm))
    return out
