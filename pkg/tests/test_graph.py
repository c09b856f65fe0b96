import json

import numpy as np
import pytest

from tgrl import sim
from tgrl.graph import (
    EDGE_DIM, VERTEX_DIM, GraphError, automorphisms, build_graph, encode_observation,
    features_from_flat, flat_observation,
)
from tgrl.tasks import TaskSpec


@pytest.fixture(scope="module")
def setup():
    model, state = sim.build_robot()
    return model, state, build_graph(model)


def test_counts(setup):
    _, _, g = setup
    assert g.n_vertices == 6
    assert len(g.edges) == 24
    assert g.type_counts() == {"rod": 6, "passive_tendon": 6, "active_tendon": 12}


def test_edges_sorted_and_paired(setup):
    _, _, g = setup
    keys = [(s, d) for s, d, _ in g.edges]
    assert keys == sorted(keys)
    typed = set(g.edges)
    assert all((d, s, t) in typed for s, d, t in g.edges)


def test_every_vertex_has_one_rod_partner(setup):
    _, _, g = setup
    for v in range(6):
        assert sum(1 for s, d, t in g.edges if s == v and t == "rod") == 1


def test_active_pairs_are_opposite(setup):
    _, _, g = setup
    assert len(g.active_pairs) == 6
    for i, j in g.active_pairs:
        assert g.edges[i][:2] == g.edges[j][1::-1]
        assert g.edges[i][2] == "active_tendon"


def test_json_roundtrip(setup):
    _, _, g = setup
    data = json.loads(g.to_json())
    assert data["vertices"] == list(range(6))
    assert len(data["edges"]) == 24


def test_duplicate_connection_rejected(setup):
    model, _, _ = setup

    class Fake:
        tendons = model.tendons + [model.tendons[0]]

    with pytest.raises(GraphError):
        build_graph(Fake())


def test_automorphism_group(setup):
    _, _, g = setup
    autos = automorphisms(g)
    assert len(autos) == 6
    assert np.array_equal(autos[0], np.arange(6))


def test_features_shapes_and_content(setup):
    model, state, g = setup
    obs = sim.observe(model, state)
    task = TaskSpec.tracking([0, 0], [1.0, 0.5])
    f = encode_observation(g, obs, task, np.zeros(2))
    assert f.vertex.shape == (6, VERTEX_DIM) and f.edge.shape == (24, EDGE_DIM)
    np.testing.assert_allclose(f.vertex[:, 6:], np.tile([1.0, 0.5], (6, 1)))
    rod = [i for i, e in enumerate(g.edges) if e[2] == "rod"]
    np.testing.assert_allclose(f.edge[rod, 0], model.rod_length, rtol=1e-12)
    assert np.all(f.edge[:, 1:].sum(axis=1) == 1)


def test_turning_task_feature_zero(setup):
    model, state, g = setup
    f = encode_observation(g, sim.observe(model, state), TaskSpec.turning([0, 0]), np.zeros(2))
    assert np.all(f.vertex[:, 6:] == 0)


def test_flat_roundtrip(setup):
    model, state, g = setup
    obs = sim.observe(model, state)
    feat = np.array([0.3, -0.2])
    flat = flat_observation(obs, feat)
    assert flat.shape == (50,)
    np.testing.assert_array_equal(flat[-2:], feat)
    a = features_from_flat(g, flat)
    b = encode_observation(g, obs, TaskSpec.tracking([0, 0], feat), np.zeros(2))
    np.testing.assert_allclose(a.vertex, b.vertex, atol=1e-15)
    np.testing.assert_allclose(a.edge, b.edge, atol=1e-15)
    batch = features_from_flat(g, np.stack([flat, flat]))
    assert batch.vertex.shape == (2, 6, 8) and batch.edge.shape == (2, 24, 4)
