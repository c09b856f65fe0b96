import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tgrl.nn import (
    AdamState, ConfigurationError, MlpParams, ShapeError, Tape, TapeError, TrainingError,
    adam_step, backward, finite_diff_check, forward, mlp_apply, mlp_init,
)


def _straight_line(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Scalar-loop evaluation, independent of the tape code path."""
    h = list(x)
    for li, (W, b) in enumerate(params.layers):
        out = []
        for r in range(W.shape[0]):
            acc = b[r]
            for c in range(W.shape[1]):
                acc += W[r, c] * h[c]
            if li < len(params.layers) - 1:
                acc = max(acc, 0.0) if params.activation == "relu" else np.tanh(acc)
            elif params.output_activation == "tanh":
                acc = np.tanh(acc)
            out.append(acc)
        h = out
    return np.array(h)


def test_init_shapes():
    p = mlp_init([4, 8, 2], "relu", seed=7)
    assert [(W.shape, b.shape) for W, b in p.layers] == [((8, 4), (8,)), ((2, 8), (2,))]
    assert all(np.all(b == 0) for _, b in p.layers)
    limit = np.sqrt(6 / 12)
    assert np.all(np.abs(p.layers[0][0]) <= limit)


def test_init_deterministic_and_seed_sensitive():
    a, b = mlp_init([3, 3], "tanh", seed=0), mlp_init([3, 3], "tanh", seed=0)
    assert all(np.array_equal(x[0], y[0]) for x, y in zip(a.layers, b.layers))
    c, d = mlp_init([4, 8, 2], seed=7), mlp_init([4, 8, 2], seed=8)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(c.layers, d.layers))


@pytest.mark.parametrize("sizes", [[], [3], [3, 0], [2, -1, 2]])
def test_init_rejects_bad_sizes(sizes):
    with pytest.raises(ConfigurationError):
        mlp_init(sizes)


def test_layer_chain_invariant():
    with pytest.raises(ShapeError):
        MlpParams([(np.zeros((3, 2)), np.zeros(3)), (np.zeros((1, 4)), np.zeros(1))])


def test_identity_and_bias_only():
    ident = MlpParams([(np.eye(3), np.zeros(3))])
    x = np.array([1.5, -2.0, 0.25])
    out, _ = forward(ident, x)
    assert np.array_equal(out.value, x)
    b = np.array([0.3, -0.7])
    zero = MlpParams([(np.zeros((2, 3)), b)])
    out, _ = forward(zero, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.array_equal(out.value, np.tile(b, (5, 1)))


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(3)
    p = mlp_init([5, 7, 3], "relu", seed=11)
    p.layers[0] = (p.layers[0][0], rng.normal(size=7))
    x = rng.normal(size=5)
    out, _ = forward(p, x)
    np.testing.assert_allclose(out.value, _straight_line(p, x), rtol=0, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        forward(mlp_init([4, 2]), np.zeros(3))


def test_linear_layer_gradient_is_outer_product():
    rng = np.random.default_rng(0)
    p = MlpParams([(rng.normal(size=(3, 4)), np.zeros(3))])
    x = rng.normal(size=4)
    g = rng.normal(size=3)
    _, tape = forward(p, x)
    grads = backward(tape, g)
    np.testing.assert_allclose(grads.layers[0][0], np.outer(g, x), atol=1e-15)
    np.testing.assert_allclose(grads.input, p.layers[0][0].T @ g, atol=1e-15)


def test_relu_blocks_gradient_at_negative_preactivation():
    W1 = np.array([[1.0], [-1.0]])
    p = MlpParams([(W1, np.zeros(2)), (np.ones((1, 2)), np.zeros(1))], "relu")
    _, tape = forward(p, np.array([2.0]))
    grads = backward(tape, np.ones(1))
    # second hidden unit sees -2 -> no gradient on its incoming weight
    assert grads.layers[0][0][1, 0] == 0.0
    assert grads.layers[0][0][0, 0] == 2.0


def test_backward_twice_is_usage_error():
    _, tape = forward(mlp_init([2, 2]), np.ones(2))
    backward(tape, np.ones(2))
    with pytest.raises(TapeError):
        backward(tape, np.ones(2))


def test_output_grad_shape_checked():
    _, tape = forward(mlp_init([2, 3]), np.ones(2))
    with pytest.raises(ShapeError):
        backward(tape, np.ones(2))


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_random_net_against_central_differences(act):
    rng = np.random.default_rng(5)
    p = mlp_init([4, 6, 5, 2], act, seed=9)
    x = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 2))

    def value():
        out, _ = forward(p, x)
        return float(np.sum(out.value * g))

    _, tape = forward(p, x)
    grads = backward(tape, g)
    eps = 1e-5
    worst = 0.0
    for (W, b), (gW, gb) in zip(p.layers, grads.layers):
        for arr, garr in ((W, gW), (b, gb)):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                fp = value()
                arr[idx] = old - eps
                fm = value()
                arr[idx] = old
                num = (fp - fm) / (2 * eps)
                worst = max(worst, abs(garr[idx] - num) / max(abs(num), 1e-8))
    assert worst <= 1e-4


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = adam_step(params, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert state.t == 1
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([0.5])}
    adam_step(params, {"w": np.array([1.0])}, AdamState(lr=0.1))
    # m_hat = 1, v_hat = 1 after bias correction
    np.testing.assert_allclose(params["w"], 0.5 - 0.1 / (1 + 1e-8), rtol=0, atol=1e-15)


def test_adam_deterministic():
    g = {"w": np.array([0.3, -0.1])}
    out = []
    for _ in range(2):
        params = {"w": np.array([1.0, 2.0])}
        s = AdamState()
        for _ in range(3):
            adam_step(params, g, s)
        out.append(params["w"].copy())
    assert np.array_equal(out[0], out[1])


def test_adam_rejects_non_finite():
    with pytest.raises(TrainingError, match="w"):
        adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamState())


def _quadratic_loss(params, x, y):
    def fn():
        tape = Tape()
        W = tape.leaf(params["W"], "W")
        b = tape.leaf(params["b"], "b")
        r = tape.sub(tape.linear(tape.leaf(x), W, b), y)
        loss = tape.sum(tape.square(r))
        tape.backward(loss)
        return float(loss.value), tape.named_grads()
    return fn


def test_finite_diff_check_quadratic():
    rng = np.random.default_rng(1)
    params = {"W": rng.normal(size=(3, 4)), "b": rng.normal(size=3)}
    x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    assert finite_diff_check(_quadratic_loss(params, x, y), params, 1e-5) <= 1e-7


def test_finite_diff_check_constant_loss():
    params = {"W": np.ones((2, 2))}

    def fn():
        tape = Tape()
        tape.leaf(params["W"], "W")
        return 3.0, {"W": np.zeros((2, 2))}

    assert finite_diff_check(fn, params, 1e-5) == 0.0


def test_mix_gather_scatter_gradient():
    rng = np.random.default_rng(2)
    M = rng.normal(size=(5, 3))
    x = rng.normal(size=(2, 3, 4))
    g = rng.normal(size=(2, 5, 4))
    tape = Tape()
    tx = tape.leaf(x, "x")
    y = tape.mix(M, tx)
    tape.backward(y, g)
    np.testing.assert_allclose(tape.grad_of(tx), np.einsum("ij,bik->bjk", M, g), atol=1e-13)


def test_unrecorded_tape_refuses_backward():
    tape = Tape(record=False)
    y = mlp_apply(tape, mlp_init([2, 2]), tape.leaf(np.ones(2)))
    with pytest.raises(TapeError):
        tape.backward(y)


@settings(max_examples=30, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 6), min_size=2, max_size=4),
    batch=st.integers(1, 4),
    act=st.sampled_from(["relu", "tanh"]),
)
def test_shape_closure(sizes, batch, act):
    p = mlp_init(sizes, act, seed=0)
    x = np.ones((batch, sizes[0]))
    out, tape = forward(p, x)
    assert out.shape == (batch, sizes[-1])
    grads = backward(tape, np.ones(out.shape))
    assert grads.input.shape == x.shape
    for (W, b), (gW, gb) in zip(p.layers, grads.layers):
        assert gW.shape == W.shape and gb.shape == b.shape
