import math

import numpy as np
import pytest

from tgrl import policy, sac, sim
from tgrl.env import StepResult, TensegrityEnv, lpf_apply, lpf_init
from tgrl.graph import build_graph
from tgrl.nn import Tape, TrainingError, finite_diff_check
from tgrl.sac import Batch, ReplayBuffer, SacConfig

FD_TOL = 1e-4


@pytest.fixture(scope="module")
def robot():
    model, _ = sim.build_robot()
    return model, build_graph(model)


def _agent(robot, kind="gnn", depth=2, seed=0, cfg=None):
    model, g = robot
    if kind == "gnn":
        actor = policy.gnn_actor_init(depth, 8, 8, seed=seed)
    else:
        actor = policy.mlp_actor_init((12, 12), seed=seed)
    critic = policy.critic_init((16, 16), seed=seed + 100)
    return sac.make_agent(actor, critic, g, model.l_min, model.l_max, cfg or SacConfig())


def _batch(robot, n=5, seed=0):
    model, _ = robot
    rng = np.random.default_rng(seed)
    obs = rng.normal(0, 0.5, size=(n, policy.FLAT_OBS_DIM))
    nxt = rng.normal(0, 0.5, size=(n, policy.FLAT_OBS_DIM))
    act = rng.uniform(model.l_min, model.l_max, size=(n, 6))
    return Batch(obs, act, rng.normal(size=n), nxt, (rng.uniform(size=n) < 0.3).astype(float))


def _zero_critic(c, biases):
    for net, b in zip((c.q1, c.q2), biases):
        net.layers = [(np.zeros_like(W), np.zeros_like(bb)) for W, bb in net.layers]
        W, bb = net.layers[-1]
        net.layers[-1] = (W, np.array([b], dtype=float))


# --- config and buffer -------------------------------------------------------


def test_config_validation():
    SacConfig().validate()
    for bad in (dict(gamma=1.0), dict(tau=0.0), dict(beta=1.0), dict(lr=0.0), dict(batch_size=0), dict(reward_scale=-1)):
        with pytest.raises(ValueError):
            SacConfig(**bad).validate()


def test_buffer_fifo_eviction():
    buf = ReplayBuffer(3, 2, 1, seed=0)
    for i in range(5):
        buf.push([i, i], [i], float(i), [i + 1, i + 1], False)
    assert len(buf) == 3
    assert sorted(buf.reward.tolist()) == [2.0, 3.0, 4.0]
    assert set(buf.sample(50).reward.tolist()) <= {2.0, 3.0, 4.0}


def test_buffer_sampling_reproducible():
    bufs = [ReplayBuffer(10, 2, 1, seed=7) for _ in range(2)]
    for b in bufs:
        for i in range(10):
            b.push([i, 0], [0], float(i), [0, 0], i == 9)
    x, y = bufs[0].sample(6), bufs[1].sample(6)
    assert np.array_equal(x.reward, y.reward) and np.array_equal(x.done, y.done)


def test_buffer_rejects_bad_input():
    buf = ReplayBuffer(2, 2, 1)
    with pytest.raises(ValueError):
        buf.sample(1)
    with pytest.raises(ValueError):
        buf.push([0, 0], [0], float("nan"), [0, 0], False)
    with pytest.raises(ValueError):
        ReplayBuffer(0, 2)


# --- critic targets and losses ---------------------------------------------


def test_terminal_and_zero_discount_targets(robot):
    agent = _agent(robot)
    b = _batch(robot)
    noise = np.random.default_rng(1).standard_normal((5, 6))
    b.done[:] = 1.0
    np.testing.assert_array_equal(sac.critic_targets(agent, b, 0.99, noise), b.reward)
    b.done[:] = 0.0
    np.testing.assert_array_equal(sac.critic_targets(agent, b, 0.0, noise), b.reward)


def test_single_transition_hand_computed(robot):
    agent = _agent(robot, seed=3)
    _zero_critic(agent.critic, (0.7, -0.2))
    _zero_critic(agent.target, (1.5, 0.9))
    agent.log_alpha[:] = math.log(0.3)
    b = _batch(robot, n=1, seed=4)
    b.done[:] = 0.0
    noise = np.random.default_rng(2).standard_normal((1, 6))

    tape = Tape(record=False)
    mean, log_std = policy.actor_apply(tape, agent.actor, agent.graph, sac._actor_inputs(agent, b.next_obs), named=False)
    m, ls = mean.value[0], log_std.value[0]
    u = m + np.exp(ls) * noise[0]
    # independent tanh-Gaussian log-density in metres
    logp = np.sum(-0.5 * noise[0] ** 2 - 0.5 * math.log(2 * math.pi) - ls
                  - np.log(1 - np.tanh(u) ** 2) - np.log(agent.half))
    y = b.reward[0] + 0.99 * (0.9 - 0.3 * logp)
    got = sac.critic_targets(agent, b, 0.99, noise)
    assert abs(got[0] - y) <= 1e-10 * max(1.0, abs(y))
    l1, l2, _ = sac.critic_loss(agent, b, got)
    assert abs(l1 - (0.7 - y) ** 2) <= 1e-10 * max(1.0, l1)
    assert abs(l2 - (-0.2 - y) ** 2) <= 1e-10 * max(1.0, l2)


def test_zero_temperature_constant_critics(robot):
    agent = _agent(robot)
    _zero_critic(agent.critic, (2.0, -1.0))
    agent.log_alpha[:] = -np.inf
    loss, _, grads = sac.actor_loss(agent, _batch(robot), np.zeros((5, 6)))
    assert loss == 1.0
    assert all(np.all(g == 0) for g in grads.values())


# --- finite differences ------------------------------------------------------


@pytest.mark.parametrize("kind,depth", [("gnn", 1), ("gnn", 2), ("gnn", 3), ("mlp", 0)])
def test_critic_loss_finite_difference(robot, kind, depth):
    agent = _agent(robot, kind, depth, seed=depth)
    b = _batch(robot, seed=depth)
    y = sac.critic_targets(agent, b, 0.99, np.random.default_rng(0).standard_normal((5, 6)))

    def fn():
        l1, l2, g = sac.critic_loss(agent, b, y)
        return l1 + l2, g

    assert finite_diff_check(fn, agent.critic.named("critic"), eps=1e-6, samples_per_param=4) <= FD_TOL


@pytest.mark.parametrize("kind,depth", [("gnn", 1), ("gnn", 2), ("gnn", 3), ("mlp", 0)])
def test_actor_loss_finite_difference(robot, kind, depth):
    agent = _agent(robot, kind, depth, seed=depth)
    b = _batch(robot, seed=depth + 10)
    noise = np.random.default_rng(1).standard_normal((5, 6))

    def fn():
        loss, _, g = sac.actor_loss(agent, b, noise)
        return loss, g

    assert finite_diff_check(fn, agent.actor.named(), eps=1e-6, samples_per_param=4) <= FD_TOL


# --- updates ------------------------------------------------------------------


def test_actor_loss_decreases_against_fixed_critics(robot):
    agent = _agent(robot, cfg=SacConfig(lr=1e-3))
    b = _batch(robot, n=16)
    noise = np.random.default_rng(5).standard_normal((16, 6))
    before = sac.actor_loss(agent, b, noise)[0]
    rng = np.random.default_rng(0)
    for _ in range(50):
        sac.actor_update(agent, b, rng)
    assert sac.actor_loss(agent, b, noise)[0] < before


def test_temperature_moves_toward_target_entropy(robot):
    agent = _agent(robot)
    a0 = agent.alpha
    # log pi far above -H: entropy too low, so alpha grows
    sac.alpha_update(agent, np.full(8, 10.0), -6.0)
    assert agent.alpha > a0
    a1 = agent.alpha
    sac.alpha_update(agent, np.full(8, -30.0), -6.0)
    sac.alpha_update(agent, np.full(8, -30.0), -6.0)
    assert agent.alpha < a1


def test_soft_update_limits_and_two_steps():
    rng = np.random.default_rng(0)
    online = {"w": rng.normal(size=(3, 2))}
    t = {"w": rng.normal(size=(3, 2))}
    t0 = t["w"].copy()
    sac.soft_update(t, online, 1.0)
    np.testing.assert_array_equal(t["w"], online["w"])
    t = {"w": t0.copy()}
    sac.soft_update(t, online, 1e-300)
    np.testing.assert_allclose(t["w"], t0, rtol=0, atol=1e-15)
    t = {"w": t0.copy()}
    sac.soft_update(t, online, 0.1)
    sac.soft_update(t, online, 0.1)
    np.testing.assert_allclose(t["w"], 0.81 * t0 + 0.19 * online["w"], atol=1e-12)
    with pytest.raises(ValueError):
        sac.soft_update({"v": t0}, online, 0.1)


def test_full_update_moves_every_part(robot):
    agent = _agent(robot, cfg=SacConfig(init_alpha=0.5))
    before = {k: v.copy() for k, v in agent.named().items()}
    sac.update(agent, _batch(robot, n=8), SacConfig(), np.random.default_rng(0))
    after = agent.named()
    for prefix in ("actor.", "critic.", "target.", "log_alpha"):
        keys = [k for k in before if k.startswith(prefix)]
        assert keys and any(not np.array_equal(before[k], after[k]) for k in keys)
    assert agent.updates == 1 and any(k.startswith("opt.actor.m.") for k in after)


def test_non_finite_loss_raises(robot):
    agent = _agent(robot)
    b = _batch(robot)
    b.reward[0] = np.inf
    with pytest.raises(TrainingError, match="non-finite"):
        sac.critic_update(agent, b, 0.99, np.random.default_rng(0))


# --- action filter -------------------------------------------------------------


def test_lpf_example_and_convergence():
    out, st = lpf_apply(lpf_init([0.4]), [0.5], 0.8)
    assert out[0] == pytest.approx(0.42, abs=1e-15)
    st = lpf_init([0.0])
    for k in range(1, 30):
        out, st = lpf_apply(st, [1.0], 0.8)
        assert 1.0 - out[0] == pytest.approx(0.8**k, rel=1e-12)
    out, _ = lpf_apply(lpf_init([0.3]), [0.9], 0.0)
    assert out[0] == 0.9
    with pytest.raises(ValueError):
        lpf_apply(lpf_init([0.0]), [1.0], 1.0)


# --- training loop ---------------------------------------------------------------


class ScriptedEnv:
    """Minimal stand-in: constant observation, reward 1, blowup at a chosen step."""

    def __init__(self, horizon=4, blowup_at=None):
        self.horizon, self.blowup_at, self.total = horizon, blowup_at, 0

    def reset(self):
        self.t = 0
        return np.full(policy.FLAT_OBS_DIM, 0.1)

    def step(self, action):
        self.t += 1
        self.total += 1
        if self.total == self.blowup_at:
            return StepResult(np.zeros(0), 0.0, False, True, True, {})
        return StepResult(np.full(policy.FLAT_OBS_DIM, 0.1), 1.0, False, self.t >= self.horizon, False, {})


def test_train_logging_and_blowup(robot):
    agent = _agent(robot)
    cfg = SacConfig(batch_size=4, warmup=2, reward_scale=10.0)
    res = sac.train(ScriptedEnv(4, blowup_at=6), agent, cfg, 10, seed=0)
    assert [r["step"] for r in res.log] == [4, 6, 10]
    assert [r["return"] for r in res.log] == [4.0, 1.0, 4.0]
    assert [r["blowup"] for r in res.log] == [0, 1, 0]
    assert set(res.log[0]) == set(sac.LOG_COLUMNS)
    # updates at every step after warmup: 8 of 10
    assert agent.updates == 8


def test_zero_steps_leave_agent_untouched(robot):
    agent = _agent(robot)
    before = {k: v.copy() for k, v in agent.named().items()}
    res = sac.train(ScriptedEnv(), agent, SacConfig(), 0, seed=0)
    assert res.log == []
    after = agent.named()
    assert before.keys() == after.keys() and all(np.array_equal(before[k], after[k]) for k in before)


def _short_run(robot, seed):
    model, _ = robot
    env = TensegrityEnv("tracking", episode_steps=20, seed=seed)
    agent = _agent(robot, seed=seed)
    cfg = SacConfig(batch_size=8, warmup=10)
    log = sac.train(env, agent, cfg, 60, seed=seed).log
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in log], agent


def test_same_seed_identical_logs(robot):
    (a, ag_a), (b, ag_b) = _short_run(robot, 3), _short_run(robot, 3)
    assert len(a) == 3
    assert repr(a) == repr(b)
    na, nb = ag_a.named(), ag_b.named()
    assert all(np.array_equal(na[k], nb[k]) for k in na)
    c, _ = _short_run(robot, 4)
    assert repr(c) != repr(a)


def test_noise_level_does_not_change_episode_draws():
    clean = TensegrityEnv("tracking", noise_sigma=0.0, seed=2)
    noisy = TensegrityEnv("tracking", noise_sigma=0.2, seed=2)
    for _ in range(2):
        clean.reset(), noisy.reset()
        assert np.array_equal(clean.task.p_target, noisy.task.p_target)
        clean.step(clean.l0), noisy.step(noisy.l0)
