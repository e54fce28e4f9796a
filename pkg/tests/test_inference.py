import math

import numpy as np
import pytest

from actiongrad.autodiff import MlpParams, RngStream, init_mlp, quadratic_critic
from actiongrad.critic import QNet, analytic_critic, q_value
from actiongrad.envs import S4, BanditEnv, StitchEnv, bandit_dataset, bandit_reward, stitch_dataset
from actiongrad.errors import ConfigurationError
from actiongrad.inference import (
    AGConfig,
    EvalConfig,
    adaptive_context,
    ag_refine,
    ag_step_adam,
    ag_step_momentum,
    ag_step_rmsprop,
    evaluate,
    run_episode,
)
from actiongrad.policy import DTConfig, train_policy

SMALL = dict(n_layers=2, embed_dim=32, n_heads=2)
Q1 = analytic_critic(1)  # Q(s, a) = 1 - a^2, dQ/da = -2a


def _grad(a):
    return -2.0 * a


# ---------------------------------------------------------------- plain AG


def test_n_zero_is_identity():
    tr = ag_refine(Q1, [0.0], [0.6], AGConfig(n=0))
    assert len(tr.actions) == 1 and tr.selected == 0 and tr.action[0] == 0.6


def test_single_step_hand_example():
    tr = ag_refine(Q1, [0.0], [0.6], AGConfig(eta=0.1, n=1))
    assert tr.actions[1][0] == pytest.approx(0.48, abs=1e-15)
    assert tr.q_values == pytest.approx([0.64, 0.7696], abs=1e-15)
    assert tr.selected == 1


def test_geometric_contraction():
    tr = ag_refine(Q1, [0.0], [0.6], AGConfig(eta=0.1, n=50, clip_actions=False))
    for i, a in enumerate(tr.actions):
        assert abs(a[0] - 0.6 * 0.8**i) <= 1e-10
    assert tr.selected == 50
    assert abs(tr.action[0]) < 1e-4


@pytest.mark.parametrize("eta", [0.01, 0.05, 0.2, 0.45])
def test_contraction_rate(eta):
    tr = ag_refine(Q1, [0.0], [-0.9], AGConfig(eta=eta, n=20, clip_actions=False))
    np.testing.assert_allclose(np.abs(tr.actions[-1]), (1 - 2 * eta) ** 20 * 0.9, rtol=1e-10)


def test_ties_pick_earliest():
    flat = QNet(MlpParams([np.zeros((2, 1))], [np.ones(1)], "identity"), 1, 1)
    tr = ag_refine(flat, [0.0], [0.3], AGConfig(n=5))
    assert tr.selected == 0


def test_clipping_keeps_actions_in_bounds():
    up = QNet(MlpParams([np.array([[0.0], [5.0]])], [np.zeros(1)], "identity"), 1, 1)
    for method in ("plain", "momentum", "rmsprop", "adam"):
        tr = ag_refine(up, [0.0], [0.9], AGConfig(eta=0.3, n=8, method=method))
        assert all(-1.0 <= a[0] <= 1.0 for a in tr.actions)
        assert tr.action[0] == 1.0


# ---------------------------------------------------------- moment methods


def test_momentum_zero_zeta_freezes_action():
    a, v = 0.6, 0.0
    for _ in range(3):
        a, v = ag_step_momentum(a, v, _grad(a), zeta=0.0, eta=0.1)
    assert a == 0.6 and v == 0.0


def test_momentum_constant_gradient_unit_zeta():
    a, v, g, eta = 0.0, 0.0, 0.5, 0.1
    oracle_a = 0.0
    for i in range(3):
        a, v = ag_step_momentum(a, v, g, zeta=1.0, eta=eta)
        assert v == (i + 1) * g
        oracle_a += eta * (i + 1) * g
        assert a == pytest.approx(oracle_a, abs=1e-15)
    assert a == pytest.approx(0.1 * 0.5 * (1 + 2 + 3), abs=1e-15)


def test_momentum_two_steps_oracle():
    # straight-line transcription with zeta = 0.5, eta = 0.1 on Q = 1 - a^2
    a0 = 0.6
    v1 = 0.0 + 0.5 * (-2 * a0)
    a1 = a0 + 0.1 * v1
    v2 = v1 + 0.5 * (-2 * a1)
    a2 = a1 + 0.1 * v2
    tr = ag_refine(Q1, [0.0], [a0], AGConfig(eta=0.1, n=2, method="momentum", zeta=0.5, clip_actions=False))
    assert abs(tr.actions[1][0] - a1) <= 1e-12 and abs(tr.actions[2][0] - a2) <= 1e-12


def test_rmsprop_examples_and_oracle():
    eps = 1e-8
    a, r = ag_step_rmsprop(0.2, 0.0, 3.0, zeta=0.0, eta=0.1, epsilon=eps)
    assert a == pytest.approx(0.2 + 0.1 * 3.0 / (3.0 + eps), abs=1e-15)
    assert ag_step_rmsprop(0.2, 0.4, 0.0, zeta=0.9, eta=0.1, epsilon=eps)[0] == 0.2

    zeta, eta = 0.9, 0.05
    a0 = 0.7
    g0 = -2 * a0
    r0 = (1 - zeta) * g0 * g0
    a1 = a0 + eta * g0 / (math.sqrt(r0) + eps)
    g1 = -2 * a1
    r1 = zeta * r0 + (1 - zeta) * g1 * g1
    a2 = a1 + eta * g1 / (math.sqrt(r1) + eps)
    g2 = -2 * a2
    r2 = zeta * r1 + (1 - zeta) * g2 * g2
    a3 = a2 + eta * g2 / (math.sqrt(r2) + eps)
    tr = ag_refine(Q1, [0.0], [a0], AGConfig(eta=eta, n=3, method="rmsprop", zeta=zeta, epsilon=eps,
                                             clip_actions=False))
    np.testing.assert_allclose([a[0] for a in tr.actions], [a0, a1, a2, a3], rtol=0, atol=1e-12)


def test_adam_literal_oracle_and_degenerate():
    eps = 1e-8
    a, m, v = ag_step_adam(0.1, 0.0, 0.0, 2.0, zeta1=0.0, zeta2=0.0, eta=0.1, epsilon=eps)
    assert a == pytest.approx(0.1 + 0.1 * 2.0 / (2.0 + eps), abs=1e-15)
    assert ag_step_adam(0.1, 0.3, 0.2, 0.0, 0.0, 0.0, 0.1, eps)[0] == 0.1

    z1, z2, eta = 0.9, 0.999, 0.05
    a0 = -0.8
    m = v = 0.0
    seq = [a0]
    ai = a0
    for _ in range(3):
        g = -2 * ai
        m = z1 * m + (1 - z1) * g
        v = z2 * v + (1 - z2) * g * g
        ai = ai + eta / (math.sqrt(v) + eps) * m  # raw m and v, as printed
        seq.append(ai)
    tr = ag_refine(Q1, [0.0], [a0], AGConfig(eta=eta, n=3, method="adam", zeta1=z1, zeta2=z2, epsilon=eps,
                                             clip_actions=False))
    np.testing.assert_allclose([a[0] for a in tr.actions], seq, rtol=0, atol=1e-12)


def test_adam_standard_flag_matches_bias_corrected_oracle():
    eps, z1, z2, eta = 1e-8, 0.9, 0.999, 0.05
    ai, m, v = 0.5, 0.0, 0.0
    seq = [ai]
    for t in range(1, 4):
        g = -2 * ai
        m = z1 * m + (1 - z1) * g
        v = z2 * v + (1 - z2) * g * g
        ai = ai + eta * (m / (1 - z1**t)) / (math.sqrt(v / (1 - z2**t)) + eps)
        seq.append(ai)
    cfg = AGConfig(eta=eta, n=3, method="adam", standard_adam=True, clip_actions=False)
    tr = ag_refine(Q1, [0.0], [0.5], cfg)
    np.testing.assert_allclose([a[0] for a in tr.actions], seq, rtol=0, atol=1e-12)


def test_moments_reset_between_calls():
    cfg = AGConfig(eta=0.05, n=4, method="momentum", zeta=0.9)
    first = ag_refine(Q1, [0.0], [0.5], cfg)
    ag_refine(Q1, [0.0], [-0.9], cfg)
    again = ag_refine(Q1, [0.0], [0.5], cfg)
    assert [a[0] for a in first.actions] == [a[0] for a in again.actions]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AGConfig(n=-1)
    with pytest.raises(ConfigurationError):
        AGConfig(method="newton")
    with pytest.raises(ConfigurationError):
        AGConfig(zeta=1.0)
    with pytest.raises(ConfigurationError):
        AGConfig(epsilon=0.0)


# -------------------------------------------------------------- selection


def test_selection_dominance_random_trials():
    rng = np.random.default_rng(0)
    methods = ("plain", "momentum", "rmsprop", "adam")
    for trial in range(200):
        obs = int(rng.integers(1, 4))
        act = int(rng.integers(1, 3))
        qnet = QNet(init_mlp([obs + act, 16, 1], RngStream(trial), activation=str(rng.choice(["relu", "tanh"]))),
                    obs, act)
        cfg = AGConfig(eta=float(rng.uniform(0.01, 0.5)), n=int(rng.integers(0, 12)),
                       method=methods[trial % 4])
        s = rng.normal(size=obs)
        a0 = rng.uniform(-1, 1, size=act)
        tr = ag_refine(qnet, s, a0, cfg)
        assert q_value(qnet, s, tr.action) >= q_value(qnet, s, a0)


def test_selection_invariant_to_critic_scale():
    cfg = AGConfig(eta=0.3, n=6, method="momentum", zeta=0.6)
    tr = ag_refine(Q1, [0.0], [0.8], cfg)
    for c in (0.1, 3.0, 250.0):
        base = quadratic_critic(1)
        scaled = QNet(MlpParams(base.weights, base.biases, base.activation, c), 1, 1)
        q = [q_value(scaled, [0.0], a) for a in tr.actions]
        assert int(np.argmax(q)) == tr.selected


# ------------------------------------------------------- adaptive context


def test_adaptive_context_examples():
    assert adaptive_context([5, 4, 3, 2, 1], 20) == 5
    assert adaptive_context([3, 7, 6], 20) == 2
    assert adaptive_context([9, 8, 7, 6], 1) == 1
    assert adaptive_context([1], 5) == 1
    assert adaptive_context([1, 1], 5) == 1


def test_adaptive_context_never_exceeds_cap():
    rng = np.random.default_rng(1)
    for _ in range(100_000):
        k_max = int(rng.integers(1, 8))
        h = np.cumsum(rng.normal(size=int(rng.integers(1, 12))))
        length = adaptive_context(h, k_max)
        assert 1 <= length <= min(k_max, len(h))


# ---------------------------------------------------------------- runners


@pytest.fixture(scope="module")
def bandit_model():
    ds = bandit_dataset(1000, RngStream(0), sides="positive")
    model, _ = train_policy(ds, DTConfig(k=1, loss_mode="dt_mse", steps=150, batch=32, lr=1e-3, **SMALL))
    return model


@pytest.fixture(scope="module")
def stitch_model():
    ds = stitch_dataset(400, RngStream(0))
    model, _ = train_policy(ds, DTConfig(k=20, loss_mode="rf_nll", tau_rtg=0.9, steps=300, batch=64,
                                         lr=1e-3, **SMALL))
    return model


def test_bandit_n0_return_is_raw_action_reward(bandit_model):
    ev = EvalConfig(episodes=1, seeds=(0,), rtg_mode="preset", rtg_value=0.75)
    log = run_episode(BanditEnv(), bandit_model, None, ev, AGConfig(n=0), RngStream(0))
    step = log.steps[0]
    assert step.raw_action == step.action
    assert log.total_return == bandit_reward(step.raw_action[0])


def test_ag_disabled_is_bitwise_raw_policy(bandit_model):
    ev = EvalConfig(episodes=3, seeds=(0, 1), rtg_mode="preset", rtg_value=0.75)
    raw = evaluate("bandit-v0", bandit_model, None, ev)
    off = evaluate("bandit-v0", bandit_model, Q1, ev, AGConfig(n=0))
    assert [e.raw_return for e in raw.episodes] == [e.raw_return for e in off.episodes]
    assert [l.steps[0].action for l in raw.logs] == [l.steps[0].action for l in off.logs]


def test_ag_gains_are_nonnegative_and_improve_bandit(bandit_model):
    ev = EvalConfig(episodes=2, seeds=(0,), rtg_mode="preset", rtg_value=0.75)
    res = evaluate("bandit-v0", bandit_model, Q1, ev, AGConfig(eta=0.05, n=10))
    assert all(s.q_gain >= 0 for log in res.logs for s in log.steps)
    assert res.mean_return > 0.9


def test_stitch_predicted_rtg_from_s2_reaches_s4(stitch_model):
    ev = EvalConfig(episodes=5, seeds=(0,), rtg_mode="predicted_per_step", adaptive_context=True, start="s2")
    log = run_episode(StitchEnv(), stitch_model, None, ev, None, RngStream(0))
    assert log.total_return == 100.0
    assert log.steps[-1].action[0] >= 0 and len(log.steps) == 2
    env = StitchEnv()
    env.reset(start="s2")
    env.step(log.steps[0].action)
    assert np.argmax(env.step(log.steps[1].action).next_state) == S4


def test_evaluate_protocol_and_determinism(stitch_model):
    ev = EvalConfig(rtg_mode="preset", rtg_value=0.0)
    assert ev.seeds == (0, 1, 2, 3, 4) and ev.episodes == 10
    fixed = EvalConfig(episodes=4, seeds=(3, 4), rtg_mode="preset", rtg_value=0.0, start="s1")
    a = evaluate("stitch-v0", stitch_model, None, fixed)
    b = evaluate("stitch-v0", stitch_model, None, fixed)
    assert a.episodes == b.episodes
    for seed in (3, 4):
        scores = [e.normalized for e in a.episodes if e.seed == seed]
        assert np.var(scores) == 0.0
    assert len(a.episodes) == 8


def test_runner_errors(bandit_model):
    ev = EvalConfig(episodes=1, seeds=(0,), rtg_mode="preset", rtg_value=0.5)
    with pytest.raises(ConfigurationError):
        run_episode(StitchEnv(), bandit_model, None, ev, rng=RngStream(0))
    with pytest.raises(ConfigurationError):
        run_episode(BanditEnv(), bandit_model, None, ev, AGConfig(n=3), RngStream(0))
    with pytest.raises(ConfigurationError):
        EvalConfig(rtg_mode="preset")
    with pytest.raises(ConfigurationError):
        EvalConfig(episodes=0, rtg_mode="predicted_per_step")
