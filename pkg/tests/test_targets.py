import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparserl.replay import NStepBatch, NStepSegment
from sparserl.targets import (
    EnumerationBudgetExceeded,
    TabularMdp,
    TargetConfig,
    decompose_td_error,
    effective_n_step,
    random_mdp,
    sac_target,
    td3_target,
)

NO_NOISE = TargetConfig(n_step=3, discount=0.99, smoothing_sigma=0.0)


def batch_of(rewards, terminal=False, state_dim=1, next_states=None):
    m = len(rewards)
    nxt = np.arange(1, m + 1, dtype=float).reshape(m, 1) if next_states is None else np.asarray(next_states)
    seg = NStepSegment(np.zeros(state_dim), np.zeros(1), np.asarray(rewards, float), nxt, m, terminal)
    return NStepBatch.from_segments([seg])


def const_critic(value):
    return lambda s, a: np.full(len(s), float(value))


def zero_actor(s):
    return np.zeros((len(s), 1))


def const_policy(logp):
    return lambda s, rng: (np.zeros((len(s), 1)), np.full(len(s), float(logp)))


class TestTd3Target:
    def test_one_step(self):
        y = td3_target(batch_of([1.0]), zero_actor, [const_critic(2.0), const_critic(5.0)], NO_NOISE)
        assert y[0] == pytest.approx(2.98, abs=1e-12)

    def test_three_step(self):
        y = td3_target(batch_of([1.0, 1.0, 1.0]), zero_actor, [const_critic(0.0)] * 2, NO_NOISE)
        assert y[0] == pytest.approx(2.9701, abs=1e-12)

    def test_terminal_skips_bootstrap(self):
        y = td3_target(batch_of([1.0, 2.0], terminal=True), zero_actor, [const_critic(1e6)] * 2, NO_NOISE)
        assert y[0] == pytest.approx(1.0 + 0.99 * 2.0, abs=1e-12)

    def test_n1_matches_one_step_form(self):
        rng = np.random.default_rng(0)
        r, s2 = rng.normal(size=8), rng.normal(size=(8, 1))
        segs = [NStepSegment(np.zeros(1), np.zeros(1), r[i : i + 1], s2[i : i + 1], 1, False) for i in range(8)]
        actor = lambda s: np.tanh(s)
        q1 = lambda s, a: (s * a).ravel() + 1.0
        q2 = lambda s, a: (s + a).ravel()
        y = td3_target(NStepBatch.from_segments(segs), actor, [q1, q2], NO_NOISE)
        a2 = np.tanh(s2)
        expected = r + 0.99 * np.minimum((s2 * a2).ravel() + 1.0, (s2 + a2).ravel())
        np.testing.assert_array_equal(y, expected)

    def test_smoothing_noise_is_clipped(self):
        seen = []

        def critic(s, a):
            seen.append(a.copy())
            return np.zeros(len(s))

        cfg = TargetConfig(discount=0.99, smoothing_sigma=10.0, smoothing_clip=0.5)
        batch = NStepBatch.from_segments([batch_of([0.0]).segment(0)] * 500)
        td3_target(batch, lambda s: np.full((len(s), 1), 0.8), [critic], cfg, np.random.default_rng(0))
        a = seen[0]
        assert a.min() >= 0.3 - 1e-12 and a.max() <= 1.0
        assert np.isclose(a.min(), 0.3) and np.isclose(a.max(), 1.0)

    @settings(max_examples=50)
    @given(
        rewards=st.lists(st.floats(-10, 10), min_size=1, max_size=4),
        q=st.floats(-50, 50),
        delta=st.floats(-5, 5),
    )
    def test_monotone_in_bootstrap(self, rewards, q, delta):
        batch = batch_of(rewards)
        y0 = td3_target(batch, zero_actor, [const_critic(q)], NO_NOISE)[0]
        y1 = td3_target(batch, zero_actor, [const_critic(q + delta)], NO_NOISE)[0]
        assert y1 - y0 == pytest.approx(0.99 ** len(rewards) * delta, abs=1e-9)


class TestSacTarget:
    def test_zero_alpha_is_plain_nstep(self):
        batch = batch_of([1.0, 1.0, 1.0])
        y = sac_target(batch, [const_critic(0.0)], const_policy(-3.0), 0.0, NO_NOISE)
        assert y[0] == pytest.approx(2.9701, abs=1e-12)

    def test_one_step_form(self):
        alpha, logp = 0.2, -1.3
        y = sac_target(batch_of([1.0]), [const_critic(2.0), const_critic(4.0)], const_policy(logp), alpha, NO_NOISE)
        assert y[0] == pytest.approx(1.0 + 0.99 * (2.0 - alpha * logp), abs=1e-12)

    def test_constant_log_prob_two_steps(self):
        alpha, L, g = 0.5, 0.7, 0.99
        y = sac_target(batch_of([0.0, 0.0]), [const_critic(0.0)], const_policy(L), alpha, NO_NOISE)
        assert y[0] == pytest.approx(-alpha * (g + g**2) * L, abs=1e-12)

    def test_terminal_drops_last_entropy_term(self):
        alpha, L, g = 0.5, 0.7, 0.99
        y = sac_target(batch_of([0.0, 0.0], terminal=True), [const_critic(9.0)], const_policy(L), alpha, NO_NOISE)
        assert y[0] == pytest.approx(-alpha * g * L, abs=1e-12)

    def test_padded_rows_ignored(self):
        short = batch_of([1.0]).segment(0)
        long = batch_of([1.0, 1.0, 1.0]).segment(0)
        batch = NStepBatch.from_segments([short, long], 3)
        y = sac_target(batch, [const_critic(1.0)], const_policy(-1.0), 0.1, NO_NOISE)
        assert y[0] == pytest.approx(1.0 + 0.99 * (1.0 + 0.1), abs=1e-12)
        g = 0.99
        assert y[1] == pytest.approx(1 + g + g**2 + g**3 * 1.0 + 0.1 * (g + g**2 + g**3), abs=1e-12)


def test_multi_step_delay():
    cfg = TargetConfig(n_step=3, multi_step_delay=100)
    assert [effective_n_step(cfg, t) for t in (0, 99, 100, 5000)] == [1, 1, 3, 3]


def test_config_validation():
    with pytest.raises(ValueError):
        TargetConfig(n_step=0)
    with pytest.raises(ValueError):
        TargetConfig(discount=1.0)


def dp_expected_return(mdp, policy, n, q):
    # backward recursion over the horizon; independent of trajectory enumeration
    pi_q = (mdp.target_policy * q).sum(axis=1)
    u = mdp.rewards + mdp.discount * mdp.transitions @ pi_q
    for _ in range(n - 1):
        v = (policy * u).sum(axis=1)
        u = mdp.rewards + mdp.discount * mdp.transitions @ v
    return u


def value_iteration_q(mdp, iters=2000):
    q = np.zeros_like(mdp.rewards)
    for _ in range(iters):
        q = mdp.rewards + mdp.discount * mdp.transitions @ (mdp.target_policy * q).sum(axis=1)
    return q


class TestDecomposition:
    def test_exact_q_agrees_with_value_iteration(self):
        mdp = random_mdp(np.random.default_rng(0))
        np.testing.assert_allclose(mdp.q_exact(), value_iteration_q(mdp), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_terms_match_dynamic_programming(self, seed, n):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng)
        s, a = int(rng.integers(5)), int(rng.integers(2))
        total, pol, fit = decompose_td_error(mdp, n, s, a)
        e_b = dp_expected_return(mdp, mdp.behavior_policy, n, mdp.q_approx)[s, a]
        e_pi = dp_expected_return(mdp, mdp.target_policy, n, mdp.q_approx)[s, a]
        q = mdp.q_exact()
        assert total == pytest.approx(e_b - q[s, a], abs=1e-12)
        assert pol == pytest.approx(e_b - e_pi, abs=1e-12)
        assert abs(total - (pol + fit)) < 1e-12

    def test_same_policies_zero_policy_term(self):
        mdp = random_mdp(np.random.default_rng(3), same_policies=True)
        for n in (1, 2, 3):
            total, pol, fit = decompose_td_error(mdp, n, 2, 1)
            assert pol == 0.0
            assert total == pytest.approx(fit, abs=1e-12)

    def test_exact_q_zero_fitting_term(self):
        mdp = random_mdp(np.random.default_rng(4))
        mdp.q_approx = mdp.q_exact()
        total, pol, fit = decompose_td_error(mdp, 2, 0, 0)
        assert abs(fit) < 1e-14
        assert total == pytest.approx(pol, abs=1e-12)

    def test_fitting_term_scales_linearly(self):
        mdp = random_mdp(np.random.default_rng(5))
        q = mdp.q_exact()
        eps = mdp.q_approx - q
        _, _, base = decompose_td_error(mdp, 2, 1, 0)
        for kappa in (0.5, 2.0, -3.0):
            mdp.q_approx = q + kappa * eps
            assert decompose_td_error(mdp, 2, 1, 0)[2] == pytest.approx(kappa * base, rel=1e-10)

    def test_state_independent_error_attenuates_by_discount(self):
        mdp = random_mdp(np.random.default_rng(6), discount=0.8)
        mdp.q_approx = mdp.q_exact() + 0.5
        fits = [decompose_td_error(mdp, n, 0, 1)[2] for n in (1, 2, 3)]
        np.testing.assert_allclose(fits, [0.5 * 0.8, 0.5 * 0.64, 0.5 * 0.512], rtol=1e-10)

    def test_budget(self):
        mdp = random_mdp(np.random.default_rng(0))
        with pytest.raises(EnumerationBudgetExceeded):
            decompose_td_error(mdp, 6, 0, 0, node_budget=1000)

    def test_invalid_arguments(self):
        mdp = random_mdp(np.random.default_rng(0))
        with pytest.raises(ValueError):
            decompose_td_error(mdp, 0, 0, 0)
        with pytest.raises(ValueError):
            decompose_td_error(mdp, 1, 5, 0)

    def test_rejects_bad_transition_rows(self):
        p = np.full((2, 1, 2), 0.4)
        one = np.ones((2, 1))
        with pytest.raises(ValueError):
            TabularMdp(p, np.zeros((2, 1)), 0.9, one, one, np.zeros((2, 1)))
