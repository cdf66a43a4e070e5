"""Multi-step TD targets and an exact tabular check of the n-step error split.

Target functions work on an :class:`~sparserl.replay.NStepBatch` and return
one target per row. Networks enter as callables:

* ``target_actor(states) -> actions`` (TD3, actions in [-1, 1])
* ``critic(states, actions) -> q`` returning shape ``(B,)``
* ``policy(states, rng) -> (actions, log_probs)`` (SAC)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TargetConfig:
    n_step: int = 3
    discount: float = 0.99
    multi_step_delay: int = 300_000
    smoothing_sigma: float = 0.2
    smoothing_clip: float = 0.5
    exploration_sigma: float = 0.1

    def __post_init__(self):
        if self.n_step < 1:
            raise ValueError("n_step must be >= 1")
        if not 0.0 < self.discount < 1.0:
            raise ValueError(f"discount {self.discount} outside (0, 1)")


def effective_n_step(cfg: TargetConfig, step: int) -> int:
    """Multi-step targets switch on only once ``step`` reaches the delay."""
    return 1 if step < cfg.multi_step_delay else cfg.n_step


def discounted_reward_sum(batch, discount) -> np.ndarray:
    n = batch.rewards.shape[1]
    return batch.rewards @ (discount ** np.arange(n))


def _min_q(critics, states, actions) -> np.ndarray:
    qs = [np.asarray(c(states, actions), dtype=np.float64).reshape(-1) for c in critics]
    return np.minimum.reduce(qs)


def td3_target(batch, target_actor, target_critics, cfg: TargetConfig, rng=None) -> np.ndarray:
    """``sum_k g^k r_k + [not terminal] g^m min_j Q'_j(s_m, a~)`` with clipped smoothing noise."""
    s_boot = batch.bootstrap_states
    a = np.asarray(target_actor(s_boot), dtype=np.float64).reshape(len(batch), -1)
    if cfg.smoothing_sigma > 0.0:
        noise = rng.normal(0.0, cfg.smoothing_sigma, size=a.shape)
        a = a + np.clip(noise, -cfg.smoothing_clip, cfg.smoothing_clip)
    a = np.clip(a, -1.0, 1.0)
    q = _min_q(target_critics, s_boot, a)
    bootstrap = np.where(batch.terminal, 0.0, cfg.discount ** batch.effective_n * q)
    return discounted_reward_sum(batch, cfg.discount) + bootstrap


def sac_target(batch, target_critics, policy, alpha, cfg: TargetConfig, rng=None) -> np.ndarray:
    """SAC n-step target with a discounted entropy bonus at every visited next state.

    The log-probability at a terminal state is left out, as is anything past
    the end of a short segment.
    """
    b, n = batch.rewards.shape
    gamma = cfg.discount
    sd = batch.next_states.shape[2]
    flat_states = batch.next_states.reshape(b * n, sd)
    actions, logp = policy(flat_states, rng)
    actions = np.asarray(actions, dtype=np.float64).reshape(b, n, -1)
    logp = np.asarray(logp, dtype=np.float64).reshape(b, n)

    k = np.arange(n)
    m = batch.effective_n
    include = k[None, :] < m[:, None]
    include &= ~(batch.terminal[:, None] & (k[None, :] == (m - 1)[:, None]))
    entropy = ((gamma ** (k + 1))[None, :] * logp * include).sum(axis=1)

    rows = np.arange(b)
    s_boot = batch.next_states[rows, m - 1]
    a_boot = actions[rows, m - 1]
    q = _min_q(target_critics, s_boot, a_boot)
    bootstrap = np.where(batch.terminal, 0.0, gamma**m * q)
    return discounted_reward_sum(batch, gamma) + bootstrap - alpha * entropy


# ---------------------------------------------------------------------------
# tabular decomposition


@dataclass
class TabularMdp:
    transitions: np.ndarray  # (S, A, S)
    rewards: np.ndarray  # (S, A)
    discount: float
    target_policy: np.ndarray  # (S, A) action probabilities
    behavior_policy: np.ndarray  # (S, A)
    q_approx: np.ndarray  # (S, A)

    def __post_init__(self):
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        for name in ("target_policy", "behavior_policy"):
            if not np.allclose(getattr(self, name).sum(axis=1), 1.0, atol=1e-12):
                raise ValueError(f"{name} rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return self.rewards.shape[1]

    def q_exact(self) -> np.ndarray:
        """Q of the target policy from the Bellman linear system."""
        s, a = self.rewards.shape
        pi = self.target_policy
        # Q = R + g P Pi Q, with (Pi Q)(s') = sum_a' pi(a'|s') Q(s', a')
        p = self.transitions.reshape(s * a, s)
        pi_op = np.zeros((s, s * a))
        for i in range(s):
            pi_op[i, i * a : (i + 1) * a] = pi[i]
        lhs = np.eye(s * a) - self.discount * p @ pi_op
        return np.linalg.solve(lhs, self.rewards.reshape(-1)).reshape(s, a)

    def fitting_error(self) -> np.ndarray:
        return self.q_approx - self.q_exact()


def random_mdp(rng, n_states=5, n_actions=2, discount=0.9, same_policies=False, q_scale=1.0) -> TabularMdp:
    p = rng.random((n_states, n_actions, n_states))
    p /= p.sum(axis=2, keepdims=True)
    pi = rng.random((n_states, n_actions))
    pi /= pi.sum(axis=1, keepdims=True)
    if same_policies:
        b = pi.copy()
    else:
        b = rng.random((n_states, n_actions))
        b /= b.sum(axis=1, keepdims=True)
    return TabularMdp(p, rng.random((n_states, n_actions)), discount, pi, b, q_scale * rng.normal(size=(n_states, n_actions)))


class EnumerationBudgetExceeded(RuntimeError):
    pass


def _expectations(mdp, policy, n, state, action, q_values, eps, counter, budget):
    """Enumerate every length-n continuation of (state, action) under ``policy``.

    Returns ``(E[T_n], E[eps(s_n, pi(s_n))])`` where the bootstrap at ``s_n``
    averages over the target policy.
    """
    g = mdp.discount
    pi = mdp.target_policy
    boot_q = (pi * q_values).sum(axis=1)
    boot_eps = (pi * eps).sum(axis=1)
    exp_t = 0.0
    exp_eps = 0.0
    # stack of (prob, discounted return so far, state, action, depth)
    stack = [(1.0, 0.0, state, action, 0)]
    while stack:
        prob, ret, s, a, depth = stack.pop()
        counter[0] += 1
        if counter[0] > budget:
            raise EnumerationBudgetExceeded(f"trajectory enumeration exceeded {budget} nodes")
        ret = ret + g**depth * mdp.rewards[s, a]
        for s2 in range(mdp.n_states):
            p2 = prob * mdp.transitions[s, a, s2]
            if depth + 1 == n:
                exp_t += p2 * (ret + g**n * boot_q[s2])
                exp_eps += p2 * boot_eps[s2]
            else:
                for a2 in range(mdp.n_actions):
                    stack.append((p2 * policy[s2, a2], ret, s2, a2, depth + 1))
    return exp_t, exp_eps


def decompose_td_error(mdp: TabularMdp, n: int, state: int, action: int, node_budget=1_000_000) -> tuple:
    """Return ``(total, policy_term, fitting_term)`` for the n-step target at (state, action).

    ``total = E_b[T_n] - Q_pi``, ``policy_term = E_b[T_n] - E_pi[T_n]`` and
    ``fitting_term = g^n E_pi[eps(s_n, pi(s_n))]``, each by exhaustive
    enumeration of n-step trajectories.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0 <= state < mdp.n_states and 0 <= action < mdp.n_actions):
        raise ValueError(f"invalid state/action ({state}, {action})")
    q_exact = mdp.q_exact()
    eps = mdp.q_approx - q_exact
    counter = [0]
    e_b, _ = _expectations(mdp, mdp.behavior_policy, n, state, action, mdp.q_approx, eps, counter, node_budget)
    e_pi, e_eps = _expectations(mdp, mdp.target_policy, n, state, action, mdp.q_approx, eps, counter, node_budget)
    total = e_b - q_exact[state, action]
    policy_term = e_b - e_pi
    fitting_term = mdp.discount**n * e_eps
    return total, policy_term, fitting_term
