"""Sparse TD3 and SAC training loops with topology evolution and a dynamic buffer.

Actions are handled in the unit box [-1, 1]^d everywhere inside the agents
(networks, replay buffer, policy distance); they are mapped onto the task's
own bounds only when passed to ``env.step``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .config import TrainConfig
from .net import Adam, DivergenceError, Mlp, OptimizerState, adam_step, init_network, polyak_update
from .replay import DynamicBuffer
from .sparsity import EvolutionSchedule, anneal_fraction, er_allocate, evolve_topology
from .targets import TargetConfig, effective_n_step, sac_target, td3_target

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
METRIC_COLUMNS = (
    "step", "eval_return", "buffer_size", "policy_distance", "drops",
    "actor_active", "critic_active", "train_flops_cum",
)


@dataclass(frozen=True)
class TopologyMode:
    grow_mode: str
    multi_step: bool
    dynamic_buffer: bool


# RLx2 and the static-mask ("winning ticket") mode keep the multi-step target
# and the dynamic buffer; the sparse-training baselines run plain one-step
# targets from a fixed-capacity ring.
TOPOLOGY_MODES = {
    "rlx2": TopologyMode("gradient", True, True),
    "rigl": TopologyMode("gradient", False, False),
    "set": TopologyMode("random", False, False),
    "static_sparse": TopologyMode("frozen", False, False),
    "tiny_dense": TopologyMode("frozen", False, False),
    "static_mask": TopologyMode("frozen", True, True),
}


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; ``state`` holds diagnostics."""

    def __init__(self, message, state):
        super().__init__(message)
        self.state = state


@dataclass
class TrainResult:
    evaluations: list
    final_score: float
    flops: accounting.FlopsReport
    masks: dict
    networks: dict
    metrics: list
    env_steps: int
    critic_updates: int
    actor_updates: int
    buffer_drops: int
    capacity_log: list = field(default_factory=list)


def final_score(evaluations, window=30) -> float:
    """Mean return over the last ``min(window, count)`` evaluations."""
    if not evaluations:
        return float("nan")
    returns = [r for _, r in evaluations[-window:]]
    return float(np.mean(returns))


# ---------------------------------------------------------------------------
# network construction


def actor_dims(cfg: TrainConfig, state_dim, action_dim, hidden=None) -> list:
    out = action_dim if cfg.algorithm == "td3" else 2 * action_dim
    return [state_dim, *(hidden or cfg.hidden), out]


def critic_dims(cfg: TrainConfig, state_dim, action_dim, hidden=None) -> list:
    return [state_dim + action_dim, *(hidden or cfg.hidden), 1]


def _pairs(dims):
    return list(zip(dims, dims[1:]))


def sparse_budget(dims, sparsity) -> int:
    alloc = er_allocate(sparsity, _pairs(dims))
    return sum(alloc.active_counts(_pairs(dims)))


def tiny_dense_width(cfg: TrainConfig, state_dim, action_dim) -> int:
    """Largest uniform hidden width whose dense actor+critic fits the sparse weight budget."""
    budget = sparse_budget(actor_dims(cfg, state_dim, action_dim), cfg.actor_sparsity) + sparse_budget(
        critic_dims(cfg, state_dim, action_dim), cfg.critic_sparsity
    )
    depth = len(cfg.hidden)
    best = 1
    for w in range(1, max(cfg.hidden) + 1):
        hidden = (w,) * depth
        size = sum(i * o for i, o in _pairs(actor_dims(cfg, state_dim, action_dim, hidden)))
        size += sum(i * o for i, o in _pairs(critic_dims(cfg, state_dim, action_dim, hidden)))
        if size <= budget:
            best = w
        else:
            break
    return best


def _layer_sparsity(dims, sparsity):
    return er_allocate(sparsity, _pairs(dims)).exact_sparsities(_pairs(dims))


def build_networks(cfg: TrainConfig, state_dim, action_dim, rng, masks=None) -> dict:
    """Online networks for the configured algorithm and topology mode.

    ``masks`` maps network names to per-layer masks and is required by the
    ``static_mask`` mode.
    """
    head = "tanh" if cfg.algorithm == "td3" else "gaussian"
    if cfg.topology == "tiny_dense":
        w = tiny_dense_width(cfg, state_dim, action_dim)
        hidden = (w,) * len(cfg.hidden)
        a_dims = actor_dims(cfg, state_dim, action_dim, hidden)
        c_dims = critic_dims(cfg, state_dim, action_dim, hidden)
        a_sp = [0.0] * (len(a_dims) - 1)
        c_sp = [0.0] * (len(c_dims) - 1)
    else:
        a_dims = actor_dims(cfg, state_dim, action_dim)
        c_dims = critic_dims(cfg, state_dim, action_dim)
        a_sp = _layer_sparsity(a_dims, cfg.actor_sparsity)
        c_sp = _layer_sparsity(c_dims, cfg.critic_sparsity)
    nets = {
        "actor": init_network(a_dims, a_sp, head, rng),
        "critic1": init_network(c_dims, c_sp, "identity", rng),
        "critic2": init_network(c_dims, c_sp, "identity", rng),
    }
    if cfg.topology == "static_mask":
        if masks is None:
            raise ValueError("static_mask topology needs masks")
        for name, net in nets.items():
            layer_masks = masks.get(name) or (masks.get("critic1") if name == "critic2" else None)
            if layer_masks is None:
                raise ValueError(f"no masks supplied for {name}")
            apply_masks(net, layer_masks)
    return nets


def apply_masks(net: Mlp, masks) -> None:
    if len(masks) != len(net.layers):
        raise ValueError(f"{len(masks)} masks for {len(net.layers)} layers")
    for layer, m in zip(net.layers, masks):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != layer.weights.shape:
            raise ValueError(f"mask shape {m.shape} != layer shape {layer.weights.shape}")
        layer.mask = m.copy()
        layer.weights *= layer.mask
        layer.target_sparsity = 1.0 - float(m.mean())


# ---------------------------------------------------------------------------
# evaluation


def evaluate(policy, env, episodes: int, rng) -> float:
    """Mean undiscounted return of ``policy`` (unit-box actions) over full episodes."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    total = 0.0
    for _ in range(episodes):
        obs = env.reset(rng)
        ret = 0.0
        while True:
            action = env.spec.scale_action(policy(obs))
            obs, reward, done, truncated = env.step(action)
            ret += reward
            if done or truncated:
                break
        total += ret
    return total / episodes


# ---------------------------------------------------------------------------
# training loop shared by both algorithms


def _critic_fn(net):
    return lambda s, a: net(np.hstack([s, a]))[:, 0]


class _Trainer:
    algorithm = ""

    def __init__(self, cfg: TrainConfig, env, rng=None, masks=None, eval_env=None):
        cfg.validate()
        if cfg.algorithm != self.algorithm:
            raise ValueError(f"{type(self).__name__} needs algorithm={self.algorithm!r}")
        self.cfg = cfg
        self.env = env
        self.spec = env.spec
        seq = np.random.SeedSequence(cfg.seed) if rng is None else np.random.SeedSequence(rng.integers(2**63))
        s_init, s_env, s_act, s_sample, s_eval, s_evo = seq.spawn(6)
        self.rng_act = np.random.default_rng(s_act)
        self.rng_sample = np.random.default_rng(s_sample)
        self.rng_env = np.random.default_rng(s_env)
        self.rng_eval = np.random.default_rng(s_eval)
        self.rng_evo = np.random.default_rng(s_evo)
        self.eval_env = eval_env

        sd, ad = self.spec.state_dim, self.spec.action_dim
        self.nets = build_networks(cfg, sd, ad, np.random.default_rng(s_init), masks)
        self.opts = {
            name: OptimizerState.for_network(net, cfg.learning_rate) for name, net in self.nets.items()
        }
        self.targets = {name: self.nets[name].copy() for name in self.target_names}
        self.mode = TOPOLOGY_MODES[cfg.topology]
        self.tcfg = TargetConfig(
            n_step=cfg.n if self.mode.multi_step else 1,
            discount=cfg.discount,
            multi_step_delay=cfg.multi_step_delay,
            smoothing_sigma=cfg.smoothing_sigma,
            smoothing_clip=cfg.smoothing_clip,
            exploration_sigma=cfg.exploration_sigma,
        )
        self.schedule = EvolutionSchedule(cfg.zeta0, cfg.total_steps, cfg.mask_interval, self.mode.grow_mode)
        if self.mode.dynamic_buffer:
            self.buffer = DynamicBuffer(
                sd, ad, cfg.buffer_min, cfg.buffer_max, cfg.distance_threshold,
                cfg.shrink_ratio, cfg.buffer_interval, cfg.old_batch,
            )
        else:
            self.buffer = DynamicBuffer(sd, ad, cfg.buffer_max, cfg.buffer_max, check_interval=cfg.buffer_interval)
        self.critic_updates = 0
        self.actor_updates = 0
        self.last_distance = float("nan")
        self.capacity_log = []
        self.train_flops = 0.0
        self._refresh_flops()

    target_names = ("critic1", "critic2")

    def _refresh_flops(self) -> None:
        a_f = accounting.forward_flops(self.nets["actor"])
        c_f = accounting.forward_flops(self.nets["critic1"])
        b = self.cfg.batch_size
        self._critic_iter_flops = accounting.critic_update_flops(self.algorithm, a_f, c_f, b)
        self._actor_iter_flops = accounting.actor_update_flops(self.algorithm, a_f, c_f, b)

    # policies --------------------------------------------------------------
    def act_deterministic(self, obs) -> np.ndarray:
        raise NotImplementedError

    def act_explore(self, obs) -> np.ndarray:
        raise NotImplementedError

    def policy_for_distance(self, states) -> np.ndarray:
        return self.act_deterministic(states)

    # updates ---------------------------------------------------------------
    def _check(self, value, what, step):
        if not np.all(np.isfinite(value)):
            raise TrainingDiverged(
                f"non-finite {what} at step {step}",
                {"step": step, "what": what, "critic_updates": self.critic_updates,
                 "actor_updates": self.actor_updates, "buffer_size": len(self.buffer)},
            )

    def critic_targets(self, batch, step) -> np.ndarray:
        raise NotImplementedError

    def update_critics(self, batch, step) -> dict:
        y = self.critic_targets(batch, step)
        self._check(y, "critic target", step)
        x = np.hstack([batch.states, batch.actions])
        b = len(batch)
        grads = {}
        for name in ("critic1", "critic2"):
            net = self.nets[name]
            q, cache = net.forward(x)
            diff = q[:, 0] - y
            loss = float(np.mean(diff**2))
            self._check(loss, f"{name} loss", step)
            g = net.backward(cache, (2.0 / b) * diff[:, None])
            try:
                adam_step(net, g, self.opts[name])
            except DivergenceError as exc:
                raise TrainingDiverged(str(exc), {"step": step, "network": name}) from exc
            grads[name] = g
        self.critic_updates += 1
        self.train_flops += self._critic_iter_flops
        return grads

    def update_actor(self, batch, step):
        raise NotImplementedError

    def evolve(self, names, grads, step) -> None:
        if self.mode.grow_mode == "frozen":
            return
        fraction = anneal_fraction(min(step, self.schedule.total_steps), self.schedule)
        for name in names:
            net = self.nets[name]
            for layer, g in zip(net.layers, grads[name].weights):
                evolve_topology(layer, g, fraction, self.mode.grow_mode, self.rng_evo)
            self.opts[name].apply_masks(net)
        self._refresh_flops()

    def update_targets(self) -> None:
        for name, target in self.targets.items():
            polyak_update(target, self.nets[name], self.cfg.tau)

    # loop ------------------------------------------------------------------
    def train_step(self, step) -> None:
        """One gradient iteration at global env step ``step`` (post-warmup)."""
        raise NotImplementedError

    def run(self) -> TrainResult:
        cfg = self.cfg
        env = self.env
        eval_env = self.eval_env if self.eval_env is not None else copy.deepcopy(env)
        obs = env.reset(self.rng_env)
        episode, ep_step = 0, 0
        evaluations, metrics = [], []
        for t in range(1, cfg.total_steps + 1):
            if t <= cfg.warmup:
                action = self.rng_act.uniform(-1.0, 1.0, size=self.spec.action_dim)
            else:
                action = self.act_explore(obs)
            next_obs, reward, done, truncated = env.step(self.spec.scale_action(action))
            self.buffer.push(obs, action, reward, next_obs, done, episode, ep_step)
            ep_step += 1
            obs = next_obs
            if done or truncated:
                obs = env.reset(self.rng_env)
                episode += 1
                ep_step = 0

            if self.mode.dynamic_buffer and t % self.buffer.check_interval == 0:
                record = self.buffer.adjust_capacity(self.policy_for_distance, t)
                if record.distance is not None:
                    self.last_distance = record.distance
                self.capacity_log.append(record)

            if t > cfg.warmup:
                self.train_step(t)

            if t % cfg.eval_interval == 0:
                score = evaluate(self.act_deterministic, eval_env, cfg.eval_episodes, self.rng_eval)
                evaluations.append((t, score))
                metrics.append(self.metric_row(t, score))

        report = accounting.flops_report(
            self.algorithm, self.nets["actor"], self.nets["critic1"], cfg.batch_size, cfg.d,
            train_iters=cfg.total_steps - cfg.warmup,
            dense_actor=self._dense_reference("actor"), dense_critic=self._dense_reference("critic1"),
        )
        return TrainResult(
            evaluations=evaluations,
            final_score=final_score(evaluations),
            flops=report,
            masks={name: [layer.mask.copy() for layer in net.layers] for name, net in self.nets.items()},
            networks={**self.nets, **{f"target_{k}": v for k, v in self.targets.items()}},
            metrics=metrics,
            env_steps=cfg.total_steps,
            critic_updates=self.critic_updates,
            actor_updates=self.actor_updates,
            buffer_drops=self.buffer.total_dropped,
            capacity_log=self.capacity_log,
        )

    def _dense_reference(self, name):
        sd, ad = self.spec.state_dim, self.spec.action_dim
        dims = actor_dims(self.cfg, sd, ad) if name == "actor" else critic_dims(self.cfg, sd, ad)
        return init_network(dims, [0.0] * (len(dims) - 1), "identity", 0)

    def metric_row(self, step, score) -> dict:
        return {
            "step": step,
            "eval_return": score,
            "buffer_size": len(self.buffer),
            "policy_distance": self.last_distance,
            "drops": self.buffer.total_dropped,
            "actor_active": self.nets["actor"].active_count(),
            "critic_active": self.nets["critic1"].active_count(),
            "train_flops_cum": self.train_flops,
        }


class TD3Trainer(_Trainer):
    algorithm = "td3"
    target_names = ("actor", "critic1", "critic2")

    def act_deterministic(self, obs) -> np.ndarray:
        return self.nets["actor"](obs)

    def act_explore(self, obs) -> np.ndarray:
        a = self.nets["actor"](obs)
        noise = self.rng_act.normal(0.0, self.cfg.exploration_sigma, size=a.shape)
        return np.clip(a + noise, -1.0, 1.0)

    def critic_targets(self, batch, step) -> np.ndarray:
        critics = [_critic_fn(self.targets["critic1"]), _critic_fn(self.targets["critic2"])]
        return td3_target(batch, self.targets["actor"], critics, self.tcfg, self.rng_sample)

    def update_actor(self, batch, step):
        actor, critic = self.nets["actor"], self.nets["critic1"]
        s = batch.states
        b = len(s)
        a, a_cache = actor.forward(s)
        q, q_cache = critic.forward(np.hstack([s, a]))
        self._check(q, "actor loss", step)
        dq = critic.backward(q_cache, np.full((b, 1), -1.0 / b), weight_grads=False)
        g = actor.backward(a_cache, dq.inputs[:, s.shape[1]:])
        try:
            adam_step(actor, g, self.opts["actor"])
        except DivergenceError as exc:
            raise TrainingDiverged(str(exc), {"step": step, "network": "actor"}) from exc
        self.actor_updates += 1
        self.train_flops += self._actor_iter_flops
        return g

    def train_step(self, step) -> None:
        cfg = self.cfg
        u = step - cfg.warmup
        n = effective_n_step(self.tcfg, step)
        batch = self.buffer.sample_nstep(cfg.batch_size, n, self.rng_sample)
        grads = self.update_critics(batch, step)
        if u % cfg.mask_interval == 0:
            self.evolve(("critic1", "critic2"), grads, step)
        if u % cfg.d == 0:
            g = self.update_actor(batch, step)
            if self.actor_updates % cfg.mask_interval == 0:
                self.evolve(("actor",), {"actor": g}, step)
            self.update_targets()


class GaussianPolicy:
    """Tanh-squashed diagonal Gaussian on top of a ``gaussian``-head :class:`Mlp`."""

    def __init__(self, net: Mlp, action_dim: int):
        self.net = net
        self.action_dim = action_dim

    def split(self, out):
        ad = self.action_dim
        mean = out[..., :ad]
        raw = out[..., ad:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)

    def deterministic(self, states) -> np.ndarray:
        mean, _, _ = self.split(self.net(states))
        return np.tanh(mean)

    @staticmethod
    def log_prob(eps, log_std, u) -> np.ndarray:
        gauss = -0.5 * eps**2 - log_std - 0.5 * math.log(2.0 * math.pi)
        # log(1 - tanh(u)^2) in a stable form
        squash = 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))
        return (gauss - squash).sum(axis=-1)

    def sample(self, states, rng, return_cache=False):
        out, cache = self.net.forward(states)
        mean, log_std, free = self.split(out)
        eps = rng.standard_normal(mean.shape)
        std = np.exp(log_std)
        u = mean + std * eps
        a = np.tanh(u)
        logp = self.log_prob(eps, log_std, u)
        if return_cache:
            return a, logp, (cache, eps, std, a, free)
        return a, logp

    def __call__(self, states, rng):
        return self.sample(states, rng)

    def backward(self, sample_cache, d_action, d_logp) -> object:
        """Gradient of a loss given ``dL/da`` and ``dL/dlogp`` for each sampled row."""
        cache, eps, std, a, free = sample_cache
        d_u = d_action * (1.0 - a**2) + d_logp[:, None] * 2.0 * a
        d_mean = d_u
        d_log_std = (d_u * std * eps - d_logp[:, None]) * free
        return self.net.backward(cache, np.concatenate([d_mean, d_log_std], axis=-1))


class SACTrainer(_Trainer):
    algorithm = "sac"
    target_names = ("critic1", "critic2")

    def __init__(self, cfg: TrainConfig, env, rng=None, masks=None, eval_env=None):
        super().__init__(cfg, env, rng, masks, eval_env)
        ad = self.spec.action_dim
        self.policy = GaussianPolicy(self.nets["actor"], ad)
        self.entropy_target = -float(ad) if cfg.entropy_target is None else float(cfg.entropy_target)
        self.log_alpha = Adam(np.array(math.log(cfg.initial_alpha)), cfg.learning_rate)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value))

    def act_deterministic(self, obs) -> np.ndarray:
        return self.policy.deterministic(obs)

    def act_explore(self, obs) -> np.ndarray:
        a, _ = self.policy.sample(obs[None, :], self.rng_act)
        return a[0]

    def critic_targets(self, batch, step) -> np.ndarray:
        critics = [_critic_fn(self.targets["critic1"]), _critic_fn(self.targets["critic2"])]
        return sac_target(batch, critics, self.policy, self.alpha, self.tcfg, self.rng_sample)

    def update_actor(self, batch, step):
        s = batch.states
        b = len(s)
        alpha = self.alpha
        a, logp, sc = self.policy.sample(s, self.rng_sample, return_cache=True)
        x = np.hstack([s, a])
        q1, c1 = self.nets["critic1"].forward(x)
        q2, c2 = self.nets["critic2"].forward(x)
        self._check(q1, "actor loss", step)
        pick1 = (q1[:, 0] <= q2[:, 0])[:, None]
        sd = s.shape[1]
        d1 = self.nets["critic1"].backward(c1, np.where(pick1, -1.0 / b, 0.0), weight_grads=False)
        d2 = self.nets["critic2"].backward(c2, np.where(pick1, 0.0, -1.0 / b), weight_grads=False)
        d_action = d1.inputs[:, sd:] + d2.inputs[:, sd:]
        g = self.policy.backward(sc, d_action, np.full(b, alpha / b))
        try:
            adam_step(self.nets["actor"], g, self.opts["actor"])
        except DivergenceError as exc:
            raise TrainingDiverged(str(exc), {"step": step, "network": "actor"}) from exc
        self.actor_updates += 1
        self.train_flops += self._actor_iter_flops
        return g, logp

    def update_temperature(self, logp) -> None:
        # J(alpha) = mean(-alpha * logp - alpha * H), differentiated w.r.t. log(alpha)
        grad = self.alpha * (-float(np.mean(logp)) - self.entropy_target)
        self.log_alpha.update(grad)

    def train_step(self, step) -> None:
        cfg = self.cfg
        u = step - cfg.warmup
        n = effective_n_step(self.tcfg, step)
        batch = self.buffer.sample_nstep(cfg.batch_size, n, self.rng_sample)
        grads = self.update_critics(batch, step)
        if u % cfg.mask_interval == 0:
            self.evolve(("critic1", "critic2"), grads, step)
        if u % cfg.d == 0:
            g, logp = self.update_actor(batch, step)
            if self.actor_updates % cfg.mask_interval == 0:
                self.evolve(("actor",), {"actor": g}, step)
            self.update_temperature(logp)
        self.update_targets()


def train_td3(cfg: TrainConfig, env, rng=None, masks=None, eval_env=None) -> TrainResult:
    return TD3Trainer(cfg, env, rng, masks, eval_env).run()


def train_sac(cfg: TrainConfig, env, rng=None, masks=None, eval_env=None) -> TrainResult:
    return SACTrainer(cfg, env, rng, masks, eval_env).run()


def train(cfg: TrainConfig, env, rng=None, masks=None, eval_env=None) -> TrainResult:
    fn = train_td3 if cfg.algorithm == "td3" else train_sac
    return fn(cfg, env, rng, masks, eval_env)


# ---------------------------------------------------------------------------
# ultimate compression


@dataclass
class CompressionResult:
    sparsity: float | None
    dense_score: float
    table: list  # (sparsity, score, passes)


def within_tolerance(score, dense_score, tolerance=0.03) -> bool:
    """``score`` is no more than ``tolerance`` (relative to |dense|) below the dense score."""
    return score >= dense_score - tolerance * abs(dense_score)


def ultimate_compression_search(grid, dense_score, score_fn, tolerance=0.03) -> CompressionResult:
    """Scan sparsities from sparsest down; return the first whose score stays within tolerance.

    ``score_fn(sparsity)`` returns the mean final score at that sparsity. Every
    grid point is scored so the returned table is complete.
    """
    table = []
    chosen = None
    for s in sorted(grid, reverse=True):
        score = float(score_fn(s))
        ok = within_tolerance(score, dense_score, tolerance)
        table.append((s, score, ok))
        if ok and chosen is None:
            chosen = s
    return CompressionResult(chosen, dense_score, table)
