import math

import numpy as np
import pytest

from sparserl import accounting
from sparserl.agents import (
    GaussianPolicy,
    SACTrainer,
    TD3Trainer,
    TrainingDiverged,
    actor_dims,
    build_networks,
    critic_dims,
    evaluate,
    final_score,
    sparse_budget,
    tiny_dense_width,
    train,
    ultimate_compression_search,
    within_tolerance,
)
from sparserl.config import TrainConfig
from sparserl.envs import ConstantReward, make_env
from sparserl.net import init_network

from oracles import mlp_params, oracle_td3


def small_cfg(**kw):
    base = dict(
        hidden=(8, 8), batch_size=8, warmup=40, total_steps=120, mask_interval=10, buffer_interval=20,
        buffer_min=30, buffer_max=1000, distance_batch=16, multi_step_delay=60, eval_interval=40,
        eval_episodes=1, env="constant",
    )
    base.update(kw)
    return TrainConfig(**base)


def short_env(seed=0, **kw):
    kw.setdefault("episode_steps", 25)
    return ConstantReward(seed, **kw)


class TestDenseReduction:
    def test_two_td3_iterations_match_oracle(self):
        cfg = small_cfg(topology="static_sparse", hidden=(6, 5), batch_size=4, smoothing_sigma=0.0,
                        learning_rate=1e-2, multi_step_delay=10**6, mask_interval=1000)
        trainer = TD3Trainer(cfg, short_env())
        params = {k: mlp_params(v) for k, v in trainer.nets.items()}
        transition = (np.array([0.7]), np.array([0.3]), 1.0, np.array([0.7]))
        trainer.buffer.push(transition[0], transition[1], transition[2], transition[3], False, 0, 0)
        trainer.train_step(cfg.warmup + 1)
        trainer.train_step(cfg.warmup + 2)

        online, target = oracle_td3(params, transition, cfg, 2)
        for name in ("actor", "critic1", "critic2"):
            for layer, (w, b) in zip(trainer.nets[name].layers, online[name]):
                np.testing.assert_allclose(layer.weights, w, rtol=0, atol=1e-10)
                np.testing.assert_allclose(layer.bias, b, rtol=0, atol=1e-10)
            for layer, (w, b) in zip(trainer.targets[name].layers, target[name]):
                np.testing.assert_allclose(layer.weights, w, rtol=0, atol=1e-10)
                np.testing.assert_allclose(layer.bias, b, rtol=0, atol=1e-10)
        # the update really moved the weights
        assert not np.allclose(params["critic1"][0][0], online["critic1"][0][0])
        assert trainer.critic_updates == 2 and trainer.actor_updates == 1

    def test_dense_frozen_masks_stay_full(self):
        cfg = small_cfg(topology="static_sparse")
        result = train(cfg, short_env())
        for masks in result.masks.values():
            assert all(np.all(m == 1) for m in masks)


class TestStepAccounting:
    @pytest.mark.parametrize("algo, d", [("td3", 2), ("sac", 1), ("td3", 3)])
    def test_update_counts(self, algo, d):
        cfg = small_cfg(algorithm=algo, actor_interval=d, actor_sparsity=0.5, critic_sparsity=0.5)
        result = train(cfg, short_env())
        assert result.critic_updates == cfg.total_steps - cfg.warmup
        assert result.actor_updates == (cfg.total_steps - cfg.warmup) // d
        assert result.env_steps == cfg.total_steps
        assert [s for s, _ in result.evaluations] == [40, 80, 120]

    def test_train_flops_accumulate(self):
        cfg = small_cfg(topology="static_sparse", actor_sparsity=0.5, critic_sparsity=0.5)
        result = train(cfg, short_env())
        per_iter = result.flops.train_flops_per_iter
        assert result.metrics[-1]["train_flops_cum"] == pytest.approx(per_iter * 80, rel=1e-12)


class TestMasks:
    @pytest.mark.parametrize("algo", ["td3", "sac"])
    def test_targets_inherit_online_masks(self, algo):
        cfg = small_cfg(algorithm=algo, actor_sparsity=0.8, critic_sparsity=0.7, mask_interval=5)
        trainer = (TD3Trainer if algo == "td3" else SACTrainer)(cfg, short_env(reward=-0.5))
        before = {k: [l.mask.copy() for l in v.layers] for k, v in trainer.nets.items()}
        trainer.run()
        changed = False
        for name, target in trainer.targets.items():
            online = trainer.nets[name]
            for lt, lo, m0 in zip(target.layers, online.layers, before[name]):
                assert not np.any(lt.weights[lo.mask == 0])
                assert np.array_equal(lt.mask, lo.mask)
                assert lo.active_count == int(m0.sum())
                changed |= not np.array_equal(lo.mask, m0)
        assert changed, "evolution never changed a mask"

    def test_static_sparse_never_changes(self):
        cfg = small_cfg(topology="static_sparse", actor_sparsity=0.6, critic_sparsity=0.6)
        trainer = TD3Trainer(cfg, short_env())
        before = {k: [l.mask.copy() for l in v.layers] for k, v in trainer.nets.items()}
        trainer.run()
        for name, net in trainer.nets.items():
            for layer, m in zip(net.layers, before[name]):
                assert np.array_equal(layer.mask, m)

    def test_er_allocation_applied(self):
        cfg = TrainConfig(hidden=(64, 64), actor_sparsity=0.9, critic_sparsity=0.85)
        nets = build_networks(cfg, 3, 1, np.random.default_rng(0))
        assert accounting.model_size(nets["actor"]) == round(0.1 * (3 * 64 + 64 * 64 + 64))
        assert accounting.model_size(nets["critic1"]) == round(0.15 * (4 * 64 + 64 * 64 + 64))

    def test_static_masks_are_applied(self):
        cfg = small_cfg(topology="static_mask", mask_dir="unused")
        dims = critic_dims(cfg, 1, 1)
        src = init_network(actor_dims(cfg, 1, 1), [0.5, 0.5, 0.0], rng_seed=3)
        crit = init_network(dims, [0.3, 0.3, 0.0], rng_seed=4)
        masks = {"actor": src.masks(), "critic1": crit.masks()}
        nets = build_networks(cfg, 1, 1, np.random.default_rng(0), masks)
        for name, ref in (("actor", src), ("critic1", crit), ("critic2", crit)):
            for layer, m in zip(nets[name].layers, ref.masks()):
                assert np.array_equal(layer.mask, m)
        with pytest.raises(ValueError):
            build_networks(cfg, 1, 1, np.random.default_rng(0), None)


class TestTinyDense:
    def test_width_is_largest_fitting(self):
        cfg = TrainConfig(topology="tiny_dense", actor_sparsity=0.9, critic_sparsity=0.85, hidden=(64, 64))
        w = tiny_dense_width(cfg, 3, 1)
        budget = sparse_budget(actor_dims(cfg, 3, 1), 0.9) + sparse_budget(critic_dims(cfg, 3, 1), 0.85)

        def dense_total(width):
            a = init_network(actor_dims(cfg, 3, 1, (width,) * 2), [0, 0, 0], rng_seed=0)
            c = init_network(critic_dims(cfg, 3, 1, (width,) * 2), [0, 0, 0], rng_seed=0)
            return accounting.model_size(a) + accounting.model_size(c)

        assert dense_total(w) <= budget < dense_total(w + 1)
        nets = build_networks(cfg, 3, 1, np.random.default_rng(0))
        assert nets["actor"].dims[1] == w and nets["actor"].active_count() == sum(l.size for l in nets["actor"].layers)


class TestSac:
    def test_alpha_stationary_at_entropy_target(self):
        cfg = small_cfg(algorithm="sac")
        trainer = SACTrainer(cfg, short_env())
        assert trainer.alpha == 1.0 and trainer.entropy_target == -1.0
        trainer.update_temperature(np.full(8, -trainer.entropy_target))
        assert trainer.alpha == 1.0

    def test_alpha_moves_the_right_way(self):
        trainer = SACTrainer(small_cfg(algorithm="sac"), short_env())
        trainer.update_temperature(np.full(8, 5.0))  # entropy -5 below target -1: raise alpha
        assert trainer.alpha > 1.0

    def test_default_nstep(self):
        assert TrainConfig(algorithm="sac").n == 2 and TrainConfig(algorithm="td3").n == 3

    def test_log_prob_matches_change_of_variables(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=(50, 2)) * 3
        log_std = rng.normal(size=(50, 2)) * 0.5
        eps = rng.normal(size=(50, 2))
        direct = (-0.5 * eps**2 - log_std - 0.5 * math.log(2 * math.pi) - np.log(1 - np.tanh(u) ** 2)).sum(-1)
        np.testing.assert_allclose(GaussianPolicy.log_prob(eps, log_std, u), direct, rtol=1e-9)

    def test_actor_gradient_finite_differences(self):
        rng = np.random.default_rng(1)
        net = init_network([3, 6, 2], [0.3, 0.0], "gaussian", rng)
        policy = GaussianPolicy(net, 1)
        critic = init_network([4, 7, 1], [0.0, 0.0], "identity", rng)
        s = rng.normal(size=(5, 3))
        alpha = 0.3

        def loss():
            a, logp = policy.sample(s, np.random.default_rng(9))
            q = critic(np.hstack([s, a]))[:, 0]
            return float(np.mean(alpha * logp - q))

        a, logp, cache = policy.sample(s, np.random.default_rng(9), return_cache=True)
        q, qc = critic.forward(np.hstack([s, a]))
        d_a = critic.backward(qc, np.full((5, 1), -1.0 / 5), weight_grads=False).inputs[:, 3:]
        g = policy.backward(cache, d_a, np.full(5, alpha / 5))
        h = 1e-6
        for layer, gw in zip(net.layers, g.weights):
            for idx in zip(*np.nonzero(layer.mask)):
                w0 = layer.weights[idx]
                layer.weights[idx] = w0 + h
                lp = loss()
                layer.weights[idx] = w0 - h
                lm = loss()
                layer.weights[idx] = w0
                assert gw[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-8)


class TestEvaluate:
    def test_constant_reward(self):
        env = ConstantReward(0, reward=1.0, episode_steps=200)
        assert evaluate(lambda s: np.zeros(1), env, 3, np.random.default_rng(0)) == 200.0

    def test_single_episode(self):
        env = make_env("pendulum", 0)
        rng = np.random.default_rng(5)
        one = evaluate(lambda s: np.zeros(1), env, 1, rng)
        env2 = make_env("pendulum", 0)
        obs = env2.reset(np.random.default_rng(5))
        total = 0.0
        for _ in range(200):
            obs, r, _, _ = env2.step([0.0])
            total += r
        assert one == total

    def test_repeatable(self):
        runs = [evaluate(lambda s: np.tanh(s[:1]), make_env("pendulum", 0), 2, np.random.default_rng(3)) for _ in range(2)]
        assert runs[0] == runs[1]

    def test_needs_an_episode(self):
        with pytest.raises(ValueError):
            evaluate(lambda s: s, short_env(), 0, np.random.default_rng(0))


class TestFinalScore:
    def test_last_thirty(self):
        evals = [(i, float(i)) for i in range(40)]
        assert final_score(evals) == np.mean(np.arange(10, 40))

    def test_fewer_than_window(self):
        assert final_score([(1, 2.0), (2, 4.0)]) == 3.0


class TestDeterminism:
    @pytest.mark.parametrize("algo", ["td3", "sac"])
    def test_same_seed_same_series(self, algo):
        cfg = small_cfg(algorithm=algo, env="pendulum", actor_sparsity=0.5, critic_sparsity=0.5,
                        total_steps=100, warmup=30, eval_interval=50)
        a = train(cfg, make_env("pendulum", 0))
        b = train(cfg, make_env("pendulum", 0))
        assert a.evaluations == b.evaluations
        assert a.metrics == b.metrics

    def test_different_seed_differs(self):
        cfg = small_cfg(env="pendulum", total_steps=100, warmup=30, eval_interval=50)
        a = train(cfg, make_env("pendulum", 0))
        b = train(cfg.replace(seed=1), make_env("pendulum", 0))
        assert a.evaluations != b.evaluations


def test_divergence_is_reported():
    cfg = small_cfg(topology="static_sparse")
    with pytest.raises(TrainingDiverged) as info:
        train(cfg, short_env(reward=float("nan")))
    assert info.value.state["step"] == cfg.warmup + 1


def test_dynamic_buffer_drops_old_data():
    cfg = small_cfg(total_steps=400, buffer_interval=20, buffer_min=30, distance_threshold=0.0)
    result = train(cfg, short_env())
    assert result.buffer_drops > 0
    assert all(r.size_after >= min(r.size_before, cfg.buffer_min) for r in result.capacity_log)


class TestCompressionSearch:
    def test_dense_only(self):
        assert ultimate_compression_search([0.0], 100.0, lambda s: 100.0).sparsity == 0.0

    def test_synthetic(self):
        scores = {0.9: 99.0, 0.95: 80.0}
        res = ultimate_compression_search([0.9, 0.95], 100.0, scores.get)
        assert res.sparsity == 0.9
        assert res.table == [(0.95, 80.0, False), (0.9, 99.0, True)]

    def test_none_found(self):
        assert ultimate_compression_search([0.5, 0.9], 100.0, lambda s: 50.0).sparsity is None

    def test_negative_returns_use_magnitude(self):
        assert within_tolerance(-154.0, -150.0)
        assert not within_tolerance(-155.0, -150.0)
