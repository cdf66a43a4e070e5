import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparserl import accounting as acc
from sparserl.net import MaskedLinear, Mlp, init_network
from sparserl.verify import random_masked_net


def net_with_masks(*masks):
    layers = []
    for m in masks:
        m = np.asarray(m, dtype=float)
        layers.append(MaskedLinear(np.ones(m.shape) * m, m, np.zeros(m.shape[0]), 1 - m.mean()))
    return Mlp(layers)


class TestModelSize:
    def test_dense(self):
        assert acc.model_size(init_network([3, 4, 1], [0, 0], rng_seed=0)) == 16

    def test_half_density(self):
        assert acc.model_size(init_network([3, 4, 1], [0.5, 0.5], rng_seed=0)) == 8

    def test_empty(self):
        assert acc.model_size(init_network([3, 4, 1], [1, 1], rng_seed=0)) == 0


class TestForwardFlops:
    def test_dense_layer(self):
        assert acc.forward_flops(net_with_masks(np.ones((2, 3)))) == 10

    def test_half_density_formula(self):
        net = net_with_masks([[1, 0, 1], [0, 1, 0]])
        assert acc.density_scaled_flops(net) == pytest.approx(5.0)
        # per-row literal count: (2*2-1) + (2*1-1) = 4
        assert acc.forward_flops(net) == 4

    def test_formula_and_count_agree_when_rows_are_full_or_empty(self):
        net = net_with_masks([[1, 1, 1], [0, 0, 0]])
        assert acc.forward_flops(net) == 5 == acc.density_scaled_flops(net)

    def test_single_input_layer(self):
        assert acc.forward_flops(net_with_masks(np.ones((7, 1)))) == 7

    def test_density_formula_upper_bounds_count(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            net = random_masked_net(rng, max_width=12)
            assert acc.forward_flops(net) <= acc.density_scaled_flops(net) + 1e-9

    @pytest.mark.parametrize("seed", range(20))
    def test_instrumented_count(self, seed):
        rng = np.random.default_rng(seed)
        net = random_masked_net(rng, max_width=16)
        x = rng.normal(size=net.in_dim)
        assert acc.counted_forward_flops(net, x) == acc.forward_flops(net)


class TestTrainingFlops:
    def test_td3_example(self):
        assert acc.training_flops_per_iter("td3", 100, 200, 256, 2) == 499200

    def test_sac_example(self):
        assert acc.training_flops_per_iter("sac", 100, 200, 256, 1) == 640000

    def test_zero_batch(self):
        assert acc.training_flops_per_iter("td3", 100, 200, 0, 2) == 0

    def test_table_coefficients(self):
        assert acc.training_flops_per_iter("td3", 1.0, 0.0, 1, 2) == 2.5
        assert acc.training_flops_per_iter("td3", 0.0, 1.0, 1, 2) == 8.5
        assert acc.training_flops_per_iter("sac", 1.0, 0.0, 1, 1) == 5.0
        assert acc.training_flops_per_iter("sac", 0.0, 1.0, 1, 1) == 10.0

    def test_split_sums_to_iteration(self):
        for alg, d in (("td3", 2), ("sac", 1), ("td3", 3)):
            whole = acc.training_flops_per_iter(alg, 37, 91, 8, d)
            parts = acc.critic_update_flops(alg, 37, 91, 8) + acc.actor_update_flops(alg, 37, 91, 8) / d
            assert whole == pytest.approx(parts, rel=1e-15)

    def test_errors(self):
        with pytest.raises(ValueError):
            acc.training_flops_per_iter("td3", 1, 1, 1, 0)
        with pytest.raises(ValueError):
            acc.training_flops_per_iter("ddpg", 1, 1, 1, 1)


class TestTotalSize:
    def test_examples(self):
        assert acc.total_model_size("td3", 10, 20) == 100
        assert acc.total_model_size("sac", 10, 20) == 90
        assert acc.total_model_size("td3", 0, 0) == 0

    def test_constructed_td3_nets(self):
        actor = init_network([3, 8, 1], [0.5, 0.0], rng_seed=0)
        critic = init_network([4, 8, 1], [0.75, 0.0], rng_seed=1)
        rep = acc.flops_report("td3", actor, critic, 256, 2)
        assert rep.total_size == 2 * (12 + 8) + 4 * (8 + 8)
        assert rep.dense_total_size == 2 * 32 + 4 * 40


class TestReport:
    def test_dense_ratios_are_one(self):
        actor = init_network([3, 16, 16, 1], [0, 0, 0], rng_seed=0)
        critic = init_network([4, 16, 16, 1], [0, 0, 0], rng_seed=0)
        rep = acc.flops_report("td3", actor, critic, 256, 2, train_iters=10)
        assert rep.size_ratio == rep.train_flops_ratio == rep.inference_flops_ratio == 1.0
        assert rep.train_flops_total == 10 * rep.train_flops_per_iter
        assert set(rep.to_dict()) >= {"size_ratio", "train_flops_ratio", "inference_flops_ratio"}

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 1000), layer=st.integers(0, 2), extra=st.floats(0.05, 0.5))
    def test_monotone_in_sparsity(self, seed, layer, extra):
        base = [0.3, 0.4, 0.2]
        raised = list(base)
        raised[layer] = min(1.0, raised[layer] + extra)

        def report(sp):
            actor = init_network([3, 12, 12, 1], sp, rng_seed=seed)
            critic = init_network([4, 12, 12, 1], sp, rng_seed=seed + 1)
            return acc.flops_report("sac", actor, critic, 64, 1).to_dict()

        lo, hi = report(raised), report(base)
        for key in ("actor_size", "critic_size", "total_size", "train_flops_per_iter", "inference_flops"):
            assert lo[key] <= hi[key]
        assert all(v >= 0 for v in lo.values() if isinstance(v, (int, float)))
