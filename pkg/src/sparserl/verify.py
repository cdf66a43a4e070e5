"""Built-in oracle suites: gradients, TD-error decomposition, FLOPs, sparsity conservation.

Each suite returns a :class:`SuiteResult` with the worst measured error so a
run can be audited from its printed report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from .net import init_network
from .sparsity import evolve_topology
from .targets import decompose_td_error, random_mdp


@dataclass
class SuiteResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    cases: int
    seconds: float = 0.0
    notes: list = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"[{status}] {self.name}: {self.cases} cases, worst error {self.measured:.3g} (tol {self.tolerance:g}), {self.seconds:.2f}s"
        if self.notes:
            text += " - " + "; ".join(self.notes)
        return text


def random_masked_net(rng, max_layers=3, max_width=8, head=None):
    depth = int(rng.integers(1, max_layers + 1))
    dims = [int(d) for d in rng.integers(1, max_width + 1, size=depth + 1)]
    sparsity = [float(s) for s in rng.uniform(0.0, 0.9, size=depth)]
    head = head or ("identity", "tanh")[int(rng.integers(2))]
    return init_network(dims, sparsity, head, rng)


def _loss_and_grad(net, x, target):
    y, cache = net.forward(x)
    r = y - target
    return 0.5 * float(np.sum(r * r)), cache, r


def gradient_check(net, x, target, h=1e-5):
    """Worst relative error between :meth:`Mlp.backward` and central differences.

    Inactive positions are probed by unmasking that single position at its
    current value (zero), exactly the quantity the grow criterion uses.
    """
    _, cache, r = _loss_and_grad(net, x, target)
    grad = net.backward(cache, r)
    worst = 0.0
    for layer, g in zip(net.layers, grad.weights):
        for idx in np.ndindex(layer.weights.shape):
            saved_w, saved_m = layer.weights[idx], layer.mask[idx]
            layer.mask[idx] = 1.0
            layer.weights[idx] = saved_w + h
            lp = _loss_and_grad(net, x, target)[0]
            layer.weights[idx] = saved_w - h
            lm = _loss_and_grad(net, x, target)[0]
            layer.weights[idx], layer.mask[idx] = saved_w, saved_m
            fd = (lp - lm) / (2 * h)
            worst = max(worst, _rel_err(g[idx], fd))
    for layer, g in zip(net.layers, grad.biases):
        for i in range(layer.out_dim):
            saved = layer.bias[i]
            layer.bias[i] = saved + h
            lp = _loss_and_grad(net, x, target)[0]
            layer.bias[i] = saved - h
            lm = _loss_and_grad(net, x, target)[0]
            layer.bias[i] = saved
            worst = max(worst, _rel_err(g[i], (lp - lm) / (2 * h)))
    return worst


def _rel_err(a, b, floor=1e-6):
    # relative error with an absolute floor so exact zeros compare cleanly
    return abs(a - b) / max(abs(a), abs(b), floor)


def suite_gradient(seed=0, nets=50, tol=1e-4) -> SuiteResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(nets):
        net = random_masked_net(rng)
        x = rng.normal(size=net.in_dim)
        target = rng.normal(size=net.out_dim)
        worst = max(worst, gradient_check(net, x, target))
    return SuiteResult("gradient", worst < tol, worst, tol, nets, time.perf_counter() - t0)


def suite_decomposition(seed=0, mdps=100, tol=1e-12) -> SuiteResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    policy_zero = True
    cases = 0
    for _ in range(mdps):
        mdp = random_mdp(rng)
        same = random_mdp(rng, same_policies=True)
        s, a = int(rng.integers(mdp.n_states)), int(rng.integers(mdp.n_actions))
        for n in (1, 2, 3):
            total, pol, fit = decompose_td_error(mdp, n, s, a)
            worst = max(worst, abs(total - (pol + fit)))
            _, pol_same, _ = decompose_td_error(same, n, s, a)
            policy_zero &= pol_same == 0.0
            cases += 2
    notes = [] if policy_zero else ["policy term nonzero with identical policies"]
    return SuiteResult("decomposition", worst < tol and policy_zero, worst, tol, cases, time.perf_counter() - t0, notes)


def suite_flops(seed=0, nets=50) -> SuiteResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(nets):
        net = random_masked_net(rng, max_layers=3, max_width=16)
        worst = max(worst, abs(accounting.counted_forward_flops(net) - accounting.forward_flops(net)))
    coeff = 0.0
    for alg, d, (ca, cc) in (("td3", 2, (2.5, 8.5)), ("sac", 1, (5.0, 10.0))):
        coeff = max(coeff, abs(accounting.training_flops_per_iter(alg, 1.0, 0.0, 1, d) - ca))
        coeff = max(coeff, abs(accounting.training_flops_per_iter(alg, 0.0, 1.0, 1, d) - cc))
    notes = [] if coeff == 0.0 else [f"table coefficient error {coeff:g}"]
    return SuiteResult("flops", worst == 0 and coeff == 0.0, float(worst), 0.0, nets + 4, time.perf_counter() - t0, notes)


def suite_conservation(seed=0, calls=10_000, inject_fault=False) -> SuiteResult:
    """Fuzz :func:`evolve_topology`; ``inject_fault`` flips one mask bit after a call."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    failures = 0
    for i in range(calls):
        rows, cols = (int(v) for v in rng.integers(1, 12, size=2))
        s = float(rng.uniform(0.0, 1.0))
        layer = init_network([cols, rows], [s], "identity", rng).layers[0]
        grad = rng.normal(size=layer.weights.shape)
        if rng.random() < 0.2:
            grad = np.round(grad)  # plenty of ties
        before_mask = layer.mask.copy()
        before = layer.active_count
        mode = ("gradient", "random")[int(rng.integers(2))]
        rec = evolve_topology(layer, grad, float(rng.uniform(0.0, 1.0)), mode, rng)
        if inject_fault and i == calls // 2:
            layer.mask.flat[0] = 1.0 - layer.mask.flat[0]
        ok = layer.active_count == before
        ok &= np.intersect1d(rec.dropped, rec.grown).size == 0
        ok &= not np.any(layer.weights[layer.mask == 0])
        ok &= np.all(before_mask.flat[rec.dropped] == 1) and np.all(before_mask.flat[rec.grown] == 0)
        failures += not ok
    return SuiteResult("conservation", failures == 0, float(failures), 0.0, calls, time.perf_counter() - t0)


SUITES = {
    "gradient": suite_gradient,
    "decomposition": suite_decomposition,
    "flops": suite_flops,
    "conservation": suite_conservation,
}


def run_suites(names=None, seed=0, inject_fault=False) -> list:
    names = list(SUITES) if not names else list(names)
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
        if name == "conservation":
            results.append(suite_conservation(seed, inject_fault=inject_fault))
        else:
            results.append(SUITES[name](seed))
    return results
