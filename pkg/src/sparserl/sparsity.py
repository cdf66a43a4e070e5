"""Layer sparsity allocation, update-fraction annealing and drop/grow evolution."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GROW_MODES = ("gradient", "random", "frozen")


@dataclass(frozen=True)
class EvolutionSchedule:
    initial_fraction: float = 0.5
    total_steps: int = 1_000_000
    mask_update_interval: int = 10_000
    grow_mode: str = "gradient"

    def __post_init__(self):
        if not 0.0 < self.initial_fraction <= 1.0:
            raise ValueError(f"initial_fraction {self.initial_fraction} outside (0, 1]")
        if self.total_steps < 1 or self.mask_update_interval < 1:
            raise ValueError("total_steps and mask_update_interval must be positive")
        if self.grow_mode not in GROW_MODES:
            raise ValueError(f"grow_mode must be one of {GROW_MODES}")


def anneal_fraction(t, sched: EvolutionSchedule) -> float:
    """Cosine-annealed update fraction ``zeta_0 / 2 * (1 + cos(pi t / T_end))``."""
    if not 0 <= t <= sched.total_steps:
        raise ValueError(f"step {t} outside [0, {sched.total_steps}]")
    return sched.initial_fraction / 2.0 * (1.0 + math.cos(math.pi * t / sched.total_steps))


@dataclass
class SparsityAllocation:
    global_sparsity: float
    per_layer: list
    scale_constant: float

    def active_counts(self, layer_dims) -> list:
        """Integer active counts per layer summing to ``round((1 - S) sum N)``.

        Each layer gets the floor of its real-valued share; leftover connections
        go to the largest fractional remainders (ties to the earlier layer).
        """
        sizes = [i * o for i, o in layer_dims]
        shares = [(1.0 - s) * n for s, n in zip(self.per_layer, sizes)]
        counts = [min(int(np.floor(v + 1e-9)), n) for v, n in zip(shares, sizes)]
        total = int(round((1.0 - self.global_sparsity) * sum(sizes)))
        order = sorted(range(len(sizes)), key=lambda l: (-(shares[l] - counts[l]), l))
        for l in order:
            if sum(counts) >= total:
                break
            if counts[l] < sizes[l]:
                counts[l] += 1
        return counts

    def exact_sparsities(self, layer_dims) -> list:
        """Per-layer sparsity that reproduces :meth:`active_counts` exactly."""
        counts = self.active_counts(layer_dims)
        return [1.0 - c / (i * o) for c, (i, o) in zip(counts, layer_dims)]


def er_allocate(global_sparsity, layer_dims) -> SparsityAllocation:
    """Erdős–Rényi per-layer sparsity for a target global sparsity.

    Layer density is ``k (I + O) / (I O)`` with ``k`` chosen so the active
    total matches ``(1 - S) sum(I O)``. Layers whose density would exceed 1 are
    made dense and the remaining budget is re-solved over the other layers.
    """
    layer_dims = [(int(i), int(o)) for i, o in layer_dims]
    if not layer_dims:
        raise ValueError("need at least one layer")
    if not 0.0 <= global_sparsity < 1.0:
        raise ValueError(f"global sparsity {global_sparsity} outside [0, 1)")
    sizes = [i * o for i, o in layer_dims]
    budget = (1.0 - global_sparsity) * sum(sizes)
    dense = set()
    k = 0.0
    while True:
        free = [l for l in range(len(layer_dims)) if l not in dense]
        if not free:
            break
        remaining = budget - sum(sizes[l] for l in dense)
        k = remaining / sum(layer_dims[l][0] + layer_dims[l][1] for l in free)
        over = [l for l in free if k * sum(layer_dims[l]) / sizes[l] > 1.0]
        if not over:
            break
        dense.update(over)
    per_layer = []
    for l, (i, o) in enumerate(layer_dims):
        density = 1.0 if l in dense else k * (i + o) / (i * o)
        per_layer.append(min(1.0, max(0.0, 1.0 - density)))
    return SparsityAllocation(float(global_sparsity), per_layer, float(k))


@dataclass
class EvolutionRecord:
    dropped: np.ndarray
    grown: np.ndarray


def _stable_topk(keys: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    # ascending by key, ties by ascending flat index
    order = np.lexsort((idx, keys))
    return idx[order[:k]]


def evolve_topology(layer, dense_grad, fraction, grow_mode="gradient", rng=None) -> EvolutionRecord:
    """Drop the smallest active weights and regrow as many inactive positions, in place.

    ``grow_mode='gradient'`` regrows by largest ``|dense_grad|`` (RigL), ``'random'``
    regrows uniformly (SET) and ``'frozen'`` leaves the layer alone. Positions
    dropped in this call are never regrown in the same call, and regrown
    weights start at zero.
    """
    if grow_mode not in GROW_MODES:
        raise ValueError(f"grow_mode must be one of {GROW_MODES}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside [0, 1]")
    empty = EvolutionRecord(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    if grow_mode == "frozen":
        return empty
    dense_grad = np.asarray(dense_grad)
    if dense_grad.shape != layer.weights.shape:
        raise ValueError(f"gradient shape {dense_grad.shape} != layer shape {layer.weights.shape}")

    shape = layer.weights.shape
    mask = layer.mask.reshape(-1).copy()
    weights = layer.weights.reshape(-1).copy()
    active = np.flatnonzero(mask)
    inactive = np.flatnonzero(mask == 0)
    k = math.floor(fraction * (1.0 - layer.target_sparsity) * layer.size + 1e-9)
    k = min(k, active.size, inactive.size)
    if k <= 0:
        return empty

    dropped = _stable_topk(np.abs(weights[active]), active, k)
    if grow_mode == "gradient":
        grown = _stable_topk(-np.abs(dense_grad.reshape(-1)[inactive]), inactive, k)
    else:
        if rng is None:
            raise ValueError("random growth needs an rng")
        grown = np.sort(rng.choice(inactive, size=k, replace=False))

    mask[dropped] = 0.0
    mask[grown] = 1.0
    weights[dropped] = 0.0
    weights[grown] = 0.0
    layer.mask = mask.reshape(shape)
    layer.weights = weights.reshape(shape)
    return EvolutionRecord(np.sort(dropped), grown)
