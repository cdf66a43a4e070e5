"""Analytic model-size and FLOPs figures for sparse actor-critic training.

Offsets (biases) are left out of every count. An output neuron with ``c``
active inputs costs ``c`` multiplies and ``c - 1`` additions, which for a
dense layer is the familiar ``(2 I - 1) O``; backward passes cost twice the
forward. Environment interaction, target updates, topology evolution and
buffer checks are not counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

ALGORITHMS = ("td3", "sac")


def model_size(net) -> int:
    """Number of active weights (biases excluded)."""
    return sum(layer.active_count for layer in net.layers)


def forward_flops(net) -> int:
    """Exact multiply-add count of one forward pass over the active connections."""
    total = 0
    for layer in net.layers:
        per_row = layer.mask.sum(axis=1).astype(np.int64)
        total += int(np.maximum(2 * per_row - 1, 0).sum())
    return total


def density_scaled_flops(net) -> float:
    """``sum_l (1 - S_l)(2 I_l - 1) O_l``: dense cost scaled by each layer's density.

    Agrees with :func:`forward_flops` on dense layers and is never below it.
    """
    total = 0.0
    for layer in net.layers:
        total += layer.active_count * (2 * layer.in_dim - 1) / layer.in_dim
    return total


def counted_forward_flops(net, x=None) -> int:
    """Instrumented forward pass that counts every multiply and add it performs.

    Only active connections are visited; the bias add is not counted. Used as
    an independent check on :func:`forward_flops`.
    """
    x = np.zeros(net.in_dim) if x is None else np.asarray(x, dtype=np.float64)
    muls = adds = 0
    h = x
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        out = np.zeros(layer.out_dim)
        for o in range(layer.out_dim):
            acc = None
            for j in np.flatnonzero(layer.mask[o]):
                term = layer.weights[o, j] * h[j]
                muls += 1
                if acc is None:
                    acc = term
                else:
                    acc = acc + term
                    adds += 1
            out[o] = (0.0 if acc is None else acc) + layer.bias[o]
        h = np.maximum(out, 0.0) if i < last else out
    return muls + adds


def training_flops_per_iter(algorithm, actor_flops, critic_flops, batch_size, actor_interval) -> float:
    """Average FLOPs of one training iteration (critic update + 1/d actor update)."""
    if actor_interval < 1:
        raise ValueError("actor_interval must be >= 1")
    fa, fc, b, d = actor_flops, critic_flops, batch_size, actor_interval
    if algorithm == "td3":
        return b * ((fa + 8 * fc) + (3 * fa + fc) / d)
    if algorithm == "sac":
        return b * ((2 * fa + 8 * fc) + (3 * fa + 2 * fc) / d)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def critic_update_flops(algorithm, actor_flops, critic_flops, batch_size) -> float:
    return batch_size * ((1 if algorithm == "td3" else 2) * actor_flops + 8 * critic_flops)


def actor_update_flops(algorithm, actor_flops, critic_flops, batch_size) -> float:
    return batch_size * (3 * actor_flops + (1 if algorithm == "td3" else 2) * critic_flops)


def total_model_size(algorithm, actor_size, critic_size) -> int:
    """Parameters held during training: online and target copies of every network."""
    if algorithm == "td3":
        return 2 * actor_size + 4 * critic_size
    if algorithm == "sac":
        return actor_size + 4 * critic_size
    raise ValueError(f"unknown algorithm {algorithm!r}")


@dataclass
class FlopsReport:
    algorithm: str
    actor_size: int
    critic_size: int
    total_size: int
    actor_flops: float
    critic_flops: float
    train_flops_per_iter: float
    train_flops_total: float
    inference_flops: float
    dense_total_size: int
    dense_train_flops_per_iter: float
    dense_inference_flops: float

    @property
    def size_ratio(self) -> float:
        return self.total_size / self.dense_total_size

    @property
    def train_flops_ratio(self) -> float:
        return self.train_flops_per_iter / self.dense_train_flops_per_iter

    @property
    def inference_flops_ratio(self) -> float:
        return self.inference_flops / self.dense_inference_flops

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(
            size_ratio=self.size_ratio,
            train_flops_ratio=self.train_flops_ratio,
            inference_flops_ratio=self.inference_flops_ratio,
        )
        return d


def _dense_forward_flops(net) -> float:
    return float(sum((2 * layer.in_dim - 1) * layer.out_dim for layer in net.layers))


def flops_report(algorithm, actor, critic, batch_size, actor_interval, train_iters=0, dense_actor=None, dense_critic=None):
    """Build a :class:`FlopsReport`, normalised against a dense model.

    ``dense_actor``/``dense_critic`` default to the same architecture as the
    given networks with every connection active.
    """
    fa, fc = forward_flops(actor), forward_flops(critic)
    ma, mc = model_size(actor), model_size(critic)
    if dense_actor is None:
        dfa, dma = _dense_forward_flops(actor), sum(l.size for l in actor.layers)
    else:
        dfa, dma = _dense_forward_flops(dense_actor), sum(l.size for l in dense_actor.layers)
    if dense_critic is None:
        dfc, dmc = _dense_forward_flops(critic), sum(l.size for l in critic.layers)
    else:
        dfc, dmc = _dense_forward_flops(dense_critic), sum(l.size for l in dense_critic.layers)
    per_iter = training_flops_per_iter(algorithm, fa, fc, batch_size, actor_interval)
    return FlopsReport(
        algorithm=algorithm,
        actor_size=ma,
        critic_size=mc,
        total_size=total_model_size(algorithm, ma, mc),
        actor_flops=fa,
        critic_flops=fc,
        train_flops_per_iter=per_iter,
        train_flops_total=per_iter * train_iters,
        inference_flops=fa,
        dense_total_size=total_model_size(algorithm, dma, dmc),
        dense_train_flops_per_iter=training_flops_per_iter(algorithm, dfa, dfc, batch_size, actor_interval),
        dense_inference_flops=dfa,
    )
