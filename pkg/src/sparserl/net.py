"""Masked multilayer perceptrons with hand-written reverse-mode gradients.

Every weight matrix carries a binary mask. Forward passes use the effective
weights ``W * M``; :meth:`Mlp.backward` returns the *dense* weight gradient,
i.e. the gradient at every position as if the masked entry were a free
parameter currently equal to zero. Topology evolution grows connections from
exactly these inactive-position entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HEADS = ("identity", "tanh", "gaussian")


class DivergenceError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


class MaskedLinear:
    """One affine layer ``y = x @ (W * M).T + b`` with a fixed-size mask."""

    def __init__(self, weights, mask, bias, target_sparsity):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.mask = np.asarray(mask, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape != self.mask.shape:
            raise ValueError(
                f"weights {self.weights.shape} and mask {self.mask.shape} must be equal 2-D shapes"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match out_dim {self.weights.shape[0]}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if not 0.0 <= target_sparsity <= 1.0:
            raise ValueError(f"sparsity {target_sparsity} outside [0, 1]")
        self.target_sparsity = float(target_sparsity)
        self.weights *= self.mask

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def size(self) -> int:
        return self.weights.size

    @property
    def active_count(self) -> int:
        return int(self.mask.sum())

    @property
    def density(self) -> float:
        return self.active_count / self.size

    def copy(self) -> "MaskedLinear":
        return MaskedLinear(self.weights.copy(), self.mask.copy(), self.bias.copy(), self.target_sparsity)


@dataclass
class DenseGradient:
    """Per-layer ``dL/dW`` at every position plus bias gradients."""

    weights: list
    biases: list
    inputs: np.ndarray | None = None

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights + self.biases)


@dataclass
class ForwardCache:
    inputs: list
    pre_activations: list
    output: np.ndarray
    squeeze: bool


class Mlp:
    """Rectifier MLP over masked layers.

    ``head`` decides what happens after the last affine layer: ``identity``
    (critics), ``tanh`` (deterministic actors, output in [-1, 1]) or
    ``gaussian`` (raw mean/log-std pair, the caller owns the squashing).
    """

    def __init__(self, layers, head="identity"):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        self.layers = list(layers)
        self.head = head

    @property
    def dims(self) -> list:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def active_count(self) -> int:
        return sum(layer.active_count for layer in self.layers)

    def masks(self) -> list:
        return [layer.mask for layer in self.layers]

    def copy(self) -> "Mlp":
        return Mlp([layer.copy() for layer in self.layers], self.head)

    def forward(self, x) -> tuple:
        """Run the network on one input vector or a batch of rows.

        Returns ``(output, cache)``; the cache feeds :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input shape {x.shape} incompatible with in_dim {self.in_dim}")
        inputs, pre = [], []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            inputs.append(h)
            z = h @ layer.weights.T + layer.bias
            pre.append(z)
            h = np.maximum(z, 0.0) if i < last else z
        if self.head == "tanh":
            h = np.tanh(h)
        cache = ForwardCache(inputs, pre, h, squeeze)
        return (h[0] if squeeze else h), cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, output_grad, weight_grads=True) -> DenseGradient:
        """Reverse-mode pass for a loss whose gradient w.r.t. the output is ``output_grad``.

        With ``weight_grads=False`` only the input gradient is produced, which
        is all the actor update needs from the critic.
        """
        if cache is None:
            raise ValueError("backward needs the cache from a forward pass")
        g = np.asarray(output_grad, dtype=np.float64)
        if cache.squeeze:
            g = g[None, :]
        if g.shape != cache.output.shape:
            raise ValueError(f"output_grad shape {g.shape} != output shape {cache.output.shape}")
        if self.head == "tanh":
            g = g * (1.0 - cache.output**2)
        n = len(self.layers)
        w_grads, b_grads = [None] * n, [None] * n
        for i in range(n - 1, -1, -1):
            layer = self.layers[i]
            if i < n - 1:
                g = g * (cache.pre_activations[i] > 0.0)
            if weight_grads:
                w_grads[i] = g.T @ cache.inputs[i]
                b_grads[i] = g.sum(axis=0)
            g = g @ layer.weights
        dx = g[0] if cache.squeeze else g
        if not weight_grads:
            return DenseGradient([], [], dx)
        return DenseGradient(w_grads, b_grads, dx)


def init_network(layer_dims, per_layer_sparsity, head="identity", rng_seed=None) -> Mlp:
    """Random masked MLP with exactly ``round((1 - s_l) * N_l)`` active weights per layer.

    ``rng_seed`` may be an int or an existing ``np.random.Generator``.
    """
    layer_dims = list(layer_dims)
    sparsity = list(per_layer_sparsity)
    if len(layer_dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    if len(sparsity) != len(layer_dims) - 1:
        raise ValueError(f"{len(sparsity)} sparsities given for {len(layer_dims) - 1} layers")
    if any(int(d) != d or d < 1 for d in layer_dims):
        raise ValueError(f"layer dims must be positive integers, got {layer_dims}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    layers = []
    for fan_in, fan_out, s in zip(layer_dims, layer_dims[1:], sparsity):
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"sparsity {s} outside [0, 1]")
        n = fan_in * fan_out
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        active = int(round((1.0 - s) * n))
        mask = np.zeros(n)
        mask[rng.choice(n, size=active, replace=False)] = 1.0
        layers.append(MaskedLinear(w, mask.reshape(fan_out, fan_in), b, s))
    return Mlp(layers, head)


@dataclass
class OptimizerState:
    """Adam moments for one :class:`Mlp`; moments follow the weight masks."""

    m_w: list
    v_w: list
    m_b: list
    v_b: list
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_network(cls, net: Mlp, learning_rate=3e-4, **kwargs) -> "OptimizerState":
        return cls(
            m_w=[np.zeros_like(layer.weights) for layer in net.layers],
            v_w=[np.zeros_like(layer.weights) for layer in net.layers],
            m_b=[np.zeros_like(layer.bias) for layer in net.layers],
            v_b=[np.zeros_like(layer.bias) for layer in net.layers],
            learning_rate=learning_rate,
            **kwargs,
        )

    def apply_masks(self, net: Mlp) -> None:
        """Zero moments at masked positions (used after a topology change)."""
        for layer, m, v in zip(net.layers, self.m_w, self.v_w):
            m *= layer.mask
            v *= layer.mask


def adam_step(net: Mlp, grad: DenseGradient, opt: OptimizerState) -> None:
    """One masked Adam update, in place on ``net`` and ``opt``."""
    if len(grad.weights) != len(net.layers):
        raise ValueError("gradient does not match network depth")
    if not grad.is_finite():
        raise DivergenceError("non-finite gradient entries")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    lr = opt.learning_rate
    for i, layer in enumerate(net.layers):
        gw = grad.weights[i]
        if gw.shape != layer.weights.shape:
            raise ValueError(f"gradient shape {gw.shape} != weight shape {layer.weights.shape}")
        gw = gw * layer.mask
        m, v = opt.m_w[i], opt.v_w[i]
        m *= b1
        m += (1.0 - b1) * gw
        v *= b2
        v += (1.0 - b2) * gw * gw
        layer.weights -= lr * (m / c1) / (np.sqrt(v / c2) + opt.epsilon)
        layer.weights *= layer.mask
        m *= layer.mask
        v *= layer.mask

        gb = grad.biases[i]
        mb, vb = opt.m_b[i], opt.v_b[i]
        mb *= b1
        mb += (1.0 - b1) * gb
        vb *= b2
        vb += (1.0 - b2) * gb * gb
        layer.bias -= lr * (mb / c1) / (np.sqrt(vb / c2) + opt.epsilon)


def polyak_update(target: Mlp, online: Mlp, tau: float) -> None:
    """``target <- tau * online + (1 - tau) * target``, then project onto the online masks."""
    for t, o in zip(target.layers, online.layers):
        t.weights *= 1.0 - tau
        t.weights += tau * o.weights
        t.weights *= o.mask
        t.mask = o.mask.copy()
        t.bias *= 1.0 - tau
        t.bias += tau * o.bias


@dataclass
class Adam:
    """Adam on a free array parameter (the SAC log-temperature)."""

    value: np.ndarray
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def update(self, grad) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError("non-finite gradient entries")
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step)
        v_hat = self.v / (1.0 - self.beta2**self.step)
        self.value = self.value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
