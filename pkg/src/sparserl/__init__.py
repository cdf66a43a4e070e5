"""Sparse off-policy actor-critic training with topology evolution.

Modules: :mod:`~sparserl.net` (masked MLPs and Adam), :mod:`~sparserl.sparsity`
(allocation and drop/grow), :mod:`~sparserl.replay` (dynamic-capacity buffer),
:mod:`~sparserl.targets` (n-step targets), :mod:`~sparserl.agents` (TD3/SAC
loops), :mod:`~sparserl.envs`, :mod:`~sparserl.accounting` (size and FLOPs)
and :mod:`~sparserl.cli`.
"""

__version__ = "0.1.0"
