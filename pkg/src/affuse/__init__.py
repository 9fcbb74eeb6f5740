"""Adaptive feature fusion on a small float64 autodiff kernel.

Modules:

- ``tensor``: tensors and reverse-mode differentiation
- ``rng``: SplitMix64 / Box-Muller streams
- ``fusion``: projection heads, fusion functions, meta-gated block
- ``models``: direct / CNN / RNN / GCN models with fusion insertion points
- ``train``: losses, optimizers, epoch loop, gradient check
- ``data``: seeded synthetic datasets and file loaders
- ``metrics``: confusion-matrix metrics and box IoU
- ``config``, ``harness``, ``cli``: comparative experiments
"""

__version__ = "0.1.0"
