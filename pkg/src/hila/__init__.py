"""Hierarchical inter-level attention engine.

A self-contained numerical stack: dense tensors and kernels, reverse-mode
autodiff, the bottom-up/top-down inter-level attention updates, a
four-stage spatial-reduction-attention encoder with a segmentation head,
attention-hierarchy composition, segmentation metrics with closed-form
compute accounting, a synthetic shapes corpus, and a CLI.
"""

__version__ = "0.1.0"

from .tensor import PatchGeometry, Tensor  # noqa: F401
