"""Regularization-based image restoration by alternating minimization.

Two layers: a classic handcrafted proximal AM baseline (TV / L0 /
hyper-Laplacian with penalty continuation) and a learned variant where a
small convolutional network replaces the proximal mapping and emits
per-pixel data weights, trained end-to-end through a sparse linear-system
reconstruction layer.
"""

__version__ = "0.1.0"
