"""Consistency-trained diffusion bridges with stereo audio evaluation.

Subpackages cover the noise schedule and time grid, the pinned bridge
process and its probability-flow ODE, a denoiser network with explicit
gradients, teacher-free consistency training and sampling, spatial
conditioning, DSP primitives, and objective stereo metrics.
"""

__version__ = "0.1.0"
