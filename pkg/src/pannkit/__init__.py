"""Toolkit for polynomial-approximated neural networks.

Builds certified composite polynomial approximations of sign/ReLU, swaps them
into trained backbones, trains backbones that tolerate the approximation
error, and probes the result (precision sweeps, truncation-based ReLU,
gradient-guided input perturbations).
"""

__version__ = "0.1.0"
