"""Bayesian neural networks with latent inputs, uncertainty decomposition,
and risk-sensitive model-based policy search."""

__version__ = "0.1.0"
