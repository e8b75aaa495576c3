"""Staged Bayesian domain-adversarial transfer learning for small tabular regression."""

__version__ = "0.1.0"
