"""Bayesian transfer learning for neural-network regression with penalized complexity priors."""

__version__ = "0.1.0"
