"""Spatio-temporal factor analysis with deep Markovian latent dynamics.

The package factorizes multivariate time series Y into temporal weights W
and spatial factors F, places a nonlinear gated state-space prior over the
weights, and fits everything with stochastic variational inference on a
small float64 autodiff tape.  It supports Gaussian-mixture clustering of
sequences, control-conditioned dynamics, missing observations, rolling
short-term forecasts, and importance-sampled held-out likelihoods.
"""

from .errors import DataError, NumericalError

__all__ = ["DataError", "NumericalError"]
__version__ = "0.1.0"
