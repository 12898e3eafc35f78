"""Anticipating stochastic calculus on a discretized two-component Wiener space."""

from .gaussian_space import (CovModel, CrossCovarianceSpec, IntegratorProcess, NoiseSample, TimeGrid,
                             build_covariance, conditional_projector, regress_gamma, sample_pair,
                             sample_pairs)
from .chaos import (ChaosVector, VectorChaos, derivative, divergence, evaluate, exp_vector, expand,
                    inner, multiply, norm_sq, second_quantization, wick_product)

__version__ = "0.1.0"
