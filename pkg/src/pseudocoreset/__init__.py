"""Bayesian pseudocoresets: small synthetic datasets whose posterior tracks
the full-data posterior, built by divergence minimisation along expert
training trajectories."""

__version__ = "0.1.0"

from .distill import DistillConfig, Pseudocoreset, distill
from .gaussapprox import GaussianApprox, gaussian_kl, gaussian_w2_squared
from .models import Dataset, ModelSpec, exact_conjugate_posterior

__all__ = [
    "Dataset",
    "DistillConfig",
    "GaussianApprox",
    "ModelSpec",
    "Pseudocoreset",
    "distill",
    "exact_conjugate_posterior",
    "gaussian_kl",
    "gaussian_w2_squared",
]
