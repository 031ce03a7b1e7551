"""Moment-matched aggregation of client diagonal Gaussians.

The global Gaussian has the exact mean and variance of the mixture
``sum_i pi_i N(mu_i, sigma_i)``:

    mu_g    = sum_i pi_i mu_i
    sigma_g = sum_i pi_i sigma_i + sum_i pi_i (mu_i - mu_g)**2

The second term measures client disagreement on each element.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .laplace import DiagGaussian
from .params import ParamSet

WEIGHT_TOLERANCE = 1e-12


def default_weights(client_sample_counts: Sequence[int]) -> list[float]:
    """Data-size weights ``n_i / sum_j n_j``."""
    counts = list(client_sample_counts)
    if not counts:
        raise ConfigError("need at least one client sample count")
    if any(int(c) != c or c < 1 for c in counts):
        raise ConfigError(f"sample counts must be positive integers, got {counts}")
    total = sum(int(c) for c in counts)
    return [int(c) / total for c in counts]


def check_weights(weights: Sequence[float], n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigError(f"expected {n} client weights, got {w.size}")
    if np.any(w <= 0) or np.any(w > 1):
        raise ConfigError(f"client weights must lie in (0, 1], got {w.tolist()}")
    if abs(w.sum() - 1.0) > WEIGHT_TOLERANCE:
        raise ConfigError(f"client weights must sum to 1, got {w.sum()!r}")
    return w


def weighted_mean(vectors: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """``sum_i w_i v_i`` accumulated in client order.

    FedAvg and FedBPS both go through this so their global means agree bitwise.
    """
    out = weights[0] * vectors[0]
    for w, v in zip(weights[1:], vectors[1:]):
        out = out + w * v
    return out


def average_params(params: Sequence[ParamSet], weights: Sequence[float]) -> ParamSet:
    """Weighted average of aligned ParamSets."""
    if not params:
        raise ConfigError("need at least one ParamSet")
    w = check_weights(weights, len(params))
    for other in params[1:]:
        params[0].check_aligned(other, "client params")
    return params[0].unflatten(weighted_mean([p.flat() for p in params], w))


def aggregate(posteriors: Sequence[DiagGaussian], weights: Sequence[float]) -> DiagGaussian:
    """Collapse client posteriors into one Gaussian by mixture moment matching."""
    if not posteriors:
        raise ConfigError("need at least one posterior")
    w = check_weights(weights, len(posteriors))
    ref = posteriors[0].mu
    for post in posteriors[1:]:
        ref.check_aligned(post.mu, "client posterior")
    mus = [post.mu.flat() for post in posteriors]
    sigmas = [post.sigma.flat() for post in posteriors]
    mu_g = weighted_mean(mus, w)
    spread = weighted_mean([(m - mu_g) ** 2 for m in mus], w)
    sigma_g = weighted_mean(sigmas, w) + spread
    if np.any(sigma_g <= 0) or not np.all(np.isfinite(sigma_g)):
        raise NumericalError("aggregated variance is not strictly positive")
    return DiagGaussian(mu=ref.unflatten(mu_g), sigma=ref.unflatten(sigma_g))
