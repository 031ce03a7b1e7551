"""Diagonal Laplace posterior around a trained point.

Curvature is the diagonal empirical Fisher, ``h_j = mean_n g_{n,j}**2`` over
the per-sample loss gradients, which is nonnegative by construction. The
posterior variance is ``1 / (h + damping)``. Only the ordering of the
variances is consumed downstream, so the scale convention (mean rather than
sum over samples) does not affect mask selection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyDatasetError, NumericalError
from .nn import Batch, NetworkSpec, squared_grad_sum
from .params import ParamSet

DEFAULT_DAMPING = 1e-6

# Diagonal curvature shares the ParamSet layout; entries are nonnegative.
DiagCurvature = ParamSet


@dataclass
class DiagGaussian:
    """Per-element mean and variance, both laid out like the model's ParamSet."""

    mu: ParamSet
    sigma: ParamSet

    def __post_init__(self):
        self.mu.check_aligned(self.sigma, "DiagGaussian variance")
        if not np.all(np.isfinite(self.mu.flat())):
            raise NumericalError("posterior mean is not finite")
        s = self.sigma.flat()
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise NumericalError("posterior variance must be finite and strictly positive")


def estimate_curvature(spec: NetworkSpec, params: ParamSet, dataset, batch_size: int = 256) -> DiagCurvature:
    """Diagonal empirical Fisher of the per-sample loss over ``dataset``.

    Accumulated in chunks of ``batch_size``; the result does not depend on
    the chunking beyond floating-point summation order.
    """
    inputs, labels = np.asarray(dataset.inputs), np.asarray(dataset.labels)
    n = len(labels)
    if n == 0:
        raise EmptyDatasetError("curvature needs at least one sample")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    total = None
    for start in range(0, n, batch_size):
        part = squared_grad_sum(spec, params, Batch(inputs[start:start + batch_size],
                                                   labels[start:start + batch_size]))
        if total is None:
            total = part
        else:
            for name in total:
                total[name] += part[name]
    return total.map(lambda a: a / n)


def posterior_from_curvature(params: ParamSet, curvature: DiagCurvature,
                             damping: float = DEFAULT_DAMPING) -> DiagGaussian:
    """Laplace posterior ``N(params, 1 / (curvature + damping))``."""
    if not damping > 0:
        raise ConfigError(f"damping must be > 0, got {damping}")
    params.check_aligned(curvature, "curvature")
    if any(np.any(h < 0) for h in curvature.values()):
        raise NumericalError("curvature has negative entries")
    sigma = curvature.map(lambda h: 1.0 / (h + damping))
    return DiagGaussian(mu=params.copy(), sigma=sigma)


def laplace_posterior(spec: NetworkSpec, params: ParamSet, dataset,
                      damping: float = DEFAULT_DAMPING, batch_size: int = 256) -> DiagGaussian:
    return posterior_from_curvature(params, estimate_curvature(spec, params, dataset, batch_size), damping)
