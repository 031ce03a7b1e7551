"""Personalization masks and the personal/global merge."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import AlignmentError, ConfigError
from .params import LAYER_TAGS, ParamSet


@dataclass(frozen=True)
class Mask:
    """Flat boolean vector over the ParamSet layout; True = personalized."""

    bits: np.ndarray
    p: Optional[float] = None

    @property
    def size(self) -> int:
        return int(self.bits.size)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def as_params(self, like: ParamSet) -> ParamSet:
        """View the mask as a 0/1 float ParamSet with the layout of ``like``."""
        return like.unflatten(self.bits.astype(np.float64))


def personalized_count(p: float, n: int) -> int:
    """``round(p * n)`` with halves rounded up."""
    return int(math.floor(p * n + 0.5))


def select_mask(sigma_g: Union[ParamSet, np.ndarray], p: float) -> Mask:
    """Mark the ``round(p * n_W)`` largest variances as personalized.

    Among equal variances the lower flat index wins, which makes the
    threshold a derived quantity and the count exact.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"p must lie in [0, 1], got {p}")
    sigma = sigma_g.flat() if isinstance(sigma_g, ParamSet) else np.asarray(sigma_g, dtype=np.float64).ravel()
    if not np.all(np.isfinite(sigma)):
        raise ConfigError("variances must be finite")
    k = personalized_count(p, sigma.size)
    order = np.argsort(-sigma, kind="stable")
    bits = np.zeros(sigma.size, dtype=bool)
    bits[order[:k]] = True
    return Mask(bits, p)


def layer_mask(params: ParamSet, personalized_tag: str) -> Mask:
    """Personalize every element of the entries carrying ``personalized_tag``."""
    if personalized_tag not in LAYER_TAGS:
        raise ConfigError(f"unknown layer tag {personalized_tag!r}; expected one of {LAYER_TAGS}")
    bits = np.zeros(params.size, dtype=bool)
    for name, seg in params.segments().items():
        if params.tag(name) == personalized_tag:
            bits[seg] = True
    return Mask(bits)


def empty_mask(params: ParamSet) -> Mask:
    return Mask(np.zeros(params.size, dtype=bool), 0.0)


def merge(w_i: ParamSet, w_g: ParamSet, mask: Mask) -> ParamSet:
    """Personal elements from ``w_i`` where the mask is set, global elsewhere."""
    w_i.check_aligned(w_g, "global params")
    if mask.size != w_i.size:
        raise AlignmentError(f"mask has {mask.size} bits but ParamSet has {w_i.size} elements")
    return w_i.unflatten(np.where(mask.bits, w_i.flat(), w_g.flat()))


def mask_churn(previous: Optional[Mask], current: Mask) -> float:
    """Fraction of bits that differ from the previous round (0 on the first)."""
    if previous is None or current.size == 0:
        return 0.0
    if previous.size != current.size:
        raise AlignmentError("masks of different sizes")
    return float(np.count_nonzero(previous.bits != current.bits) / current.size)
