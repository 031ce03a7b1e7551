"""Named, ordered parameter collections.

Every per-element object in the package (weights, gradients, curvatures,
variances, masks) is laid out against the same ordered list of named arrays.
Element ``j`` of :meth:`ParamSet.flat` refers to the same scalar parameter on
every client of a run, which is what makes element-level personalization
well defined.
"""

from __future__ import annotations

from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import AlignmentError

FEATURE_EXTRACTOR = "feature_extractor"
CLASSIFIER = "classifier"
LAYER_TAGS = (FEATURE_EXTRACTOR, CLASSIFIER)


class ParamSet:
    """Ordered mapping of parameter name to float64 array, plus layer tags."""

    __slots__ = ("_entries", "_tags")

    def __init__(self, entries: Mapping[str, np.ndarray], tags: Mapping[str, str]):
        self._entries = {name: np.asarray(arr, dtype=np.float64) for name, arr in entries.items()}
        self._tags = dict(tags)
        for name in self._entries:
            tag = self._tags.get(name)
            if tag not in LAYER_TAGS:
                raise AlignmentError(f"parameter {name!r} has no valid layer tag (got {tag!r})")
        extra = set(self._tags) - set(self._entries)
        if extra:
            raise AlignmentError(f"tags given for unknown parameters: {sorted(extra)}")

    # -- mapping-like access ------------------------------------------------
    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._entries:
            raise AlignmentError(f"unknown parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._entries[name].shape:
            raise AlignmentError(
                f"parameter {name!r}: shape {value.shape} != {self._entries[name].shape}"
            )
        self._entries[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        body = ", ".join(f"{n}{list(a.shape)}" for n, a in self._entries.items())
        return f"ParamSet({body})"

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    @property
    def tags(self) -> dict[str, str]:
        return dict(self._tags)

    def tag(self, name: str) -> str:
        return self._tags[name]

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: a.shape for n, a in self._entries.items()}

    @property
    def size(self) -> int:
        """Total number of scalar elements (n_W)."""
        return int(sum(a.size for a in self._entries.values()))

    # -- construction helpers ----------------------------------------------
    def copy(self) -> ParamSet:
        return ParamSet({n: a.copy() for n, a in self._entries.items()}, self._tags)

    def zeros_like(self) -> ParamSet:
        return ParamSet({n: np.zeros_like(a) for n, a in self._entries.items()}, self._tags)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> ParamSet:
        return ParamSet({n: fn(a) for n, a in self._entries.items()}, self._tags)

    def flat(self) -> np.ndarray:
        """Concatenate all entries, in order, into one 1-D array (a copy)."""
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._entries.values()])

    def unflatten(self, vec: np.ndarray) -> ParamSet:
        """Return a ParamSet with this layout whose elements come from ``vec``."""
        vec = np.asarray(vec)
        if vec.ndim != 1 or vec.size != self.size:
            raise AlignmentError(f"flat vector of length {vec.size} does not fit n_W={self.size}")
        out, offset = {}, 0
        for name, arr in self._entries.items():
            out[name] = vec[offset:offset + arr.size].reshape(arr.shape).astype(np.float64)
            offset += arr.size
        return ParamSet(out, self._tags)

    def segments(self) -> dict[str, slice]:
        """Slice of the flat vector occupied by each entry."""
        out, offset = {}, 0
        for name, arr in self._entries.items():
            out[name] = slice(offset, offset + arr.size)
            offset += arr.size
        return out

    # -- comparisons --------------------------------------------------------
    def check_aligned(self, other: ParamSet, what: str = "ParamSet") -> None:
        if self.names() != other.names():
            raise AlignmentError(f"{what}: names {other.names()} != {self.names()}")
        for name in self._entries:
            if self._entries[name].shape != other[name].shape:
                raise AlignmentError(
                    f"{what}: {name!r} shape {other[name].shape} != {self._entries[name].shape}"
                )

    def identical(self, other: ParamSet) -> bool:
        """Bitwise equality of layout and every element."""
        if self.names() != other.names():
            return False
        return all(
            a.shape == other[n].shape and a.tobytes() == other[n].tobytes()
            for n, a in self._entries.items()
        )

    def tobytes(self) -> bytes:
        return b"".join(a.tobytes() for a in self._entries.values())
