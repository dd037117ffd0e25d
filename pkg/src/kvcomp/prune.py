"""Element-wise magnitude pruning with binary index generation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, InvalidArgumentError


@dataclass(frozen=True, eq=False)
class PrunedTokens:
    """Output of the pruning unit.

    ``index`` has one bool per original element in scan order (True = kept);
    ``kept_values`` holds the surviving int8 values in the same order.
    """

    index: np.ndarray = field(repr=False)
    kept_values: np.ndarray = field(repr=False)
    original_len: int

    @property
    def kept_count(self) -> int:
        return int(self.kept_values.size)

    def check(self):
        if self.index.size != self.original_len:
            raise CorruptionError(
                f"index bitmap has {self.index.size} bits for {self.original_len} elements"
            )
        pop = int(np.count_nonzero(self.index))
        if pop != self.kept_values.size:
            raise CorruptionError(f"index popcount {pop} != {self.kept_values.size} kept values")

    def __eq__(self, other):
        if not isinstance(other, PrunedTokens):
            return NotImplemented
        return (
            self.original_len == other.original_len
            and np.array_equal(self.index, other.index)
            and np.array_equal(self.kept_values, other.kept_values)
        )

    __hash__ = None


def prune_mask(values: np.ndarray, threshold: int) -> np.ndarray:
    """True where an element survives: non-zero and ``|x| >= threshold``."""
    v = np.asarray(values).astype(np.int16)
    return (v != 0) & (np.abs(v) >= threshold)


def prune(values, threshold: int) -> PrunedTokens:
    if threshold < 0:
        raise InvalidArgumentError(f"threshold must be >= 0, got {threshold}")
    flat = np.asarray(values, dtype=np.int8).reshape(-1)
    mask = prune_mask(flat, threshold)
    return PrunedTokens(index=mask, kept_values=flat[mask].copy(), original_len=flat.size)


def pruning_ratio(pruned: PrunedTokens) -> float:
    if pruned.original_len <= 0:
        raise InvalidArgumentError("pruning ratio of an empty sequence is undefined")
    return 1.0 - np.count_nonzero(pruned.index) / pruned.original_len


def reconstruct_pruned(pruned: PrunedTokens) -> np.ndarray:
    pruned.check()
    out = np.zeros(pruned.original_len, dtype=np.int8)
    out[pruned.index] = pruned.kept_values
    return out
