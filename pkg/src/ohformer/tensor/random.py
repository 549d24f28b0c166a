"""Seeded random source threaded through initialization, sampling and augmentation."""

from typing import Optional, Sequence, Tuple, Union

import numpy as np

from ohformer.errors import ContractError

_MASK64 = (1 << 64) - 1

Size = Union[None, int, Sequence[int]]


class Rng:
    """
    Deterministic generator over PCG64.

    Only 64-bit draws are used, so the 128-bit state and increment, split into
    four u64 words, capture the generator exactly (that is what checkpoints
    store).
    """

    def __init__(self, seed: int = 0):
        self._bits = np.random.PCG64(seed)
        self._gen = np.random.Generator(self._bits)

    def get_state(self) -> Tuple[int, int, int, int]:
        state = self._bits.state
        if state["has_uint32"]:
            raise ContractError("generator holds a buffered 32-bit draw")
        s, inc = state["state"]["state"], state["state"]["inc"]
        return s >> 64, s & _MASK64, inc >> 64, inc & _MASK64

    def set_state(self, words: Sequence[int]) -> None:
        s_hi, s_lo, inc_hi, inc_lo = (int(w) for w in words)
        self._bits.state = {
            "bit_generator": "PCG64",
            "state": {"state": (s_hi << 64) | s_lo, "inc": (inc_hi << 64) | inc_lo},
            "has_uint32": 0,
            "uinteger": 0,
        }

    @classmethod
    def from_state(cls, words: Sequence[int]) -> "Rng":
        rng = cls(0)
        rng.set_state(words)
        return rng

    def random(self, size: Size = None):
        """Uniform draws in [0, 1)."""
        return self._gen.random(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Size = None):
        return low + (high - low) * self._gen.random(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: Size = None):
        return loc + scale * self._gen.standard_normal(size)

    def integers(self, high: int, size: Size = None):
        """Uniform integers in [0, high)."""
        draws = np.floor(self._gen.random(size) * high).astype(np.int64)
        return np.minimum(draws, high - 1)

    def integer(self, high: int) -> int:
        return int(self.integers(high))

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self._gen.random(n), kind="stable")

    def seed(self) -> int:
        """A fresh 53-bit seed for a child generator."""
        return int(self._gen.random() * (1 << 53))

    def truncated_normal(self, size: Size, std: float = 0.02, bound: Optional[float] = None) -> np.ndarray:
        """Normal draws resampled until they fall within ``bound`` (default 2 std)."""
        bound = 2.0 * std if bound is None else bound
        out = np.asarray(self.normal(0.0, std, size), dtype=np.float64)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.normal(0.0, std, int(bad.sum()))
            bad = np.abs(out) > bound
        return out
