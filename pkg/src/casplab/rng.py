"""Counter-based deterministic random streams.

An :class:`Rng` is identified by ``(seed, stream)`` and a call counter. Each
sampling call builds a Philox generator keyed by ``(seed, stream)`` whose
counter is positioned at the call index, so the output of call ``i`` does
not depend on how many numbers earlier calls consumed. Named sub-streams
(``rng.stream("pcap")``) let independent consumers draw without perturbing
one another.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor, get_dtype

__all__ = ["Rng", "sample_beta", "dropout_mask"]

_MASK64 = (1 << 64) - 1


def _stream_id(name) -> int:
    if isinstance(name, int):
        return name & _MASK64
    digest = hashlib.blake2b(str(name).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    def __init__(self, seed: int, stream=0, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = _stream_id(stream)
        self.counter = int(counter)

    def stream(self, name) -> Rng:
        """Child stream derived from this one's seed and stream id."""
        return Rng(self.seed, self.stream_id ^ _stream_id(name) ^ 0x9E3779B97F4A7C15)

    def state(self) -> tuple[int, int, int]:
        return self.seed, self.stream_id, self.counter

    @classmethod
    def from_state(cls, state) -> Rng:
        seed, stream_id, counter = state
        rng = cls(seed)
        rng.stream_id = int(stream_id)
        rng.counter = int(counter)
        return rng

    def copy(self) -> Rng:
        return Rng.from_state(self.state())

    def generator(self) -> np.random.Generator:
        """A fresh numpy Generator for the next call; advances the counter."""
        bitgen = np.random.Philox(
            key=np.array([self.seed, self.stream_id], dtype=np.uint64),
            counter=np.array([0, 0, 0, self.counter], dtype=np.uint64),
        )
        self.counter += 1
        return np.random.Generator(bitgen)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.generator().uniform(low, high, size)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, std, size)

    def trunc_normal(self, size, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draws redrawn until inside ``[-bound*std, bound*std]``."""
        gen = self.generator()
        out = gen.normal(0.0, 1.0, size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = gen.normal(0.0, 1.0, int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in sampled order."""
        return self.generator().choice(n, size=k, replace=False)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream_id:#x}, counter={self.counter})"


def sample_beta(alpha: float, rng: Rng) -> float:
    """One draw from the symmetric Beta(alpha, alpha)."""
    if not alpha > 0:
        raise ValueError(f"beta alpha must be positive, got {alpha}")
    return float(rng.generator().beta(alpha, alpha))


def dropout_mask(shape, rate: float, rng: Rng) -> Tensor:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return Tensor(np.ones(shape, dtype=get_dtype()))
    keep = rng.uniform(shape) >= rate
    return Tensor(keep * (1.0 / (1.0 - rate)))
