# app/utils/rng.py
"""
Deterministic random streams.

Every stream is a numpy ``Philox`` (4x64, counter-based) bit generator whose
128-bit key is the BLAKE2b digest of the stream's lineage: the root seed plus
the ordered derivation labels. The same lineage therefore yields the same
sequence on every machine, and forking never touches the parent's state.

There is no module-level generator: callers pass an ``RngStream`` explicitly,
and concurrent code forks a child per task first.
"""

import hashlib
from typing import Optional, Tuple, Union

import numpy as np

from app.errors import LabError

Label = Union[bytes, str]


class EmptyForkLabel(LabError, ValueError):
    """Raised when a fork is requested with an empty label."""


def _lineage_key(seed: int, labels: Tuple[bytes, ...]) -> int:
    digest = hashlib.blake2b(digest_size=16)
    digest.update(int(seed).to_bytes(8, "little", signed=False))
    for label in labels:
        digest.update(len(label).to_bytes(4, "little"))
        digest.update(label)
    return int.from_bytes(digest.digest(), "little")


class RngStream:
    """Single-owner random stream; fork children instead of sharing it."""

    def __init__(self, seed: int, labels: Tuple[bytes, ...] = ()) -> None:
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.labels = tuple(labels)
        self._gen = np.random.Generator(
            np.random.Philox(key=_lineage_key(self.seed, self.labels))
        )

    def __repr__(self) -> str:
        path = "/".join(label.decode("utf-8", "replace") for label in self.labels)
        return f"RngStream(seed={self.seed}, lineage='{path}')"

    @property
    def lineage(self) -> Tuple[int, Tuple[bytes, ...]]:
        return self.seed, self.labels

    def fork(self, label: Label) -> "RngStream":
        if isinstance(label, str):
            label = label.encode("utf-8")
        if not label:
            raise EmptyForkLabel("fork label must be non-empty")
        return RngStream(self.seed, self.labels + (bytes(label),))

    # ─── Draws ───────────────────────────────────────────────────────────
    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, scale: float = 1.0, size=None):
        return scale * self._gen.standard_normal(size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        """Integers in [low, high) (or [0, low) when high is omitted)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def seed_int(self) -> int:
        """A 31-bit integer seed for libraries that take an int random_state."""
        return int(self._gen.integers(0, 2**31 - 1))


def rng_new(seed: int) -> RngStream:
    return RngStream(seed)


def rng_fork(parent: RngStream, label: Label) -> RngStream:
    return parent.fork(label)


def beta_1_1(rng: RngStream) -> float:
    """Beta(1, 1) sample. Beta(1, 1) is exactly Uniform(0, 1), so this is one uniform draw."""
    return float(rng.uniform())
