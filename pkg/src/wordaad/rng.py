"""Seeded random streams addressed by a master seed and a labelled path.

Every consumer of randomness asks for its own stream, e.g.
``derive_stream(seed, "augment/subject=3/class=attended")``, so results do not
depend on the order in which subjects, folds or paradigms are processed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _path_key(path: tuple[str, ...]) -> tuple[int, ...]:
    # Four 32-bit words per label keep distinct paths far apart in key space.
    words: list[int] = []
    for label in path:
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=16).digest()
        words.extend(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    return tuple(words)


def _split_path(path) -> tuple[str, ...]:
    if isinstance(path, str):
        parts = tuple(p for p in path.split("/") if p)
    else:
        parts = tuple(str(p) for p in path)
    if not parts:
        raise ValueError("stream path must be non-empty")
    return parts


class RngStream:
    """A single-owner PCG64 stream derived from ``(master_seed, path)``.

    Streams are cheap; derive a child with :meth:`child` rather than sharing
    one stream between independent units of work.
    """

    def __init__(self, master_seed: int, path):
        self.master_seed = int(master_seed) & _MASK64
        self.path = _split_path(path)
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=_path_key(self.path))
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, path={'/'.join(self.path)!r})"

    def child(self, *labels) -> "RngStream":
        return RngStream(self.master_seed, self.path + _split_path(labels))

    def draw_uniform(self, size=None, low=0.0, high=1.0):
        return self.generator.uniform(low, high, size)

    def draw_normal(self, size=None, loc=0.0, scale=1.0):
        return self.generator.normal(loc, scale, size)

    def draw_integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def draw_choice(self, n: int, k: int) -> np.ndarray:
        """Draw ``k`` distinct indices from ``range(n)``."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct indices from {n}")
        if k < 0:
            raise ValueError("k must be non-negative")
        return self.generator.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def seed_int(self) -> int:
        """A 32-bit integer seed for APIs that need one (e.g. sklearn)."""
        return int(self.generator.integers(0, 2**31 - 1))


def derive_stream(master_seed: int, path) -> RngStream:
    return RngStream(master_seed, path)


def as_stream(random_state, default_path="default") -> RngStream:
    """Coerce ``None``, an int seed, or an existing stream to an :class:`RngStream`."""
    if isinstance(random_state, RngStream):
        return random_state
    if random_state is None:
        random_state = 0
    if isinstance(random_state, (int, np.integer)):
        return RngStream(int(random_state), default_path)
    raise TypeError(f"cannot make a random stream from {type(random_state).__name__}")
