"""Seeded, addressable random streams."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RngStream:
    """A numpy Generator addressed by ``(seed, stream)``.

    Two streams built from the same pair produce the same draws. Distinct
    stream ids give statistically independent generators, so parallel
    chains or particles can each own one.
    """

    seed: int
    stream: int = 0
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream),))
        object.__setattr__(self, "generator", np.random.Generator(np.random.PCG64(ss)))

    def child(self, index):
        """Sub-stream derived from this one; deterministic in ``index``."""
        ss = np.random.SeedSequence(
            int(self.seed), spawn_key=(int(self.stream), int(index) + 1)
        )
        return np.random.Generator(np.random.PCG64(ss))

    # thin delegation so callers can treat the stream as a Generator
    def __getattr__(self, name):
        return getattr(self.generator, name)


def as_generator(rng):
    """Accept an RngStream, a Generator or an int seed."""
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return RngStream(int(rng)).generator
