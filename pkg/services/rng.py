"""
Counter-based random streams.

Every draw in the toolkit comes from a generator keyed by
(seed, stream id, counter). Batched samplers use the chunk index as the
counter, and chunk boundaries depend only on the configured chunk size, so the
numbers a sample sees never depend on which worker produced it.
"""

import hashlib
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

# Reserved stream id
ENVIRONMENT_STREAM = 0


def stream_generator(seed: int, stream_id: int, counter: int) -> np.random.Generator:
    """Philox generator for one (seed, stream, counter) triple."""
    sequence = np.random.SeedSequence([int(seed), int(stream_id), int(counter)])
    return np.random.Generator(np.random.Philox(sequence))


def stream_id_for(name: str) -> int:
    """Stable 32-bit stream id for a named experiment or purpose."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") | 0x100  # never collides with reserved ids


@dataclass(frozen=True)
class RandomStream:
    """A named family of counter-indexed generators."""
    seed: int
    stream_id: int

    @classmethod
    def named(cls, seed: int, name: str) -> "RandomStream":
        return cls(seed=seed, stream_id=stream_id_for(name))

    def generator(self, counter: int = 0) -> np.random.Generator:
        return stream_generator(self.seed, self.stream_id, counter)

    def substream(self, name: str) -> "RandomStream":
        """Derived stream, e.g. one per environment seed inside an experiment."""
        return RandomStream(seed=self.seed, stream_id=stream_id_for(f"{self.stream_id}/{name}"))


def plan_chunks(n_samples: int, chunk_size: int) -> List[Tuple[int, int, int]]:
    """
    Split n_samples into fixed-size chunks.

    Returns:
        List of (chunk_index, start, stop); sample i always lands in chunk
        i // chunk_size.
    """
    if n_samples < 0:
        raise ValueError("n_samples must be nonnegative")
    return [
        (index, start, min(start + chunk_size, n_samples))
        for index, start in enumerate(range(0, n_samples, chunk_size))
    ]
