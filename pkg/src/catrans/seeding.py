"""Named random sub-streams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "flip", "eval")


def substream(root_seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode())
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=(key,)))


def episode_seeds(run_seed: int, n: int) -> list[int]:
    rng = substream(run_seed, "eval")
    return [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=n)]
