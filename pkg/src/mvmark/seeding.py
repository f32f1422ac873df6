"""Named random sub-streams derived from a single experiment seed.

Every stage of the pipeline draws its randomness from its own stream so that
changing, say, the attack seed leaves the data split untouched.
"""

import zlib

import numpy as np

KNOWN_STREAMS = (
    "data",
    "split",
    "init",
    "shuffle",
    "select",
    "label",
    "attack",
    "sim",
    "test_split",
)


def stream_seed(seed: int, name: str) -> int:
    """Derive a 32-bit seed for the named sub-stream of `seed`."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """A numpy Generator dedicated to the named sub-stream."""
    return np.random.default_rng(stream_seed(seed, name))
