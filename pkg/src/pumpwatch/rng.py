"""Named random sub-streams derived from one run seed.

Each consumer (split, undersample, init, shuffle, ...) draws from its own
stream, so editing one part of a config never shifts another part's draws.
"""
import zlib

import numpy as np

STREAMS = ("split", "undersample", "init", "shuffle", "synth")


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
