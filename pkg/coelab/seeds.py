"""
Named random streams derived from one root seed.

Each purpose ("init", "data", "gradcheck", ...) gets its own generator, so a
new consumer of randomness never shifts the numbers another one sees.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *path: int) -> np.random.Generator:
    """
    Returns the generator for ``name`` under ``seed``.

    Args:
        seed (int): Root seed of the run.
        name (str): Purpose of the stream.
        *path (int): Further integer coordinates (e.g. a step number) for
            streams that must be a pure function of their position.

    Returns:
        np.random.Generator: A freshly seeded PCG64 generator.
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(stream_key(name), *path))
    return np.random.Generator(np.random.PCG64(sequence))
