"""
Seeded random streams.

Every module draws from its own named stream derived from the run seed, so adding draws in one
module never shifts the numbers another module sees. The 64-bit stream seed is one splitmix64 step
over ``seed ^ crc32(name)``; the generator itself is numpy's PCG64.
"""
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_seed(seed: int, name: str) -> int:
    return splitmix64((seed & _MASK64) ^ zlib.crc32(name.encode()))


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(seed, name)))
