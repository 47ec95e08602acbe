"""Named sub-seeds derived from one top-level seed."""

import zlib

import numpy as np


def sub_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])


def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, name))


def named_int(seed: int, name: str) -> int:
    """A 63-bit integer seed for stages that take plain ints."""
    return int(sub_seed(seed, name).generate_state(2, np.uint64)[0] >> np.uint64(1))
