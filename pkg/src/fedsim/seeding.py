"""Stable derivation of child seeds from a master seed."""

from __future__ import annotations

import math
import zlib

import numpy as np


def derive_seed(master: int, *parts) -> int:
    """Hash ``master`` and ``parts`` (ints or strings) into a 64-bit seed.

    Strings are mapped through CRC-32, so the result does not depend on
    Python's per-process hash randomization.
    """
    entropy = [int(master) & 0xFFFFFFFFFFFFFFFF]
    for p in parts:
        if isinstance(p, str):
            entropy.append(zlib.crc32(p.encode("utf-8")))
        else:
            entropy.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def rng_for(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)
