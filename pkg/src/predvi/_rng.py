"""Named, reproducible RNG streams.

Every stochastic stage (initialization, posterior sampling, WAIC draws,
Bayesian optimization, simulators, splits) pulls its own stream so that adding
draws to one stage never perturbs another.
"""

import zlib

import numpy as np


def seed_stream(seed: int, purpose: str) -> np.random.Generator:
    """Generator for `purpose`, decorrelated from other purposes at the same seed."""
    key = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.default_rng(ss)
