"""Seeded random streams.

Every random draw in the package comes from a Philox-4x64 counter-based
generator keyed directly by ``(seed, stream)``, so independent consumers
(class shuffling, weight init, VAE noise, minibatch order) never share state
and the same seed reproduces the same run.
"""

import numpy as np

PRNG_NAME = "philox4x64"
PRNG_VERSION = f"numpy-{np.__version__}"

STREAM_SCENARIO = 1
STREAM_INIT = 2
STREAM_NOISE = 3
STREAM_BATCHES = 4
STREAM_SYNTH = 5


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    return np.random.Generator(np.random.Philox(key=int(seed) | (int(stream) << 64)))


def manifest() -> dict:
    return {"name": PRNG_NAME, "version": PRNG_VERSION}
