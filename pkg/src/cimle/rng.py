"""Named, keyed random substreams derived from one root seed.

Every consumer asks for ``substream(seed, TAG, *keys)``; the stream depends
only on those integers, never on call order, so parallel schedules reproduce
serial results exactly.
"""

import hashlib

import numpy as np

DATA = 1
LATENT = 2
BATCH = 3
INDEX = 4
EVAL = 5
INIT = 6
FIXED_Z = 7


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def sample_latent(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard-normal latent code(s) of the given shape, float32."""
    return rng.standard_normal(shape, dtype=np.float32)


def latent_codes(seed: int, outer: int, index: int, m: int, shape) -> np.ndarray:
    """The ``m`` latent codes drawn for dataset item ``index`` at outer iteration ``outer``."""
    return sample_latent(substream(seed, LATENT, outer, index), (m, *shape))


def fixed_latent(seed: int, shape) -> np.ndarray:
    return sample_latent(substream(seed, FIXED_Z), shape)


def code_hash(z: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(z, dtype=np.float32).tobytes()).hexdigest()[:16]
