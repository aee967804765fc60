"""Counter-based keyed random streams.

Every stream is a Philox generator whose key is derived from the master seed
plus an integer key path such as (replicate, step). Element ``i`` of a stream
always belongs to row ``i``, so results never depend on loop order or on how
work is split across threads.
"""
import numpy as np

_TINY = np.finfo(float).tiny


def _entropy(seed: int, key: tuple[int, ...]) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in key]])


def keyed_generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(_entropy(seed, key)))


def keyed_uniforms(seed: int, *key: int, n: int) -> np.ndarray:
    """n draws from the open interval (0, 1)."""
    u = keyed_generator(seed, *key).random(n)
    u[u == 0.0] = _TINY
    return u


def derive_seed(seed: int, *key: int) -> int:
    return int(_entropy(seed, key).generate_state(1, np.uint64)[0])
