"""Counter-based random streams.

Every random quantity in the package is drawn from a Philox4x64 stream whose
128-bit key is derived from ``(seed, *path)``.  Streams with different paths
are statistically independent and can be created in any order, so results do
not depend on iteration order or worker layout.
"""
import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_key(seed, *path):
    """Fold a seed and an integer path into a 128-bit Philox key."""
    lo = int(seed) & _MASK64
    hi = _splitmix64(len(path))
    for p in path:
        hi = _splitmix64(hi ^ (int(p) & _MASK64))
    return lo | (hi << 64)


def stream(seed, *path):
    """Return a ``numpy.random.Generator`` keyed by ``(seed, *path)``."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *path)))


def uniform(n, seed, *path):
    """``n`` i.i.d. float64 values on [0, 1) from the stream ``(seed, *path)``."""
    return stream(seed, *path).random(n)


def hash_seed(*parts):
    """Derive a 63-bit integer seed from integer parts (e.g. seed, epoch, index)."""
    h = 0
    for p in parts:
        h = _splitmix64(h ^ (int(p) & _MASK64))
    return h >> 1
