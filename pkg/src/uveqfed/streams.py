"""Counter-mode random streams shared by encoder and decoder.

Every piece of randomness in the package is drawn from a Philox
(counter-mode) generator whose 128-bit key is derived from the master
seed and an integer path ``(domain, user, round, ...)`` with a splitmix64
chain.  Streams derived this way are mutually independent and
reproducible regardless of execution order or thread count, which is
what lets the decoder regenerate the encoder's dither without
transmitting it.
"""

import numpy as np

# Domain tags keep streams for different purposes disjoint even when the
# remaining path components collide.
DOMAIN_DITHER = 1
DOMAIN_QSGD = 2
DOMAIN_MASK = 3
DOMAIN_ROTATION = 4
DOMAIN_SAMPLING = 5
DOMAIN_INIT = 6
DOMAIN_DATA = 7

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(x):
    # splitmix64 finalizer
    x &= _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def derive_key(master_seed, path):
    """128-bit Philox key for the stream addressed by (master_seed, *path)."""
    h = _mix64(int(master_seed) & _MASK64)
    for p in path:
        h = _mix64((h + _GOLDEN) ^ (int(p) & _MASK64))
    k0 = _mix64(h + _GOLDEN)
    k1 = _mix64(k0 + _GOLDEN)
    return np.array([k0, k1], dtype=np.uint64)


def derived_rng(master_seed, *path):
    """Return a Generator for the stream addressed by (master_seed, *path)."""
    return np.random.Generator(np.random.Philox(key=derive_key(master_seed, path)))


def dither_uniforms(master_seed, user_id, round_index, blocks, dim):
    """Raw uniforms on [-1/2, 1/2) feeding the dither of one update.

    Block ``i`` consumes exactly ``dim`` consecutive draws, so its dither
    is a fixed function of (master_seed, user_id, round_index, i).
    """
    rng = derived_rng(master_seed, DOMAIN_DITHER, user_id, round_index)
    return rng.random((blocks, dim)) - 0.5
