"""Stable hashing used for user bucketing, routing and seed derivation.

Everything here is a pure function of its inputs so that group membership,
fault scoping and region stickiness can be recomputed instead of stored.
"""

import hashlib

import numpy as np

BUCKETS = 1_000_000

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def salt64(salt):
    """Map an arbitrary salt (str or int) to a 64-bit integer."""
    digest = hashlib.sha256(str(salt).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed(master, concern):
    """Independent 63-bit seed for one named concern of a run."""
    digest = hashlib.sha256(f"{master}/{concern}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def mix64(x):
    """splitmix64 finalizer on a Python int."""
    z = (x + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def mix64_array(x):
    """Vectorised :func:`mix64` over a uint64 array (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + np.uint64(_GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def user_hash(user, salt):
    return mix64(int(user) ^ salt64(salt))


def bucket(user, salt):
    """Bucket in ``[0, BUCKETS)`` for one user."""
    return user_hash(user, salt) % BUCKETS


def bucket_array(users, salt):
    users = np.asarray(users, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return (mix64_array(users ^ np.uint64(salt64(salt))) % np.uint64(BUCKETS)).astype(np.int64)


def unit_array(users, salt):
    """Uniform floats in the open interval (0, 1), one per user."""
    users = np.asarray(users, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = mix64_array(users ^ np.uint64(salt64(salt)))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)


def threshold(fraction):
    """Bucket threshold for a fraction: users with ``bucket < threshold`` match."""
    return int(round(fraction * BUCKETS))
