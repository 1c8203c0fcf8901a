"""Deterministic counter-based pseudo-random number generation.

The generator is splitmix64 driven in counter mode: draw ``i`` of a stream
with state ``(seed, counter)`` is ``mix64(seed + (counter + i + 1) * GOLDEN)``
where ``mix64`` is the Stafford mix13 finalizer and ``GOLDEN`` is the 64-bit
golden-ratio constant.  Every draw is a pure integer function of
``(seed, counter)``, so streams are reproducible bit-for-bit on any platform
and the state is two integers.

Uniform doubles take the top 53 bits (``(u >> 11) * 2**-53``).  Normals use
Box-Muller on top of that, which routes through libm ``log``/``cos``/``sin``;
the integer and uniform streams are therefore the cross-platform contract,
while normal draws are exactly reproducible only within one platform/libm.
"""

import numpy as np

ALGORITHM = "splitmix64-counter"

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_CHILD_SALT = np.uint64(0xD1B54A32D192ED03)
_INV_2_53 = 1.0 / float(1 << 53)


def _mix64(z):
    # Stafford mix13; z is a uint64 ndarray, arithmetic wraps mod 2**64.
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _size_of(shape):
    if shape is None:
        return 1, None
    if np.isscalar(shape):
        return int(shape), (int(shape),)
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        n *= s
    return n, shape


class Prng:
    """Counter-based generator with splittable substreams.

    Parameters
    ----------
    seed : int
        64-bit stream identity.
    counter : int
        Number of raw draws already consumed (resume point).
    """

    def __init__(self, seed, counter=0):
        self._seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = int(counter) & 0xFFFFFFFFFFFFFFFF

    @property
    def state(self):
        """(algorithm tag, seed, counter); enough to reproduce the stream."""
        return (ALGORITHM, self._seed, self._counter)

    @classmethod
    def from_state(cls, state):
        tag, seed, counter = state
        if tag != ALGORITHM:
            raise ValueError(f"unknown prng algorithm {tag!r}")
        return cls(seed, counter)

    def child(self, key):
        """Derive an independent stream; distinct keys give distinct streams."""
        with np.errstate(over="ignore"):
            k = np.asarray([np.uint64(int(key) & 0xFFFFFFFFFFFFFFFF)])
            salted = _mix64(k * _GOLDEN ^ _CHILD_SALT)
            seed = _mix64(np.asarray([np.uint64(self._seed)]) ^ salted)
        return Prng(int(seed[0]))

    def _raw(self, n):
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self._counter)
            out = _mix64(np.uint64(self._seed) + idx * _GOLDEN)
        self._counter = (self._counter + n) & 0xFFFFFFFFFFFFFFFF
        return out

    def u64(self, shape=None):
        """Raw 64-bit unsigned draws."""
        n, shp = _size_of(shape)
        out = self._raw(n)
        return int(out[0]) if shp is None else out.reshape(shp)

    def uniform(self, shape=None):
        """Uniform doubles in [0, 1)."""
        n, shp = _size_of(shape)
        out = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(out[0]) if shp is None else out.reshape(shp)

    def normal(self, shape=None):
        """I.i.d. standard normal draws (Box-Muller)."""
        n, shp = _size_of(shape)
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so log never sees zero; u2 in [0, 1).
        u1 = ((raw[:m] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV_2_53
        u2 = (raw[m:] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        out = out[:n]
        return float(out[0]) if shp is None else out.reshape(shp)

    def randint(self, low, high, shape=None):
        """Uniform integers in [low, high) by rejection sampling."""
        low, high = int(low), int(high)
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        span = high - low
        limit = (1 << 64) - ((1 << 64) % span)
        n, shp = _size_of(shape)
        vals = np.empty(n, dtype=np.int64)
        need = np.ones(n, dtype=bool)
        while need.any():
            draw = self._raw(int(need.sum()))
            ok = draw < np.uint64(limit) if limit < (1 << 64) else np.ones(len(draw), bool)
            idx = np.flatnonzero(need)[ok]
            vals[idx] = (draw[ok] % np.uint64(span)).astype(np.int64) + low
            need[idx] = False
        return int(vals[0]) if shp is None else vals.reshape(shp)

    def shuffle(self, n):
        """A permutation of range(n) (Fisher-Yates on this stream)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
