"""Counter-based random numbers shared by environments and walkers.

Every random quantity in the package is a pure function of a 64-bit key and a
counter. The mixing function is the splitmix64 finalizer, which is cheap
enough to call per edge and per jump from compiled code.

Environment randomness and walk randomness live in separate key namespaces,
so the same integer seed can be reused for both without correlation.
"""

from dataclasses import dataclass

import numba as nb
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

NS_ENV = np.uint64(0x5EED0E7A11C0FFEE)
NS_WALK = np.uint64(0x3A1C3D0B7E5C4A21)
NS_AUX = np.uint64(0x1F2E3D4C5B6A7988)

MASK64 = (1 << 64) - 1


@nb.njit(inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(inline="always")
def to_unit(z):
    """Map 64 random bits to a double in (0, 1]."""
    return (float(z >> _S11) + 1.0) * _INV53


def as_u64(seed):
    """Reduce any Python integer to an unsigned 64-bit key."""
    return np.uint64(int(seed) & MASK64)


def namespace_key(seed, namespace):
    return np.uint64(_py_mix64((int(seed) & MASK64) ^ int(namespace)))


def _py_mix64(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_key(master_seed, walker_index, namespace=NS_WALK):
    """Key of the walker stream ``walker_index`` under ``master_seed``."""
    base = _py_mix64((int(master_seed) & MASK64) ^ int(namespace))
    return np.uint64(_py_mix64((base + int(walker_index)) & MASK64))


@nb.njit
def stream_keys(base, count, offset):
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        out[i] = mix64(base + np.uint64(offset + i))
    return out


def stream_keys_for(master_seed, indices_start, count, namespace=NS_WALK):
    base = np.uint64(_py_mix64((int(master_seed) & MASK64) ^ int(namespace)))
    return stream_keys(base, int(count), int(indices_start))


@dataclass
class RngStream:
    """Replayable stream: draw ``k`` is ``mix64(key + (k + 1) * GOLDEN)``.

    Streams for distinct walker indices use unrelated keys, and replaying a
    stream from counter 0 reproduces every draw.
    """

    master_seed: int
    walker: int = 0
    counter: int = 0

    @property
    def key(self):
        return stream_key(self.master_seed, self.walker)

    def uniforms(self, size):
        out = _uniform_block(self.key, np.uint64(self.counter), int(size))
        self.counter += int(size)
        return out

    def spawn(self, walker):
        return RngStream(self.master_seed, walker, 0)


@nb.njit
def _uniform_block(key, start, size):
    out = np.empty(size, dtype=np.float64)
    state = key + start * GOLDEN
    for i in range(size):
        state += GOLDEN
        out[i] = to_unit(mix64(state))
    return out


def numpy_generator(seed, *salt):
    """A numpy Generator derived from ``seed`` and integer salts.

    Used for vectorised sampling that does not need per-edge addressing
    (i.i.d. sums, jitter, subsampling).
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & MASK64, *[int(s) for s in salt]]))
