"""Counter-based deterministic RNG for parallel rendering.

Every draw is a pure hash of (seed, pixel, sample, bounce, draw), so results
do not depend on scheduling or worker count. The same mixing function is
compiled into the numba kernels; `RngStream` is the python-side twin used by
the public sampling API and the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@numba.njit(numba.uint64(numba.uint64), cache=True, inline="always")
def _splitmix64(z):
    z = (z + numba.uint64(0x9E3779B97F4A7C15)) & numba.uint64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> numba.uint64(30))) * numba.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> numba.uint64(27))) * numba.uint64(0x94D049BB133111EB)
    return z ^ (z >> numba.uint64(31))


@numba.njit(
    numba.float64(numba.uint64, numba.int64, numba.int64, numba.int64, numba.int64),
    cache=True, inline="always",
)
def key_uniform(seed, pixel, sample, bounce, draw):
    """Uniform double in [0, 1) keyed by (seed, pixel, sample, bounce, draw)."""
    h = _splitmix64(seed ^ (numba.uint64(pixel) * numba.uint64(0x9E3779B97F4A7C15)))
    h = _splitmix64(h ^ (numba.uint64(sample) * numba.uint64(0xC2B2AE3D27D4EB4F)))
    h = _splitmix64(h ^ (numba.uint64(bounce) * numba.uint64(0x165667B19E3779F9)))
    h = _splitmix64(h ^ (numba.uint64(draw) * numba.uint64(0x27D4EB2F165667C5)))
    return (h >> numba.uint64(11)) * (1.0 / 9007199254740992.0)


def _py_splitmix64(z: int) -> int:
    mask = 0xFFFFFFFFFFFFFFFF
    z = (z + 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    return z ^ (z >> 31)


def py_key_uniform(seed: int, pixel: int, sample: int, bounce: int, draw: int) -> float:
    """Pure-python twin of `key_uniform` (bit-identical)."""
    mask = 0xFFFFFFFFFFFFFFFF
    h = _py_splitmix64((seed ^ (pixel * 0x9E3779B97F4A7C15)) & mask)
    h = _py_splitmix64((h ^ (sample * 0xC2B2AE3D27D4EB4F)) & mask)
    h = _py_splitmix64((h ^ (bounce * 0x165667B19E3779F9)) & mask)
    h = _py_splitmix64((h ^ (draw * 0x27D4EB2F165667C5)) & mask)
    return (h >> 11) * (1.0 / 9007199254740992.0)


@dataclass
class RngStream:
    """Stateless sample stream at a fixed (pixel, sample, bounce) key.

    `uniform()` advances the draw counter; identical keys and seed always
    reproduce the same sequence.
    """

    seed: int
    pixel: int = 0
    sample: int = 0
    bounce: int = 0
    draw: int = 0

    def uniform(self) -> float:
        u = py_key_uniform(self.seed, self.pixel, self.sample, self.bounce, self.draw)
        self.draw += 1
        return u

    def at(self, pixel=None, sample=None, bounce=None) -> "RngStream":
        return RngStream(
            seed=self.seed,
            pixel=self.pixel if pixel is None else pixel,
            sample=self.sample if sample is None else sample,
            bounce=self.bounce if bounce is None else bounce,
        )
