"""Counter-based random streams.

A stream is addressed by ``(seed, stream_id)`` and keeps a call counter.
Every draw builds a fresh Philox generator keyed on ``(seed, stream_id)``
with the call counter in the high word of the 256-bit Philox counter, so a
draw depends only on the triple and never on what other streams did.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def _generator(self) -> np.random.Generator:
        key = ((self.stream_id & _MASK64) << 64) | (self.seed & _MASK64)
        bitgen = np.random.Philox(key=key, counter=(self.counter & _MASK64) << 192)
        self.counter += 1
        return np.random.Generator(bitgen)

    def normal(self, shape) -> np.ndarray:
        return self._generator().standard_normal(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in ``[low, high]`` inclusive."""
        return self._generator().integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def child(self, index: int) -> "RngStream":
        """Independent sub-stream, e.g. one per ensemble member."""
        ss = np.random.SeedSequence([self.seed & _MASK64, self.stream_id & _MASK64, index])
        sid = int(ss.generate_state(2, np.uint64)[0])
        return RngStream(self.seed, sid, 0)


def gaussian(rng: RngStream, shape) -> Tensor:
    """I.i.d. standard normal tensor; advances ``rng`` by one call."""
    return Tensor._wrap(rng.normal(tuple(shape)))
