"""Counter-based random number streams.

Every Monte Carlo path in the package draws from its own Philox stream,
keyed by (seed, stream_index).  Philox is a counter-based generator, so
distinct 128-bit keys give statistically independent streams and the
numbers produced for path i never depend on how paths are grouped into
blocks or distributed over workers.  Estimator results are therefore a
pure function of (seed, n_paths).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RngKey", "stream"]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngKey:
    """Identifies one random stream: a run seed plus a stream index.

    Estimators use one stream per path; nested estimators reserve disjoint
    index ranges for their inner stages so outer and inner draws never
    collide.
    """

    seed: int
    stream_index: int = 0

    def child(self, offset: int) -> "RngKey":
        return RngKey(self.seed, self.stream_index + offset)


def stream(key: RngKey) -> np.random.Generator:
    """Generator for the given key.  Bit-reproducible across platforms."""
    k = np.array([key.seed & _MASK64, key.stream_index & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=k))
