"""Wall-clock and simulated-cost timers.

The simulated clock charges a fixed cost per counted ring operation and per
unit of vector work, so timings in simulator runs are reproducible byte for
byte. Constants were fitted roughly to this package's ring multiplication on
a laptop; only their relative sizes matter for trends.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

from .ring import OPS

CLOCK_MODES = ("simulated", "wall")


@dataclass
class Elapsed:
    ms: float = 0.0


@dataclass(frozen=True)
class CostModel:
    ring_mul_ms_per_nlogn: float = 1.0e-4
    scalar_mul_ms_per_coeff: float = 5.0e-5
    work_ms_per_unit: float = 2.0e-6

    def cost(self, n: int, ring_muls: int, scalar_muls: int, work: int) -> float:
        nlogn = n * max(1.0, math.log2(n))
        return (
            ring_muls * self.ring_mul_ms_per_nlogn * nlogn
            + scalar_muls * self.scalar_mul_ms_per_coeff * n
            + work * self.work_ms_per_unit
        )


class Clock:
    """``timer()`` yields an :class:`Elapsed` filled in when the block exits."""

    def __init__(self, mode: str = "simulated", n: int = 1, cost: CostModel | None = None):
        if mode not in CLOCK_MODES:
            raise ValueError(f"clock mode must be one of {CLOCK_MODES}, got {mode!r}")
        self.mode = mode
        self.n = n
        self.cost = cost or CostModel()

    @property
    def simulated(self) -> bool:
        return self.mode == "simulated"

    @contextmanager
    def timer(self):
        out = Elapsed()
        if self.simulated:
            before = (OPS.ring_mul, OPS.scalar_mul, OPS.work)
            try:
                yield out
            finally:
                out.ms = self.cost.cost(
                    self.n, OPS.ring_mul - before[0], OPS.scalar_mul - before[1], OPS.work - before[2]
                )
        else:
            t0 = time.perf_counter()
            try:
                yield out
            finally:
                out.ms = (time.perf_counter() - t0) * 1e3

    def now_ms(self) -> float:
        """Wall time in ms (the simulated mode keeps its own timeline in the network)."""
        return time.perf_counter() * 1e3
