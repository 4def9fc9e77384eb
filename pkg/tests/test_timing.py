import math

import numpy as np
import pytest

from rsagg.ring import RingParams, ring_mul, sample
from rsagg.timing import Clock, CostModel


def test_simulated_clock_charges_ring_products():
    params = RingParams.production(n=256)
    rng = np.random.default_rng(0)
    a, b = sample("uniform", params, rng), sample("uniform", params, rng)
    clock = Clock("simulated", params.n)
    with clock.timer() as el:
        ring_mul(a, b)
        ring_mul(a, b)
    assert el.ms == pytest.approx(2 * CostModel().ring_mul_ms_per_nlogn * 256 * math.log2(256))


def test_simulated_clock_nests():
    clock = Clock("simulated", 64)
    from rsagg.ring import OPS

    with clock.timer() as outer:
        OPS.work += 1000
        with clock.timer() as inner:
            OPS.work += 500
    assert inner.ms == pytest.approx(500 * CostModel().work_ms_per_unit)
    assert outer.ms == pytest.approx(1500 * CostModel().work_ms_per_unit)


def test_wall_clock_measures_something():
    with Clock("wall").timer() as el:
        sum(range(10000))
    assert el.ms > 0


def test_bad_mode():
    with pytest.raises(ValueError):
        Clock("lunar")
