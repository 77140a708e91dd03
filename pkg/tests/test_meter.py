import time

import pytest

from hetfed.compress import CompressionPlan, apply_plan, quantize_format
from hetfed.fedsim import DeviceProfile
from hetfed.meter import (
    HEADER_BYTES,
    MemoryAccount,
    Stopwatch,
    Summary,
    memory_footprint,
    payload_bytes,
    time_breakdown,
)
from hetfed.mlp import GradientSet
from hetfed.numfmt import F32, OutOfRange


def test_default_payload(default_model):
    assert payload_bytes(default_model) == HEADER_BYTES + 511 * 8 == 4152
    assert payload_bytes(GradientSet.zeros_like(default_model)) == 4152
    assert payload_bytes(quantize_format(default_model, F32)) == HEADER_BYTES + 511 * 4
    with pytest.raises(TypeError):
        payload_bytes([1, 2, 3])


def test_empty_plan_payload_matches_model(default_model):
    _, state = apply_plan(default_model, CompressionPlan())
    assert payload_bytes(state) == payload_bytes(default_model)


def test_payload_monotone_in_prune_ratio(default_model):
    sizes = [payload_bytes(apply_plan(default_model, CompressionPlan(r / 10))[1]) for r in range(1, 11)]
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[0] > sizes[-1]


def test_memory_example(default_model):
    acc = memory_footprint(default_model, 1000)
    assert acc == MemoryAccount(3680, 408, 4088, 408000, 408000, 40000, 8000)
    assert acc.total_bytes == 872_176
    assert memory_footprint(default_model, 1000, F32).total_bytes * 2 == 872_176
    assert memory_footprint(quantize_format(default_model, F32), 1000).total_bytes * 2 == 872_176


def test_memory_linear_in_batch(default_model):
    totals = [memory_footprint(default_model, n).total_bytes for n in range(1, 3001, 250)]
    first = [b - a for a, b in zip(totals, totals[1:])]
    assert all(d > 0 for d in first)
    assert all(b - a == 0 for a, b in zip(first, first[1:]))


def test_memory_rejects_empty_batch(default_model):
    with pytest.raises(OutOfRange):
        memory_footprint(default_model, 0)


def test_time_examples():
    dev = DeviceProfile(0, up_bw=1e6)
    assert time_breakdown(0.0, dev, 4000, 0, 0.0).t_upload == 0.004
    assert time_breakdown(0.0, dev, 0, 0, 0.0).total == 0.0
    t = time_breakdown(0.005, DeviceProfile(0, slowdown=2.0, up_bw=1e6, down_bw=5e5), 4000, 4000, 0.02)
    assert (t.t_local, t.t_upload, t.t_global, t.t_download) == (0.01, 0.004, 0.02, 0.008)
    assert t.total == pytest.approx(0.042, abs=1e-15)
    assert t.as_ms()["t_total_ms"] == pytest.approx(42.0)


def test_time_rejects_negative():
    with pytest.raises(OutOfRange):
        time_breakdown(-1.0, DeviceProfile(0), 0, 0, 0.0)
    with pytest.raises(OutOfRange):
        time_breakdown(0.0, DeviceProfile(0), 0, -5, 0.0)


@pytest.mark.parametrize("up,down", [(1e6, 1e6), (3e5, 7e6), (1234.5, 99.0)])
def test_bandwidth_homogeneity(up, down):
    a = time_breakdown(0.1, DeviceProfile(0, up_bw=up, down_bw=down), 4152, 2076, 0.0)
    b = time_breakdown(0.1, DeviceProfile(0, up_bw=2 * up, down_bw=2 * down), 4152, 2076, 0.0)
    assert b.t_upload + b.t_download == (a.t_upload + a.t_download) / 2


def test_stopwatch_nesting():
    with Stopwatch("outer") as outer:
        with Stopwatch("a") as a:
            time.sleep(0.002)
        with Stopwatch("b") as b:
            time.sleep(0.001)
    assert a.ms >= 2.0 and b.ms >= 1.0
    assert a.seconds + b.seconds <= outer.seconds + 1e-6


def test_stopwatch_zero_work():
    with Stopwatch() as sw:
        pass
    assert 0.0 <= sw.ms < 1.0


def test_summary():
    s = Summary.of([3.0, 1.0, 2.0, 10.0])
    assert (s.n, s.mean, s.median) == (4, 4.0, 2.5)
    assert s.stddev == pytest.approx(4.0825, abs=1e-4)
    assert Summary.of([5.0]).stddev == 0.0
    with pytest.raises(ValueError):
        Summary.of([])
