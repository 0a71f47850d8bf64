import csv
import io
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from pipetrain.analyzer import (CostModel, Timeline, analyze, bubble_fraction, simulate, steady_throughput,
                                utilization, version_lineage)


@pytest.mark.parametrize("K", [2, 3, 4])
@pytest.mark.parametrize("T", [1, 2, 4, 8])
def test_gpipe_steady_utilization_formula(K, T):
    u = utilization(simulate("gpipe", K, T, 50), steady_only=True)
    expect = float(Fraction(T, T + K - 1))
    assert all(x == pytest.approx(expect, abs=1e-12) for x in u)


@settings(deadline=None, max_examples=30)
@given(kind=st.sampled_from(["xpipe", "pipedream", "spectrain"]), K=st.integers(1, 5), T=st.integers(1, 4),
       ratio=st.sampled_from([1.0, 2.0, 3.0]))
def test_async_steady_phase_is_busy(kind, K, T, ratio):
    tl = simulate(kind, K, T, 2 * K + 10, CostModel.uniform(K, 1.0, ratio))
    assert min(utilization(tl, steady_only=True)) >= 0.999


def test_lineage_counts():
    tl = simulate("xpipe", 4, 2, 10)
    lin = version_lineage(tl)
    stage0 = [lin[(t, 0)] for t in range(1, 11)]
    assert stage0[:3] == [0, 1, 2] and set(stage0[2:]) == {2}
    assert all(lin[(t, 3)] == 0 for t in range(1, 11))
    assert set(version_lineage(simulate("gpipe", 4, 2, 10)).values()) == {0}


def test_throughput_ordering_and_growth():
    ratio = {}
    for K in (2, 4):
        x = analyze("xpipe", K, 2, M=50, micro_size=8)["throughput"]
        g = analyze("gpipe", K, 2, M=50, micro_size=8)["throughput"]
        ratio[K] = x / g
    assert ratio[2] > 1 and ratio[4] > ratio[2]


def test_gpipe_throughput_counts_all_but_first_minibatch():
    tl = simulate("gpipe", 2, 1, 4)
    start = max(tl.update_times(k)[0] for k in range(2))
    _, end = tl.span
    assert steady_throughput(tl, 1) == pytest.approx(3 / (end - start))


def test_timeline_csv_and_gantt():
    tl = simulate("xpipe", 2, 1, 4)
    rows = list(csv.reader(io.StringIO(tl.to_csv())))
    assert rows[0] == ["stage", "start", "end", "action", "t", "j"]
    assert len(rows) == 1 + 2 * 2 * 4
    chart = tl.gantt(resolution=1.0)
    assert chart.splitlines()[0].startswith("S0 |1") and "." in chart


def test_errors_and_edge_cases():
    with pytest.raises(ValueError):
        simulate("xpipe", 4, 1, 7)
    with pytest.raises(ValueError):
        CostModel([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        CostModel.uniform(2, -1.0)
    with pytest.raises(ValueError):
        simulate("xpipe", 3, 1, 10, CostModel.uniform(2))
    with pytest.raises(ValueError):
        Timeline("gpipe", 1, 1, 1, [[]])  # no intervals: span undefined
        Timeline("gpipe", 1, 1, 1, [[]]).span
    tl = simulate("gpipe", 1, 1, 2)
    assert utilization(tl, steady_only=True) == [1.0]
    assert bubble_fraction(tl) == 0.0


def test_transfer_costs_delay_downstream():
    tl = simulate("gpipe", 2, 1, 4, CostModel([1.0, 1.0], [2.0, 2.0], [0.5]))
    assert tl.find(1, "F", 1, 1).start == 1.5
