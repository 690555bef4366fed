import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import PchipInterpolator

from jale.core import HLS_BITRATES
from jale.metrics import (
    BdReport,
    MetricError,
    RdCurve,
    bd_quality,
    bd_rate,
    delta_storage,
    delta_threads,
    mean_report,
)
from oracles import trapezoid_mean

REF = RdCurve((1.0, 2.0, 4.0, 8.0), (34.0, 37.0, 39.5, 41.0))


def test_identity():
    assert abs(bd_rate(REF, REF)) < 1e-9
    assert abs(bd_quality(REF, REF)) < 1e-9


def test_doubling_rate():
    doubled = RdCurve(tuple(2 * b for b in REF.bitrates), REF.qualities)
    assert bd_rate(REF, doubled) == pytest.approx(100.0, abs=1e-9)


def test_quality_shift():
    up = RdCurve(REF.bitrates, tuple(q + 2 for q in REF.qualities))
    assert bd_quality(REF, up) == pytest.approx(2.0, abs=1e-12)


def linear_curve(a, c, qualities):
    # log10(b) = a + c * q
    return RdCurve(tuple(10 ** (a + c * q) for q in qualities), tuple(qualities))


def test_rate_against_trapezoid_oracle():
    ref = linear_curve(-3.0, 0.1, (30, 34, 38, 42))
    test = linear_curve(-3.2, 0.105, (31, 35, 39, 44))
    lo, hi = 31, 42
    gap = trapezoid_mean(lambda q: (-3.2 + 0.105 * q) - (-3.0 + 0.1 * q), lo, hi)
    expected = (10**gap - 1) * 100
    assert bd_rate(ref, test) == pytest.approx(expected, rel=1e-4)


def test_quality_against_trapezoid_oracle():
    # q = alpha + beta * log10(b), linear in the log-rate domain
    def curve(alpha, beta, rates):
        return RdCurve(tuple(rates), tuple(alpha + beta * math.log10(b) for b in rates))

    ref = curve(35.0, 12.0, (0.5, 1.0, 2.0, 4.0))
    test = curve(36.0, 11.0, (0.7, 1.4, 2.8, 5.0))
    lo, hi = math.log10(0.7), math.log10(4.0)
    expected = trapezoid_mean(lambda x: (36.0 + 11.0 * x) - (35.0 + 12.0 * x), lo, hi)
    assert abs(bd_quality(ref, test) - expected) < 1e-3


def test_curved_fixture_against_dense_integration():
    test = RdCurve((1.1, 2.3, 4.1, 7.5, 9.0), (33.5, 36.0, 39.8, 41.2, 41.9))
    x_r, x_t = REF.log_rates, test.log_rates
    f_r = PchipInterpolator(x_r, REF.qualities)
    f_t = PchipInterpolator(x_t, test.qualities)
    lo, hi = max(x_r[0], x_t[0]), min(x_r[-1], x_t[-1])
    expected = trapezoid_mean(lambda x: f_t(x) - f_r(x), lo, hi)
    assert abs(bd_quality(REF, test) - expected) < 1e-3


@given(
    qs=st.lists(st.floats(20, 60), min_size=4, max_size=8, unique=True).map(sorted),
    start=st.floats(0.1, 2),
    steps=st.lists(st.floats(1.1, 3), min_size=8, max_size=8),
    scale=st.floats(0.5, 2),
)
def test_antisymmetry(qs, start, steps, scale):
    if min(np.diff(qs)) < 1e-3:
        return
    rates = np.cumprod([start] + steps[: len(qs) - 1])
    a = RdCurve(tuple(rates), tuple(qs))
    b = RdCurve(tuple(rates * scale * np.linspace(1, 1.3, len(qs))), tuple(qs))
    x, y = bd_rate(a, b), bd_rate(b, a)
    assert (1 + x / 100) * (1 + y / 100) == pytest.approx(1.0, abs=1e-6)


def test_interpolant_passes_through_points():
    f = PchipInterpolator(REF.log_rates, REF.qualities)
    assert np.allclose(f(REF.log_rates), REF.qualities, rtol=0, atol=1e-12)


def test_curve_validation():
    with pytest.raises(MetricError):
        RdCurve((1, 2, 3), (30, 31, 32))
    with pytest.raises(MetricError):
        RdCurve((1, 2, 2, 3), (30, 31, 32, 33))
    with pytest.raises(MetricError):
        RdCurve((1, 2, 3, 4), (30, 32, 31, 33))
    with pytest.raises(MetricError):
        RdCurve((1, 2, 3, 4), (30, 31, float("nan"), 33))


def test_no_overlap():
    far = RdCurve((1, 2, 3, 4), (50, 51, 52, 53))
    with pytest.raises(MetricError):
        bd_rate(REF, far)


def test_delta_examples():
    assert delta_storage([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert delta_storage([1.0], [1.0, 1.0]) == -0.5
    total = math.fsum(HLS_BITRATES)
    assert abs(delta_storage([0.145, 0.600, 2.400], HLS_BITRATES) - (3.145 / total - 1)) < 1e-12
    assert delta_threads([4] * 12, [8] * 12) == -0.5
    assert delta_threads([4, 4, 8], [8, 8, 8, 8]) == -0.5
    with pytest.raises(MetricError):
        delta_storage([1.0], [])


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=20))
def test_self_delta_is_zero(xs):
    assert delta_storage(xs, xs) == 0.0


def test_report_table_and_mean():
    a = BdReport(-10.0, -5.0, 0.5, 1.0, -0.5, -0.25, None)
    b = BdReport(-20.0, None, 1.5, 3.0, -0.7, -0.75, None)
    m = mean_report([a, b])
    assert m.bdr_psnr == -15.0 and m.bdr_vmaf == -5.0 and m.delta_energy is None
    text = m.table()
    assert "BDR_P [%]" in text and "n/a" in text and "-60.00" in text
