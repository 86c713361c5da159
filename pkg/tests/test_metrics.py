import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qecnn.errors import UndefinedMetricError, ValidationError
from qecnn.metrics import (
    RdPoint,
    ReportRow,
    REPORT_FIELDS,
    bd_rate,
    delta_psnr,
    psnr,
    psnr_from_mse,
    rows_to_csv,
    rows_to_json,
    rsd,
    sequence_psnr,
    sequence_rsd,
    time_control_mae,
)

ANCHOR = [(1000.0, 32.0), (1800.0, 34.5), (3300.0, 37.1), (6200.0, 39.8)]

# QP 32, 20 % target: per-sequence actual time as % of T_max
QP32_20_ACTUALS = [20.11, 20.12, 20.21, 20.18, 20.17, 20.14, 20.15, 20.25, 20.15, 20.23, 20.16,
                   20.11, 20.21, 20.13, 19.98, 20.08, 20.11]


class TestPsnr:
    def test_identical_cap(self):
        a = np.random.default_rng(0).integers(0, 256, (8, 8), dtype=np.uint8)
        assert psnr(a, a) == 100.0

    def test_unit_difference(self):
        a = np.full((8, 8), 100, np.uint8)
        assert psnr(a, a + 1) == pytest.approx(20 * math.log10(255), abs=1e-4)
        assert psnr(a, a + 1) == pytest.approx(48.1308, abs=1e-4)

    def test_mse_two(self):
        assert psnr_from_mse(2.0) == pytest.approx(45.1205, abs=1e-4)

    def test_uint8_no_wraparound(self):
        a = np.zeros((2, 2), np.uint8)
        b = np.full((2, 2), 255, np.uint8)
        assert psnr(a, b) == pytest.approx(0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_delta_and_sequence(self):
        ref = np.full((4, 4), 50, np.uint8)
        before, after = ref + 2, ref + 1
        assert delta_psnr(ref, before, after) == pytest.approx(20 * math.log10(2))
        assert sequence_psnr([ref, ref], [ref + 1, ref + 1]) == pytest.approx(48.1308, abs=1e-4)


def _dense_bd(anchor, test, samples=200001):
    """Independent check: trapezoid integration of the fitted cubics on a fine grid."""
    ra, qa = np.log10([p[0] for p in anchor]), np.array([p[1] for p in anchor])
    rt, qt = np.log10([p[0] for p in test]), np.array([p[1] for p in test])
    lo, hi = max(qa.min(), qt.min()), min(qa.max(), qt.max())
    grid = np.linspace(lo, hi, samples)
    fa, ft = np.poly1d(np.polyfit(qa, ra, 3)), np.poly1d(np.polyfit(qt, rt, 3))
    avg = np.trapezoid(ft(grid) - fa(grid), grid) / (hi - lo)
    return 100 * (10 ** avg - 1)


class TestBdRate:
    def test_identical(self):
        assert bd_rate(ANCHOR, ANCHOR) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_scaling(self):
        test = [(r * 0.9, q) for r, q in ANCHOR]
        assert bd_rate(ANCHOR, test) == pytest.approx(-10.0, abs=1e-4)

    def test_matches_dense_integration(self):
        test = [(950.0, 32.4), (1750.0, 35.1), (3150.0, 37.6), (6000.0, 40.1)]
        assert bd_rate(ANCHOR, test) == pytest.approx(_dense_bd(ANCHOR, test), abs=0.01)

    @given(st.lists(st.floats(0.8, 1.2), min_size=4, max_size=4), st.floats(-1.0, 1.0))
    def test_random_curves_vs_dense(self, scales, shift):
        test = [(r * s, q + shift) for (r, q), s in zip(ANCHOR, scales)]
        got = bd_rate(ANCHOR, test)
        assert got == pytest.approx(_dense_bd(ANCHOR, test), abs=0.01)

    def test_too_few_points(self):
        with pytest.raises(ValidationError):
            bd_rate(ANCHOR[:3], ANCHOR[:3])

    def test_non_monotone(self):
        bad = [(1000.0, 32.0), (1800.0, 31.0), (3300.0, 37.1), (6200.0, 39.8)]
        with pytest.raises(ValidationError):
            bd_rate(ANCHOR, bad)

    def test_point_validation(self):
        with pytest.raises(ValidationError):
            RdPoint(0.0, 30.0)


class TestRsd:
    def test_equal_values(self):
        assert rsd([4, 4, 4]) == 0.0

    def test_two_points(self):
        assert rsd([1, 3]) == 50.0

    def test_zero_mean(self):
        with pytest.raises(UndefinedMetricError):
            rsd([-1, 1])

    def test_sequence_average(self):
        assert sequence_rsd([[1, 3], [2, 2]]) == 25.0

    @given(st.lists(st.floats(0.1, 100), min_size=1, max_size=30), st.floats(0.1, 10))
    def test_scale_invariant(self, values, k):
        assert rsd([v * k for v in values]) == pytest.approx(rsd(values), rel=1e-9, abs=1e-9)


class TestMae:
    def test_exact(self):
        assert time_control_mae(20.0, 20.0, 100.0) == 0.0

    def test_single(self):
        assert time_control_mae(19.04, 20.0, 100.0) == pytest.approx(0.96)

    def test_table_column(self):
        assert time_control_mae(QP32_20_ACTUALS, 20.0, 100.0) == pytest.approx(0.149, abs=1e-3)

    def test_bad_tmax(self):
        with pytest.raises(ValidationError):
            time_control_mae(1.0, 1.0, 0.0)


def test_report_rows():
    rows = [ReportRow("a", 32, "I", 30.0, 30.5, 0.5), ReportRow("b", 37, "P")]
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == ",".join(REPORT_FIELDS)
    assert text.splitlines()[2].startswith("b,37,P,,")
    import json

    assert json.loads(rows_to_json(rows))[0]["delta_psnr"] == 0.5
