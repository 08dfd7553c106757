import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crtreg.targets import (
    ClampWarning,
    TargetError,
    TargetScaler,
    cumulative_crt,
    denormalize_error,
    fit_scaler,
    normalize,
)


def test_cumulative_crt():
    assert cumulative_crt([3600]) == 3600
    assert cumulative_crt([3600, 7200, 9000]) == 9000
    with pytest.raises(TargetError, match="increasing"):
        cumulative_crt([3600, 3000])
    with pytest.raises(TargetError):
        cumulative_crt([])


def test_fit_scaler_min_first_max_last():
    pairs = [(0, 28800), (0, 30000), (1, 50000), (2, 72000), (2, 73980)]
    assert fit_scaler(pairs) == TargetScaler(28800, 73980)
    assert fit_scaler([(0, 100), (2, 900)]) == TargetScaler(100, 900)


def test_fit_scaler_missing_group():
    with pytest.raises(TargetError, match="last recording point"):
        fit_scaler([(0, 100), (1, 200)], first_rp=0, last_rp=2)
    with pytest.raises(TargetError):
        fit_scaler([])


def test_normalize_endpoints():
    s = TargetScaler(28800, 73980)
    assert normalize(s, 28800) == 0.0
    assert normalize(TargetScaler(0, 73980), 73980) == 1.0
    # the denominator is maxP, not maxP - min0
    assert normalize(s, 73980) == pytest.approx((73980 - 28800) / 73980)


def test_eighteen_and_a_half_minutes():
    minutes = denormalize_error(TargetScaler(28800, 73980), 0.015)
    assert minutes == pytest.approx(18.495, abs=1e-12)
    assert abs(minutes - 18.5) <= 0.1


def test_denormalize_linear():
    s = TargetScaler(1000, 50000)
    assert denormalize_error(s, 0.02) == pytest.approx(2 * denormalize_error(s, 0.01))


def test_out_of_range_clamped_with_warning(caplog):
    s = TargetScaler(1000, 5000)
    with pytest.warns(ClampWarning):
        out = s.normalize([500, 6000])
    assert out.tolist() == [0.0, 0.8]
    assert "clamped" in caplog.text


def test_invalid_scaler():
    with pytest.raises(TargetError):
        TargetScaler(500, 500)
    with pytest.raises(TargetError):
        TargetScaler(-1, 500)


def test_scaler_json_round_trip():
    s = TargetScaler(28800.0, 73980.0)
    assert TargetScaler.from_json(s.to_json()) == s


@st.composite
def training_sets(draw):
    n_rps = draw(st.integers(1, 4))
    pairs = []
    for rp in range(n_rps):
        for _ in range(draw(st.integers(1, 5))):
            pairs.append((rp, draw(st.integers(1000 * (rp + 1), 1000 * (rp + 1) + 5000))))
    return pairs


@settings(max_examples=200, deadline=None)
@given(training_sets())
def test_training_targets_in_unit_interval_and_ordered(pairs):
    lo = min(c for rp, c in pairs if rp == 0)
    hi = max(c for rp, c in pairs if rp == max(r for r, _ in pairs))
    if hi <= lo:
        return
    s = fit_scaler(pairs)
    crts = np.array([c for _, c in pairs], dtype=float)
    y = s.normalize(crts, warn=False)
    assert np.all((0 <= y) & (y <= 1))
    inside = (crts >= s.min0) & (crts <= s.maxP)
    order = np.argsort(crts[inside], kind="stable")
    assert np.all(np.diff(y[inside][order]) >= 0)
    assert np.argmin(y[inside]) == np.argmin(crts[inside])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e5), st.floats(1, 1e5), st.floats(0, 1), st.floats(0, 1))
def test_normalize_strictly_increasing(min0, span, a, b):
    s = TargetScaler(min0, min0 + span)
    x, y = min0 + a * span, min0 + b * span
    if x < y:
        assert s.normalize(x) < s.normalize(y) or np.isclose(x, y)
