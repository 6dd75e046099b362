from __future__ import annotations

import numpy as np
import pytest

from jccopf.feeder import voltages_batch
from jccopf.scenario import (STEPS_PER_DAY, DayProfile, bundled_feeder, correlation_matrix, generate_days,
                             noon_window, read_series, write_covariance, write_series)


@pytest.fixture(scope="module")
def week():
    return generate_days(DayProfile(), 7, seed=2012)


def test_no_sun_no_solar():
    series = generate_days(DayProfile(solar=np.zeros(STEPS_PER_DAY)), 2, seed=1)
    assert np.all(series.mu == 0)
    assert np.all(series.scale == 0)


def test_midnight_dark_noon_peak(week):
    day = week.mu[:STEPS_PER_DAY]
    pv = np.asarray(DayProfile().pv_nodes) - 1
    assert np.all(day[0] == 0)
    assert np.all(day[144, pv] == day[:, pv].max(axis=0))


def test_train_test_counts(week):
    assert week.days(0, 4).n_steps == 1152
    assert week.days(4, 7).n_steps == 864


def test_reproducible(week):
    again = generate_days(DayProfile(), 7, seed=2012)
    assert again.mu.tobytes() == week.mu.tobytes()
    other = generate_days(DayProfile(), 7, seed=2013)
    assert not np.array_equal(other.mu, week.mu)


def test_csv_round_trip(tmp_path):
    series = generate_days(DayProfile(), 1, seed=4)
    write_series(series, tmp_path / "s.csv")
    write_covariance(series, tmp_path / "c.json")
    again = read_series(tmp_path / "s.csv", tmp_path / "c.json")
    for name in ("mu", "p_load", "q_load", "scale"):
        np.testing.assert_allclose(getattr(again, name), getattr(series, name), rtol=1e-11, atol=0)
    np.testing.assert_array_equal(again.corr, series.corr)


def test_covariance_scales_with_solar(week):
    t_noon, t_morning = 144, 90
    assert week.scale[t_noon] > week.scale[t_morning] > 0
    np.testing.assert_allclose(week.covariance(t_noon), week.scale[t_noon] ** 2 * week.corr)


def test_correlation_decays_with_hops():
    model = bundled_feeder()
    C = correlation_matrix(model, [29, 30, 31], 0.9)
    assert C[28, 29] == pytest.approx(0.9) and C[28, 30] == pytest.approx(0.81)
    live = C[28:31, 28:31]
    assert np.linalg.eigvalsh(live).min() > 0
    assert np.all(C[:28] == 0)


def test_overvoltage_in_noon_window(week):
    model = bundled_feeder()
    window = noon_window()
    hits = 0
    total = 0
    for d in range(week.n_days):
        for s in window:
            t = d * STEPS_PER_DAY + s
            v = voltages_batch(model, week.mu[t], week.p_load[t], week.q_load[t])[0]
            hits += v.max() > 1.05
            total += 1
    assert hits / total >= 0.10


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        generate_days(DayProfile(), 0, seed=1)
    with pytest.raises(ValueError):
        DayProfile(solar=-np.ones(STEPS_PER_DAY))
