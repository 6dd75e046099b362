from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

import oracles
from jccopf.feeder import FeederModel
from jccopf.jcc import (BoundReport, ViolationTable, allocate_epsilon, build_violation_table, compute_bound,
                        count_intersections, estimate_intersection, expansion_partial_sums, load_report,
                        save_report, sensitivity_curve, truncated_expansion)
from jccopf.uncertainty import ForecastModel, sample


def table(hits):
    hits = np.asarray(hits, bool)
    return ViolationTable(hits=hits, ids=tuple(range(1, hits.shape[1] + 1)))


def correlated_table(rng, n_s, n, p=0.3, rho=0.7):
    common = rng.standard_normal((n_s, 1))
    z = np.sqrt(rho) * common + np.sqrt(1 - rho) * rng.standard_normal((n_s, n))
    return table(z > norm.ppf(1 - p))


@pytest.mark.parametrize("m, expected", [(8, 247), (4, 11), (1, 0), (0, 0)])
def test_count_intersections(m, expected):
    assert count_intersections(m) == expected


def test_intersection_example():
    hits = np.zeros((10_000, 2), bool)
    hits[:3000] = True
    t = table(hits)
    assert estimate_intersection(t, [1, 2]) == 0.3
    assert estimate_intersection(t, []) == 1.0


def test_disjoint_intersection_and_unknown_id():
    hits = np.zeros((10, 2), bool)
    hits[:5, 0] = True
    hits[5:, 1] = True
    t = table(hits)
    assert estimate_intersection(t, [1, 2]) == 0.0
    with pytest.raises(IndexError):
        estimate_intersection(t, [3])


def test_packed_counts_match_direct_oracle():
    rng = np.random.default_rng(0)
    t = correlated_table(rng, 777, 5)
    for cols in ([1], [1, 2], [2, 4, 5], [1, 2, 3, 4, 5]):
        assert estimate_intersection(t, cols) == oracles.intersection_frequency(t.hits, [c - 1 for c in cols])


def _one_node_model():
    return FeederModel(R=[[0.02, 0.0], [0.0, 0.02]], B=np.zeros((2, 2)), a=[1.0, 1.0])


def test_zero_variance_tables():
    model = _one_node_model()
    fc = ForecastModel([1.0, 3.0], np.zeros((2, 2)))  # V = 1.02 and 1.06
    t = build_violation_table(model, fc, np.zeros(2), np.zeros(2), 1.05, n_samples=100)
    assert not t.hits[:, 0].any()
    assert t.hits[:, 1].all()


def test_table_column_means_match_resampling():
    model = _one_node_model()
    fc = ForecastModel([2.0, 2.4], np.diag([0.25, 0.25]), seed=7)
    t = build_violation_table(model, fc, np.zeros(2), np.zeros(2), 1.05, n_samples=1000, stream=(0,))
    # independent re-simulation on a different stream
    fresh = sample(fc, 100_000, stream=(9,)).samples
    ref = (1.0 + 0.02 * fresh > 1.05).mean(axis=0)
    sd = np.sqrt(ref * (1 - ref) / 1000)
    assert np.all(np.abs(t.hits.mean(axis=0) - ref) <= 4 * sd + 1e-3)


def test_identical_columns():
    hits = np.zeros((1000, 1), bool)
    hits[:137] = True
    t = table(np.hstack([hits, hits]))
    rep = compute_bound(t, [1, 2], k_max=1)
    assert rep.bounds[1] == pytest.approx(0.137, abs=1e-15)


def test_disjoint_columns_keep_boole():
    hits = np.zeros((1000, 4), bool)
    for j in range(4):
        hits[j * 100:(j + 1) * 100, j] = True
    rep = compute_bound(table(hits), [1, 2, 3, 4])
    assert all(b == rep.bounds[0] for b in rep.bounds)
    assert rep.p_c == 0.0


def test_full_depth_exact_six_columns():
    rng = np.random.default_rng(1)
    t = correlated_table(rng, 5000, 6)
    rep = compute_bound(t, list(range(1, 7)))
    assert rep.k_reached == 3
    assert rep.bounds[-1] == oracles.union_frequency(t.hits)
    assert rep.subsets_evaluated == count_intersections(6)


def test_empty_active_set():
    rep = compute_bound(table(np.ones((10, 2), bool)), [])
    assert rep.bounds == [0.0] and rep.p_c == 0.0
    assert allocate_epsilon(rep, 0.02, "improved") == {}


def test_zero_budget_is_pure_boole():
    t = correlated_table(np.random.default_rng(3), 1000, 4)
    rep = compute_bound(t, [1, 2, 3, 4], time_budget=0)
    assert rep.k_reached == 0 and len(rep.bounds) == 1 and rep.p_c == 0.0
    assert rep.bounds[0] == pytest.approx(sum(rep.marginals))


def test_work_budget_stops_at_stage_boundary():
    t = correlated_table(np.random.default_rng(3), 1000, 8)
    full = compute_bound(t, list(range(1, 9)))
    part = compute_bound(t, list(range(1, 9)), max_subsets=28 + 56)
    assert part.k_reached == 1 and part.subsets_evaluated == 84
    assert part.bounds == full.bounds[:2]
    assert not part.complete and full.complete


def test_stage_commit_vs_raw_truncation():
    hits = np.zeros((1000, 1), bool)
    hits[:100] = True
    t = table(np.repeat(hits, 4, axis=1))
    union = oracles.union_frequency(t.hits)
    assert truncated_expansion(t, [1, 2, 3, 4], 2) < union
    assert compute_bound(t, [1, 2, 3, 4], k_max=1).bounds[1] >= union


def test_partial_sums_follow_expansion_order():
    t = correlated_table(np.random.default_rng(5), 2000, 4)
    sums = expansion_partial_sums(t, [1, 2, 3, 4])
    assert len(sums) == count_intersections(4) + 4
    assert sums[-1] == pytest.approx(oracles.union_frequency(t.hits), abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 60), st.integers(1, 8))))
def test_sandwich_property(hits):
    t = table(hits)
    m = list(range(1, hits.shape[1] + 1))
    rep = compute_bound(t, m)
    union = oracles.union_frequency(hits)
    for k in range(1, len(rep.bounds)):
        assert union <= rep.bounds[k] + 1e-12
        assert rep.bounds[k] <= rep.bounds[k - 1]
    assert rep.bounds[-1] == union
    assert rep.p_c >= 0
    doubles = (hits.sum(axis=1) >= 2).any()
    assert (rep.p_c == 0) == (not doubles)


def test_drop_safety():
    rng = np.random.default_rng(8)
    t = correlated_table(rng, 2000, 5)
    hits = t.hits.copy()
    hits[:, 2] = False
    t = table(hits)
    assert compute_bound(t, [1, 2, 4, 5]).union == oracles.union_frequency(hits)


def _report(active, p_c):
    return BoundReport(active=active, marginals=[0.0] * len(active), bounds=[0.0], k_reached=0, p_c=p_c,
                       union=0.0, n_samples=1)


def test_allocation_examples():
    eight = list(range(29, 37))
    assert set(allocate_epsilon(_report(eight, 0.0), 0.02, "boole").values()) == {0.0025}
    improved = allocate_epsilon(_report(eight, 0.016), 0.02, "improved")
    assert all(v == pytest.approx(0.0045, abs=1e-15) for v in improved.values())
    assert sum(improved.values()) == pytest.approx(0.02 + 0.016, abs=1e-12)
    assert allocate_epsilon(_report(eight, 0.0), 0.02, "improved") == allocate_epsilon(
        _report(eight, 0.0), 0.02, "boole")


def test_allocation_dominance_and_clamp():
    rep = _report([1, 2], 0.03)
    boole = allocate_epsilon(rep, 0.02, "boole")
    improved = allocate_epsilon(rep, 0.02, "improved")
    assert all(improved[k] > boole[k] for k in boole)
    with pytest.warns(RuntimeWarning, match="capped"):
        capped = allocate_epsilon(_report([1, 2], 1.5), 0.4, "improved")
    assert set(capped.values()) == {0.5}
    with pytest.raises(ValueError):
        allocate_epsilon(rep, 0.6, "boole")
    with pytest.raises(ValueError):
        allocate_epsilon(rep, 0.02, "other")


def test_report_json_round_trip(tmp_path):
    t = correlated_table(np.random.default_rng(2), 500, 3)
    rep = compute_bound(t, [1, 2, 3])
    save_report(rep, tmp_path / "r.json", timing=False)
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["wall_ms"] is None
    assert {"active", "marginals", "B", "K", "Pc", "eps_i", "wall_ms", "subsets_evaluated"} <= doc.keys()
    again = load_report(tmp_path / "r.json")
    assert again.bounds == rep.bounds and again.p_c == rep.p_c


def test_sensitivity_curve_rows():
    t = correlated_table(np.random.default_rng(2), 1000, 3)
    rows = sensitivity_curve(t, [1, 2, 3], [100, 1000])
    assert len(rows) == 6
    assert rows[-1]["prob"] == estimate_intersection(t, [2, 3])
