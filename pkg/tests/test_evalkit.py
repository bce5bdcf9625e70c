import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose
from ivba.errors import InsufficientSpanError
from ivba.evalkit import (
    FeatureRecords,
    TrajectoryLog,
    aggregate,
    compare_table,
    feature_records,
    mdbf,
    relative_pose_error,
    sorting_curve,
    summarize,
    write_curve_csv,
    write_pairs_csv,
)
from ivba.geometry import Pose, exp_map


def straight(n=501, step=0.2):
    return [Pose(np.eye(3), [step * k, 0.0, 0.0]) for k in range(n)]


def make_log(est, ref, odo=None, failures=(), features=None):
    n = len(ref)
    odo = np.arange(n) * 0.2 if odo is None else odo
    return TrajectoryLog(
        frame_ids=list(range(n)), timestamps=list(map(float, odo)),
        estimated_tq=np.array([p.to_tq() for p in est]), reference_tq=np.array([p.to_tq() for p in ref]),
        odometer=odo, failures=list(failures), features=features or {},
    )


def wiggly(rng, n=200):
    out = [Pose.identity()]
    for _ in range(n - 1):
        out.append(out[-1] @ exp_map(np.r_[0.2, rng.normal(0, 0.02, 2), rng.normal(0, 0.01, 3)]))
    return out


def test_identical_trajectories_have_zero_error():
    ref = straight()
    r = relative_pose_error(make_log(ref, ref), 2.0)
    assert len(r.pairs) == 491
    assert r.trans.max() == 0.0 and r.rot.max() == 0.0


def test_rigidly_moved_estimate_has_zero_error(rng):
    ref = wiggly(rng)
    G = random_pose(rng, 5.0, 1.0)
    r = relative_pose_error(make_log([G @ p for p in ref], ref), 2.0)
    assert r.trans.max() < 1e-9 and r.rot.max() < 1e-7


def test_scaled_translation_gives_one_percent():
    ref = straight()
    est = [Pose(p.R, 1.01 * p.t) for p in ref]
    r = relative_pose_error(make_log(est, ref), 2.0)
    np.testing.assert_allclose(r.trans, 0.02, atol=1e-12)


@settings(max_examples=20)
@given(st.integers(0, 2**31))
def test_rpe_gauge_invariance(seed):
    rng = np.random.default_rng(seed)
    ref = wiggly(rng, 60)
    est = [p @ exp_map(rng.normal(0, 0.01, 6)) for p in ref]
    G = random_pose(rng, 3.0, 1.0)
    a = relative_pose_error(make_log(est, ref), 2.0)
    b = relative_pose_error(make_log([G @ p for p in est], [G @ p for p in ref]), 2.0)
    np.testing.assert_allclose(a.trans, b.trans, atol=1e-12)
    np.testing.assert_allclose(a.rot, b.rot, atol=1e-7)


def test_pairs_across_failures_are_excluded():
    ref = straight(101)
    r = relative_pose_error(make_log(ref, ref, failures=[(50, "x")]), 2.0)
    assert r.excluded == 10
    assert all(not (p.i < 50 <= p.j) for p in r.pairs)


def test_summary_examples():
    ref = straight(1501)
    rep = summarize(make_log(ref, ref), 2.0, with_curve=False)
    assert rep.rpe_translation_percent == 0.0 and rep.rpe_rotation_deg_per_m == 0.0
    assert rep.mdbf_text == ">= 300.0" and rep.mdbf_lower_bound
    assert mdbf(300.0, 3) == (100.0, False)
    est = [Pose(p.R, p.t + [0.0, 0.04 * (k // 10 % 2), 0.0]) for k, p in enumerate(ref)]
    rep = summarize(make_log(est, ref), 2.0, with_curve=False)
    assert rep.rpe_translation_percent == pytest.approx(2.0, abs=1e-9)


def test_short_trajectory_is_an_error():
    ref = straight(5)
    with pytest.raises(InsufficientSpanError):
        summarize(make_log(ref, ref), 2.0)


def test_summarize_is_pure(rng):
    ref = wiggly(rng, 80)
    est = [p @ exp_map(rng.normal(0, 0.01, 6)) for p in ref]
    feats = {k: FeatureRecords(np.arange(5), rng.uniform(size=5), rng.uniform(size=5)) for k in range(80)}
    lg = make_log(est, ref, features=feats)
    assert summarize(lg, 2.0, n_shuffles=50).to_json() == summarize(lg, 2.0, n_shuffles=50).to_json()


def test_aggregate_pools_pairs():
    ref = straight(101)
    est = [Pose(p.R, 1.01 * p.t) for p in ref]
    a = make_log(est, ref, failures=[(80, "x")])
    agg = aggregate([a, a], 2.0)
    assert agg.failure_count == 2 and agg.total_distance == pytest.approx(40.0)
    assert agg.n_pairs == 2 * relative_pose_error(a, 2.0).pairs.__len__()
    assert agg.rpe_translation_percent == pytest.approx(1.0)


# -- sorting curves -----------------------------------------------------------------


def test_equal_errors_give_flat_equal_curves():
    c = sorting_curve(np.random.default_rng(0).uniform(size=100), np.full(100, 3.0), n_shuffles=20)
    for curve in (c.introspection, c.ideal, c.random_mean):
        np.testing.assert_allclose(curve, 3.0)


def test_perfect_ranking_matches_ideal():
    e = np.random.default_rng(1).exponential(size=500)
    c = sorting_curve(2 * e + 1, e, n_shuffles=20)
    np.testing.assert_array_equal(c.introspection, c.ideal)


def test_independent_ranking_matches_random():
    rng = np.random.default_rng(2)
    e = rng.exponential(size=5000)
    c = sorting_curve(rng.uniform(size=5000), e, n_shuffles=1000)
    assert np.all(np.abs(c.introspection - c.random_mean) <= 3 * c.random_std + 1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.integers(1, 300))
def test_curve_invariants(seed, n):
    rng = np.random.default_rng(seed)
    e = rng.exponential(size=n)
    c = sorting_curve(rng.uniform(size=n), e, n_shuffles=10)
    assert np.all(np.diff(c.ideal) >= -1e-12)
    for curve in (c.introspection, c.ideal, c.random_mean):
        assert curve[-1] == pytest.approx(e.mean(), rel=1e-12)
    assert c.area(c.ideal) <= c.area(c.introspection) + 1e-12


def test_feature_records_drop_missing_costs():
    ref = straight(20)
    feats = {0: FeatureRecords(np.arange(3), np.array([0.1, np.nan, 0.3]), np.array([1.0, 2.0, 3.0]))}
    c, e = feature_records([make_log(ref, ref, features=feats)])
    np.testing.assert_array_equal(c, [0.1, 0.3])
    np.testing.assert_array_equal(e, [1.0, 3.0])


# -- files ---------------------------------------------------------------------


def test_log_roundtrip_is_byte_exact(tmp_path, rng):
    ref = wiggly(rng, 30)
    est = [p @ exp_map(rng.normal(0, 0.01, 6)) for p in ref]
    feats = {3: FeatureRecords(np.array([4, 9]), np.array([np.nan, 0.25]), np.array([1.5, 0.1]))}
    lg = make_log(est, ref, failures=[(7, "only 3 inliers")], features=feats)
    lg.map_points = {(0, 4): np.array([1.0, 2.0, 3.0])}
    lg.save(tmp_path / "a.json")
    back = TrajectoryLog.load(tmp_path / "a.json")
    back.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert back.failures == [(7, "only 3 inliers")]
    assert np.isnan(back.features[3].c_hat[0])
    with pytest.raises(ValueError):
        TrajectoryLog.from_dict({**json.loads((tmp_path / "a.json").read_text()), "format": "nope"})


def test_log_validation():
    ref = straight(3)
    with pytest.raises(ValueError):
        make_log(ref, ref, odo=np.array([0.0, 0.2, 0.1]))
    with pytest.raises(ValueError):
        make_log(ref[:2], ref)


def test_csv_writers_and_table(tmp_path):
    ref = straight(101)
    est = [Pose(p.R, 1.01 * p.t) for p in ref]
    lg = make_log(est, ref)
    r = relative_pose_error(lg, 2.0)
    write_pairs_csv(tmp_path / "p.csv", r, lg)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "frame_i,frame_j,trans_err_m,rot_err_rad" and len(lines) == len(r.pairs) + 1
    c = sorting_curve(np.arange(10.0), np.arange(10.0), n_shuffles=5)
    write_curve_csv(tmp_path / "c.csv", c.rows())
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "percentile,introspection,ideal,random_mean,random_std"
    a = summarize(lg, 2.0, with_curve=False)
    table = compare_table({"base": a, "same": a})
    assert "trans +0.000 %" in table and "failures +0" in table
    assert table.splitlines()[0].startswith("Method")
