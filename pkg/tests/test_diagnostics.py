import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zerosiam.autodiff import ContractError
from zerosiam.diagnostics import (
    CSV_FIELDS,
    StepRecord,
    Trajectory,
    Verdict,
    center_dominance,
    collapse_verdict,
    csv_run_id,
    csv_text,
    drift_vs_ratio,
    moving_average,
    read_csv,
    total_variation,
    trailing_quartile,
    write_csv,
)


def rec(step, ent=1.0, dom=0.2, drift=0.0, div=0.0, acc=0.5):
    return StepRecord(step, acc, ent, ent, 1.0, 0.1, drift, div, dom, 0.0)


def traj(records, C=6, method="zerosiam"):
    return Trajectory(records, C, method)


def test_center_dominance_identical_rows():
    assert center_dominance(np.tile([[1.0, -2.0, 0.5]], (4, 1))) == pytest.approx(1.0, abs=1e-15)


def test_center_dominance_opposite_rows():
    assert center_dominance(np.array([[1.0, 2.0], [-1.0, -2.0]])) == 0.0


def test_center_dominance_example():
    assert center_dominance(np.array([[1.0, 0.0], [0.0, 1.0]])) == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_center_dominance_zero_rows():
    assert center_dominance(np.zeros((3, 4))) == 0.0


def test_center_dominance_tiny_logits():
    u = np.array([[1.7e-157, 0.0], [0.0, 0.0]])
    assert center_dominance(u) == pytest.approx(1.0, abs=1e-15)
    assert center_dominance(0.5 * u) == pytest.approx(1.0, abs=1e-15)


def test_center_dominance_needs_rows():
    with pytest.raises(ContractError):
        center_dominance(np.zeros((0, 3)))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 6)), elements=st.floats(-1e3, 1e3)),
       st.floats(1e-3, 1e3))
def test_center_dominance_scale_invariant_and_bounded(u, c):
    cd = center_dominance(u)
    assert 0.0 <= cd <= 1.0 + 1e-9
    assert abs(center_dominance(c * u) - cd) <= 1e-12


def test_total_variation():
    assert total_variation(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])) == 1.0
    assert total_variation(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])) == 0.0


def test_verdict_one_hot_collapse():
    t = traj([rec(i, ent=0.0, dom=1.0) for i in range(20)])
    assert collapse_verdict(t, 10) is Verdict.COLLAPSED


def test_verdict_stable():
    t = traj([rec(i, ent=1.5, dom=0.2) for i in range(20)])
    assert collapse_verdict(t, 10) is Verdict.STABLE


def test_verdict_inconclusive_when_near_bounds():
    ln6 = math.log(6)
    # entropy low but predictions still spread
    assert collapse_verdict(traj([rec(i, ent=0.01 * ln6, dom=0.5) for i in range(10)]), 5) is Verdict.INCONCLUSIVE
    # entropy between the bound and twice the bound
    assert collapse_verdict(traj([rec(i, ent=0.07 * ln6, dom=0.1) for i in range(10)]), 5) is Verdict.INCONCLUSIVE


def test_verdict_uses_trailing_window_only():
    recs = [rec(i, ent=1.5, dom=0.2) for i in range(10)] + [rec(i, ent=0.0, dom=1.0) for i in range(10, 15)]
    assert collapse_verdict(traj(recs), 5) is Verdict.COLLAPSED
    assert collapse_verdict(traj(recs), 15) is Verdict.INCONCLUSIVE


def test_verdict_window_checked():
    with pytest.raises(ContractError):
        collapse_verdict(traj([rec(0)]), 2)


def test_trajectory_steps_must_increase():
    with pytest.raises(ContractError):
        traj([rec(0), rec(2), rec(1)])
    with pytest.raises(ContractError):
        traj([rec(1)])


def test_drift_vs_ratio_passthrough():
    assert drift_vs_ratio({5.0: traj([rec(0, drift=0.3)])}) == [(5.0, 0.3)]


def test_drift_vs_ratio_sorted():
    out = drift_vs_ratio({math.inf: traj([rec(0, drift=2.0)]), 1.0: traj([rec(0, drift=1.0)])})
    assert out == [(1.0, 1.0), (math.inf, 2.0)]


def test_drift_vs_ratio_mixed_methods():
    with pytest.raises(ContractError):
        drift_vs_ratio({1.0: traj([rec(0)]), 2.0: traj([rec(0)], method="tent")})


def test_drift_zero_with_frozen_identity_predictor():
    from zerosiam.adapt import AdaptState, ZeroSiam, run_stream
    from zerosiam.models import AdaptiveModel
    from zerosiam.streams import SourceTask, StreamSpec, make_stream, sample_task

    task = SourceTask(n_classes=3, input_dim=4)
    pool = sample_task(task, 300, seed=1)
    results = {}
    for rho in (1.0, 10.0, math.inf):
        stream = make_stream(StreamSpec(ordering="imbalanced", rho=rho, n_samples=320, batch_size=32), pool)
        res = run_stream(AdaptState(AdaptiveModel(4, 3)), ZeroSiam(0.05, 0.0), stream)
        assert all(r.pred_frob_drift == 0.0 for r in res.records)
        results[rho] = traj(res.records, 3)
    assert [d for _, d in drift_vs_ratio(results)] == [0.0, 0.0, 0.0]


def test_moving_average_trailing():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1.0, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(moving_average([1, 2, 3], 10), [1.0, 1.5, 2.0])
    with pytest.raises(ValueError):
        moving_average([1.0], 0)


def test_trailing_quartile():
    t = traj([rec(i) for i in range(10)])
    assert [r.step for r in trailing_quartile(t)] == [8, 9]


def test_csv_header_is_fixed(tmp_path):
    path = tmp_path / "t.csv"
    write_csv([rec(0)], path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_FIELDS)


def test_csv_round_trip_with_run_id(tmp_path):
    recs = [rec(0, acc=None), rec(1, ent=1 / 3, drift=0.1 + 0.2)]
    path = tmp_path / "t.csv"
    write_csv(recs, path, run_id="abc123")
    assert csv_run_id(path) == "abc123"
    back = read_csv(path)
    assert [r.__dict__ for r in back] == [r.__dict__ for r in recs]


def test_csv_text_is_deterministic():
    recs = [rec(i, ent=i / 7) for i in range(5)]
    assert csv_text(recs, "x") == csv_text(list(recs), "x")


def test_series_marks_missing_as_nan():
    t = traj([rec(0, acc=None), rec(1, acc=1.0)])
    s = t.series("batch_acc")
    assert math.isnan(s[0]) and s[1] == 1.0
