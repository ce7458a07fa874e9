import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from timeflow.errors import ContractError
from timeflow.evaluation import (
    ResultRow,
    aggregate,
    format_table,
    mae,
    read_results,
    split_errors,
    write_results,
)


def test_mae_examples():
    assert mae([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mae([2.0, 0.0], [0.0, 0.0], [True, False]) == 2.0
    assert mae([2.0, 0.0], [0.0, 0.0], [True, True]) == 1.0
    with pytest.raises(ContractError):
        mae([1.0], [1.0], [False])


vec = arrays(np.float64, 12, elements=st.floats(-10, 10))


@settings(max_examples=60, deadline=None)
@given(vec, vec, vec, arrays(bool, 12))
def test_mae_triangle_and_permutation(p, q, t, mask):
    if not mask.any():
        return
    assert mae(p, t, mask) <= mae(p, q, mask) + mae(q, t, mask) + 1e-12
    perm = np.random.default_rng(0).permutation(12)
    assert mae(p[perm], t[perm], mask[perm]) == pytest.approx(mae(p, t, mask), rel=1e-14)


def test_aggregate_examples():
    assert aggregate([0.4]).std == 0.0
    r = aggregate([0.1, 0.3])
    assert r.mean == pytest.approx(0.2) and r.std == pytest.approx(0.1)
    assert str(r) == "0.200 ± 0.100"
    a = aggregate([0.3, 0.1, 0.7, 0.2])
    b = aggregate([0.7, 0.2, 0.3, 0.1])
    assert (a.mean, a.std) == (b.mean, b.std)
    with pytest.raises(ContractError):
        aggregate([])


def test_split_errors():
    truth_lb = np.array([1.0, 2.0, 3.0, 4.0])
    truth_hz = np.array([5.0, 6.0])
    assert split_errors(truth_lb, truth_lb, np.ones(4, bool), truth_hz, truth_hz) == (0.0, 0.0)
    imp, fc = split_errors(truth_lb + 1, truth_lb, np.ones(4, bool), truth_hz + 0.5, truth_hz)
    assert imp == 0.0 and fc == 0.5
    # the two errors cover disjoint points; recombining matches a whole-window MAE
    pred_lb = np.array([1.0, 2.5, 3.0, 3.0])
    pred_hz = np.array([5.5, 4.0])
    observed = np.array([True, False, True, False])
    imp, fc = split_errors(pred_lb, truth_lb, observed, pred_hz, truth_hz)
    pred = np.concatenate([pred_lb, pred_hz])
    truth = np.concatenate([truth_lb, truth_hz])
    scored = np.concatenate([~observed, [True, True]])
    assert (2 * imp + 2 * fc) / 4 == pytest.approx(mae(pred, truth, scored), rel=1e-14)


def test_results_round_trip(tmp_path):
    rows = [ResultRow("synth", "linear", 0.5, "", 0, 0.25), ResultRow("synth", "timeflow", 0.5, "", 1, 0.125)]
    path = tmp_path / "r.csv"
    write_results(rows, path)
    back = read_results(path)
    assert list(back[0]) == ["dataset", "method", "tau", "horizon", "window_id", "mae"]
    assert float(back[1]["mae"]) == 0.125
    table = format_table([aggregate([0.1, 0.3], dataset="synth", method="linear")])
    assert "0.200 ± 0.100" in table
