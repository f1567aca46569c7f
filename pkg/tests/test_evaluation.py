import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from froda.data import Dataset, OpenSetProtocol, SyntheticSpec, generate_synthetic
from froda.evaluation import (
    METRICS,
    aggregate,
    format_accuracy_table,
    parse_grid,
    run_experiment,
    run_once,
    score,
    sweep_epsilon,
    write_report,
    write_sweep_csv,
)
from froda.inference import ClassifierSpec, assign_known_unknown
from froda.model import HyperParams, fit_auto

SMALL = SyntheticSpec(D=20, d=3, C=2, n_per_class_source=10, n_per_class_target=6, n_unknown_target=6)
FAST = HyperParams(outer_max_iter=20)


def test_score_perfect():
    s = score([1, 2, 3, 3], [1, 2, 3, 3], 2)
    assert s.overall_accuracy == s.class_avg_accuracy == s.unknown_f1 == 1.0


def test_score_hand_counted():
    s = score([1, 2, 2, 3], [1, 1, 2, 3], 2)
    assert s.overall_accuracy == 0.75
    assert s.per_class == {1: 0.5, 2: 1.0, 3: 1.0}
    assert s.class_avg_accuracy == pytest.approx(2.5 / 3, abs=1e-12)
    assert round(s.class_avg_accuracy, 4) == 0.8333


def test_score_empty_class_left_out():
    s = score([1, 1, 3], [1, 1, 3], 2)
    assert s.empty_classes == [2]
    assert 2 not in s.per_class and s.class_avg_accuracy == 1.0


def test_score_unknown_detection():
    s = score([3, 3, 1, 1], [3, 1, 3, 1], 2)
    assert s.unknown_precision == 0.5 and s.unknown_recall == 0.5 and s.unknown_f1 == 0.5
    none = score([1, 2], [1, 2], 2)
    assert none.unknown_precision == none.unknown_recall == 1.0


def test_score_errors():
    with pytest.raises(ValueError):
        score([1, 2], [1], 2)
    with pytest.raises(ValueError, match="outside"):
        score([1, 4], [1, 2], 2)
    with pytest.raises(ValueError, match="outside"):
        score([1, 1], [0, 1], 2)


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=40), st.randoms())
def test_score_permutation_invariant(pairs, rnd):
    pred, truth = map(np.array, zip(*pairs))
    perm = list(range(len(pairs)))
    rnd.shuffle(perm)
    a, b = score(pred, truth, 3), score(pred[perm], truth[perm], 3)
    assert a == b
    for v in (a.overall_accuracy, a.class_avg_accuracy, a.unknown_f1):
        assert 0.0 <= v <= 1.0


def test_run_once_synthetic():
    sc = generate_synthetic(SMALL)
    res, model, pred = run_once(sc.as_split(), "froda", FAST, ClassifierSpec())
    assert res.scores.class_avg_accuracy >= 0.9
    assert res.n_outer_iters == model.n_iter
    assert res.per_iter_seconds * res.n_outer_iters == pytest.approx(res.fit_seconds, rel=0.2)


def test_experiment_single_seed_std_zero():
    rep = run_experiment("froda", FAST, ClassifierSpec(), [0], synthetic=SMALL)
    assert set(rep["summary"]) == set(METRICS)
    assert all(v["std"] == 0.0 for v in rep["summary"].values())
    assert rep["hyperparams"]["alpha"] == 0.1


def test_experiment_deterministic():
    a = run_experiment("froda", FAST, ClassifierSpec(), [0, 1], synthetic=SMALL)
    b = run_experiment("froda", FAST, ClassifierSpec(), [0, 1], synthetic=SMALL)
    for key in METRICS[:5]:
        assert a["summary"][key] == b["summary"][key]
    assert [r["overall_accuracy"] for r in a["runs"]] == [r["overall_accuracy"] for r in b["runs"]]


def test_experiment_parallel_matches_serial():
    a = run_experiment("froda", FAST, ClassifierSpec(), [0, 1], synthetic=SMALL, jobs=1)
    b = run_experiment("froda", FAST, ClassifierSpec(), [0, 1], synthetic=SMALL, jobs=2)
    for key in METRICS[:5]:
        assert a["summary"][key] == b["summary"][key]


def test_experiment_needs_seeds():
    with pytest.raises(ValueError):
        run_experiment("froda", FAST, seeds=[], synthetic=SMALL)


def test_experiment_on_protocol_data():
    # class 1..3 known, class 4 source-unknown, class 5 target-unknown
    sc = generate_synthetic(SyntheticSpec(C=5, n_per_class_source=30, n_per_class_target=15, n_unknown_target=0))
    src = Dataset(sc.Xs, sc.ys)
    tgt = Dataset(sc.Xt, sc.yt)
    proto = OpenSetProtocol((1, 2, 3), (4,), (5,), per_class_source=20, per_class_target=10)
    rep = run_experiment("dfroda_u", FAST, ClassifierSpec(), [0], source=src, target=tgt, protocol=proto)
    assert rep["runs"][0]["per_class"].keys() == {"1", "2", "3", "4"}


def test_aggregate_sample_std():
    class R:
        def __init__(self, v):
            self.v = v

        def flat(self):
            return {k: self.v for k in METRICS}

    out = aggregate([R(1.0), R(2.0), R(3.0)])
    assert out["overall_accuracy"] == {"mean": 2.0, "std": 1.0}
    assert aggregate([R(0.5), R(0.5)])["unknown_f1"]["std"] == 0.0


def test_write_report(tmp_path):
    rep = run_experiment("froda", FAST, ClassifierSpec(), [0], synthetic=SMALL)
    jpath, cpath = write_report(rep, tmp_path / "out")
    assert json.loads(jpath.read_text())["variant"] == "froda"
    rows = list(csv.reader(cpath.open()))
    assert rows[0] == ["metric", "mean", "std"]
    assert [r[0] for r in rows[1:]] == list(METRICS)


@pytest.fixture(scope="module")
def fitted():
    sc = generate_synthetic()
    return sc, fit_auto(sc.Xs, sc.Xt, sc.ys, "froda", HyperParams())


def test_sweep_extremes_and_monotone(fitted):
    sc, m = fitted
    rows = sweep_epsilon(m, [0.0, 0.1, 0.2, 0.5, 1.0, np.inf], sc.yt)
    counts = [r[2] for r in rows]
    assert counts == sorted(counts)
    assert counts[0] == 0 and counts[-1] == sc.yt.size
    # everything unknown: each known class has recall 0, unknown recall 1
    assert rows[-1][1] == pytest.approx(0.25)


@given(st.lists(st.floats(0, 5), min_size=1, max_size=12))
def test_sweep_count_monotone_property(fitted, grid):
    sc, m = fitted
    grid = sorted(grid)
    counts = [assign_known_unknown(m, e).n_unknown for e in grid]
    assert counts == sorted(counts)


def test_sweep_csv(tmp_path, fitted):
    sc, m = fitted
    rows = sweep_epsilon(m, [0.1, 0.2], sc.yt)
    write_sweep_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "epsilon,class_avg_accuracy" and len(lines) == 3
    with pytest.raises(ValueError):
        sweep_epsilon(m, [], sc.yt)


def test_parse_grid():
    assert parse_grid("0.05:0.05:1.0") == [round(0.05 * i, 12) for i in range(1, 21)]
    assert parse_grid("0.1,0.2,0.5") == [0.1, 0.2, 0.5]
    for bad in ("", "1:0:2", "1:2", "a,b"):
        with pytest.raises(ValueError):
            parse_grid(bad)


@given(st.floats(0, 1), st.integers(1, 8))
def test_aggregate_std_zero_for_equal_runs(value, n):
    class R:
        def flat(self):
            return {k: value for k in METRICS}

    out = aggregate([R() for _ in range(n)])
    assert all(v["std"] == 0.0 and v["mean"] == value for v in out.values())


def test_format_accuracy_table():
    text = format_accuracy_table({"FRODA": {"A->D": 0.88, "A->W": 0.7874}}, ["A->D", "A->W", "W->A"])
    assert text.splitlines() == ["Method | A->D | A->W | W->A", "FRODA | 88.0 | 78.7 | -"]
