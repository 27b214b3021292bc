import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexihorizon.errors import InvalidInputError, ParseError
from flexihorizon.fdk import FdkParams
from flexihorizon.scoring import (
    HorizonLabel,
    best_horizon,
    class_distribution,
    label_dataset,
    label_from_distances,
    oracle_predictions,
    read_labels,
    step_score,
    write_labels,
)
from flexihorizon.trajgeo import DEFAULT_HORIZONS, ModeSet


def test_step_score():
    assert step_score(3.0, 6) == 0.5
    with pytest.raises(InvalidInputError):
        step_score(1.0, 0)
    with pytest.raises(InvalidInputError):
        step_score(-1.0, 5)


def test_label_picks_lowest_per_step_score():
    lab = label_from_distances("a", (5, 10, 15), [1.0, 1.5, 4.5])
    assert lab.f_gt == 10 and lab.q == pytest.approx(0.15)
    assert lab.one_hot.tolist() == [0, 1, 0] and lab.class_index == 1
    assert [r.q for r in lab.scores] == pytest.approx([0.2, 0.15, 0.3])


def test_ties_go_to_shortest_horizon():
    assert label_from_distances("a", (5, 10, 20), [1.0, 2.0, 4.0]).f_gt == 5
    assert label_from_distances("a", (5, 10), [0.0, 0.0]).f_gt == 5


def test_label_rejects_wrong_length():
    with pytest.raises(InvalidInputError):
        label_from_distances("a", (5, 10), [1.0])


def _exact_preds(gt, horizons, offsets):
    return {f: ModeSet.uniform(np.stack([gt[:f] + o for o in offsets])) for f in horizons}


def test_best_horizon_with_perfect_mode_is_zero():
    gt = np.cumsum(np.ones((30, 2)), axis=0)
    preds = _exact_preds(gt, DEFAULT_HORIZONS, [[0, 0], [5, 5]])
    for kernel in ("frechet", "exact", "ade", "fde"):
        label, rows = best_horizon(preds, gt, kernel=kernel)
        assert label.q == 0 and label.f_gt == 5 and len(rows) == 6


def test_best_horizon_prefers_horizon_with_small_error_per_step():
    gt = np.zeros((30, 2))
    preds = {f: ModeSet.uniform((gt[:f] + [1.0, 0.0])[None]) for f in DEFAULT_HORIZONS}
    # constant offset: distance 1 everywhere so the longest horizon has the smallest d / f
    label, _ = best_horizon(preds, gt, kernel="exact")
    assert label.f_gt == 30 and label.q == pytest.approx(1 / 30)


def test_best_horizon_validation():
    gt = np.zeros((30, 2))
    preds = _exact_preds(gt, (5, 10), [[0, 0]])
    with pytest.raises(InvalidInputError):
        best_horizon(preds, gt, horizons=(5, 10, 15))
    with pytest.raises(InvalidInputError):
        best_horizon(preds, gt[:7])
    with pytest.raises(InvalidInputError):
        best_horizon(preds, gt, kernel="nope")


def test_label_dataset_matches_per_agent(rng):
    gts = [np.cumsum(rng.normal(size=(30, 2)), axis=0) for _ in range(12)]
    preds = oracle_predictions(gts, DEFAULT_HORIZONS, num_modes=3, noise=0.3, seed=4)
    params = FdkParams(beta=50)
    for kernel in ("frechet", "ade", "fde"):
        batch = label_dataset(preds, gts, params, kernel, agent_ids=[f"x{i}" for i in range(12)])
        for i, lab in enumerate(batch):
            single, _ = best_horizon(preds[i], gts[i], params, kernel, agent_id=f"x{i}")
            assert lab == single
            assert [r.q for r in lab.scores] == pytest.approx([r.q for r in single.scores], rel=1e-12)


def test_label_dataset_length_mismatch():
    with pytest.raises(InvalidInputError):
        label_dataset([{}], [])
    assert label_dataset([], []) == []


def test_class_distribution():
    labels = [HorizonLabel(str(i), f, 0.1, (5, 10, 15)) for i, f in enumerate([5, 5, 15])]
    assert class_distribution(labels, (5, 10, 15)) == {5: 2, 10: 0, 15: 1}


def test_oracle_predictions_shapes_and_determinism():
    gts = [np.zeros((30, 2))]
    a = oracle_predictions(gts, (5, 30), num_modes=4, seed=1)
    b = oracle_predictions(gts, (5, 30), num_modes=4, seed=1)
    assert a[0][30].trajectories.shape == (4, 30, 2)
    assert np.array_equal(a[0][5].trajectories, b[0][5].trajectories)


@pytest.mark.parametrize("name", ["labels.jsonl", "labels.jsonl.gz"])
def test_label_roundtrip(tmp_path, name):
    labels = [label_from_distances(f"a{i}", DEFAULT_HORIZONS, np.arange(1, 7) * (i + 0.3)) for i in range(5)]
    path = tmp_path / name
    write_labels(labels, path)
    back = read_labels(path)
    assert back == labels
    assert [r.q for r in back[3].scores] == [r.q for r in labels[3].scores]


def test_label_parse_error_reports_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    write_labels([label_from_distances("a", (5, 10), [1, 1])], path)
    path.write_text(path.read_text() + "{not json\n")
    with pytest.raises(ParseError) as exc:
        read_labels(path)
    assert exc.value.line == 2


def test_gz_label_file_is_really_gzip(tmp_path):
    path = tmp_path / "l.jsonl.gz"
    write_labels([label_from_distances("a", (5,), [1])], path)
    with gzip.open(path, "rt") as fh:
        assert fh.readline().startswith("{")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=6, max_size=6))
def test_label_q_is_minimum_of_table(d):
    lab = label_from_distances("a", DEFAULT_HORIZONS, d)
    qs = [r.q for r in lab.scores]
    assert lab.q == min(qs)
    assert lab.f_gt == DEFAULT_HORIZONS[qs.index(min(qs))]
