import csv
import json

import numpy as np
import pytest

from mega.eval_report import (
    AccuracyMatrix,
    AggregateReport,
    StageRow,
    aggregate,
    emit_comparison,
    emit_report,
    evaluate_accuracy,
    predict,
)
from mega.losses import seen_mask
from mega.model import ParamSet, forward, init_params


def zero_model():
    """All-zero parameters: every logit ties."""
    return {k: np.zeros_like(v) for k, v in init_params(4, 4, 0, hidden=(3, 3)).arrays().items()}


def test_perfect_logits_give_accuracy_one():
    labels = np.array([2, 0, 1, 1])
    logits = np.eye(3)[labels] * 5.0
    assert np.array_equal(predict(logits, np.ones(3, dtype=bool)), labels)


def test_ties_go_to_lowest_visible_class(tiny_graph):
    params = ParamSet.from_arrays(zero_model())
    mask = seen_mask(4, range(4))
    zeros = np.flatnonzero(tiny_graph.labels == 0)
    threes = np.flatnonzero(tiny_graph.labels == 3)
    assert evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, zeros, tiny_graph.labels, mask) == 1.0
    assert evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, threes, tiny_graph.labels, mask) == 0.0
    assert np.array_equal(predict(np.zeros((2, 4)), seen_mask(4, [1, 3])), [1, 1])


def test_accuracy_matches_hand_count_and_is_order_invariant(tiny_graph):
    params = init_params(4, 4, 3, hidden=(5, 4))
    logits = forward(params, tiny_graph).data
    mask = seen_mask(4, range(4))
    q = np.arange(10)
    hand = sum(int(np.argmax(logits[n]) == tiny_graph.labels[n]) for n in q) / 10
    acc = evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, q, tiny_graph.labels, mask)
    assert acc == hand
    rev = evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, q[::-1], tiny_graph.labels, mask)
    assert rev == acc


def test_accuracy_errors(tiny_graph):
    params = init_params(4, 4, 0)
    with pytest.raises(ValueError, match="empty"):
        evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, [], tiny_graph.labels, seen_mask(4, [0]))
    with pytest.raises(ValueError, match="not visible"):
        evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, [3], tiny_graph.labels, seen_mask(4, [0]))


def matrix(vals):
    return AccuracyMatrix([StageRow(v[0], list(v[1:]), 10) for v in vals])


def test_accuracy_matrix_shape_and_range():
    with pytest.raises(ValueError, match="per-task"):
        AccuracyMatrix([StageRow(0.5, [0.5, 0.5])])
    with pytest.raises(ValueError, match="outside"):
        AccuracyMatrix([StageRow(1.5, [1.0])])


def test_aggregate_single_and_two_point():
    a = matrix([[0.9, 0.9], [0.6, 0.7, 0.5]])
    single = aggregate([a])
    assert single.std == [0.0, 0.0] and single.mean == [0.9, 0.6]
    b = matrix([[0.7, 0.7], [0.2, 0.3, 0.1]])
    two = aggregate([a, b])
    np.testing.assert_allclose(two.mean, [0.8, 0.4], atol=1e-15)
    np.testing.assert_allclose(two.std, [0.1, 0.2], atol=1e-15)
    np.testing.assert_allclose(two.per_task_std[1], [0.2, 0.2], atol=1e-15)
    with pytest.raises(ValueError, match="shapes"):
        aggregate([a, matrix([[0.5, 0.5]])])
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_five_runs_against_statistics_module():
    import statistics

    rng = np.random.default_rng(0)
    runs = [matrix([[x, x], [y, y, y]]) for x, y in rng.uniform(size=(5, 2))]
    agg = aggregate(runs)
    for i in range(2):
        vals = [r.rows[i].overall for r in runs]
        assert abs(agg.mean[i] - statistics.fmean(vals)) < 1e-15
        assert abs(agg.std[i] - statistics.pstdev(vals)) < 1e-12
        assert min(vals) <= agg.mean[i] <= max(vals)


def test_overall_is_weighted_mean_of_tasks(tiny_graph):
    params = init_params(4, 4, 5, hidden=(5, 4))
    tasks = [np.array([0, 4]), np.array([1, 5]), np.array([2, 6])]
    mask = seen_mask(4, range(4))
    per = [evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, t, tiny_graph.labels, mask) for t in tasks]
    overall = evaluate_accuracy(params, tiny_graph.adj, tiny_graph.features, np.concatenate(tasks),
                                tiny_graph.labels, mask)
    assert abs(overall - np.mean(per)) < 1e-12


def report():
    return aggregate([matrix([[0.9, 0.9], [0.6, 0.7, 0.5], [0.5, 0.6, 0.4, 0.5]]),
                      matrix([[0.8, 0.8], [0.5, 0.6, 0.4], [0.4, 0.5, 0.3, 0.4]])], config={"k": 1})


def test_emit_json_round_trip(tmp_path):
    r = report()
    emit_report(r, "json", tmp_path / "r.json")
    back = AggregateReport.from_json(json.loads((tmp_path / "r.json").read_text()))
    assert back.to_json() == r.to_json()
    emit_report(back, "json", tmp_path / "r2.json")
    assert (tmp_path / "r.json").read_bytes() == (tmp_path / "r2.json").read_bytes()


def test_emit_csv_and_plot_data(tmp_path):
    r = report()
    emit_report(r, "csv", tmp_path / "r.csv")
    rows = list(csv.reader((tmp_path / "r.csv").open(encoding="utf-8")))
    assert len(rows) == 3 + 1
    assert rows[1][0] == "Base" and rows[1][1] == "85.00±5.00"
    emit_report(r, "plot-data", tmp_path / "p.txt")
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert len(lines) == 3 and lines[0].split()[0] == "0"
    with pytest.raises(ValueError):
        emit_report(r, "xml", tmp_path / "x")


def test_emit_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(report(), "json", blocker / "r.json")


def test_emit_comparison(tmp_path):
    written = emit_comparison({"MAML": report(), "MEGA": report()}, tmp_path)
    assert (tmp_path / "table.csv").exists() and (tmp_path / "plot-data" / "MEGA.txt").exists()
    header = (tmp_path / "table.csv").read_text().splitlines()[0]
    assert header == "stage,MAML,MEGA"
    assert len(written) == 4
