import json

import numpy as np
import pytest

from vetosgg.backbone import EntityDetection, SceneInstance
from vetosgg.metrics import (MetricError, PredictedGraph, aggregate_report, combined_average, evaluate_graphs,
                             oracle_recall, recall_at_k, render_table)


def scene(n, triplets):
    ent = [EntityDetection((0.0, 0.0, 1.0, 1.0), 0, np.zeros((1, 1, 1)), np.zeros((1, 1, 1))) for _ in range(n)]
    return SceneInstance((10.0, 10.0), ent, triplets)


def graph(s, scores):
    return PredictedGraph(s.ordered_pairs(), np.asarray(scores, dtype=np.float64))


def test_graph_constraint_keeps_one_predicate_per_pair():
    s = scene(2, [(0, 1, 1), (0, 0, 1)])
    g = graph(s, [[0.5, 0.9, 0.1], [0.2, 0.1, 0.0]])
    assert recall_at_k(g, s, 5).hits.tolist() == [0, 1, 0]
    free = recall_at_k(g, s, 5, graph_constraint=False)
    assert free.hits.tolist() == [1, 1, 0]


def test_ties_go_to_lower_pair_then_lower_predicate():
    s = scene(3, [(1, 0, 0)])
    g = graph(s, np.full((6, 2), 0.5))
    # every pair ties, so k=1 keeps pair 0 = (0, 1) with predicate 0
    assert recall_at_k(g, s, 1).hits.sum() == 0
    assert g.global_ranking()[0] == (0, 0, 0.5)
    s2 = scene(3, [(0, 0, 1)])
    assert recall_at_k(graph(s2, np.full((6, 2), 0.5)), s2, 1).hits.sum() == 1


def test_missing_pair_is_an_error():
    s = scene(3, [(2, 0, 1)])
    g = PredictedGraph([(0, 1)], np.ones((1, 2)))
    with pytest.raises(MetricError, match="no prediction"):
        recall_at_k(g, s, 5)


def test_matches_oracle_on_random_scenes():
    rng = np.random.default_rng(0)
    for _ in range(30):
        n = int(rng.integers(2, 6))
        trip = [(int(a), int(rng.integers(0, 4)), int(b)) for a, b in
                [rng.choice(n, 2, replace=False) for _ in range(int(rng.integers(1, 4)))]]
        s = scene(n, trip)
        scores = rng.integers(0, 3, size=(n * (n - 1), 4)) / 2.0
        g = graph(s, scores)
        for k in (1, 3, 50):
            for gc in (True, False):
                a, b = recall_at_k(g, s, k, gc), oracle_recall(g, s, k, gc)
                assert np.array_equal(a.hits, b.hits) and np.array_equal(a.gt, b.gt)


def test_aggregation_rules():
    s1 = scene(2, [(0, 0, 1)])
    s2 = scene(2, [(0, 1, 1), (1, 1, 0)])
    g1 = graph(s1, [[0.9, 0.1, 0.0], [0.0, 0.0, 0.0]])
    g2 = graph(s2, [[0.1, 0.9, 0.0], [0.9, 0.1, 0.0]])
    rep = evaluate_graphs([g1, g2], [s1, s2], freq=[3, 5, 0], ks=[20])
    assert rep.recall[20] == pytest.approx((1.0 + 0.5) / 2)
    # predicate 2 has no ground truth and is excluded, not counted as zero
    assert rep.mean_recall[20] == pytest.approx((1.0 + 0.5) / 2)
    assert rep.predicate_order == [1, 0, 2]
    assert rep.per_predicate_recall[20] == [0.5, 1.0, None]
    assert rep.average[20] == combined_average(rep.recall[20], rep.mean_recall[20])


def test_empty_evaluation_errors():
    with pytest.raises(MetricError):
        aggregate_report([], [1, 2])
    s = scene(2, [])
    with pytest.raises(MetricError, match="no ground-truth"):
        evaluate_graphs([graph(s, np.zeros((2, 2)))], [s], [1, 1], ks=[5])


def test_report_serialisation_and_table():
    s = scene(2, [(0, 0, 1)])
    rep = evaluate_graphs([graph(s, [[1.0, 0.0], [0.0, 1.0]])], [s], [2, 1], ks=[20, 50, 100], fingerprint="abc")
    d = json.loads(rep.to_json())
    assert d["R"]["100"] == 1.0 and d["config_fingerprint"] == "abc"
    text = render_table(rep, "toy")
    assert "R@50 / @100" in text and "100.0 / 100.0" in text


def test_reference_row_average():
    assert round(combined_average(66.3, 24.7), 1) == 45.5
