"""Triplet recall metrics for predicate classification.

A predicted graph scores every ordered entity pair against every predicate.
Under the graph constraint only each pair's best predicate enters the
global ranking. Confidence ties are broken by pair index, then predicate
id, both ascending.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .backbone.scene import SceneInstance

DEFAULT_KS = (20, 50, 100)


class MetricError(ValueError):
    pass


@dataclass
class PredictedGraph:
    pairs: list[tuple[int, int]]
    scores: np.ndarray  # [n_pairs, M] confidence of every predicate for every pair

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.pairs):
            raise MetricError(f"scores of shape {self.scores.shape} do not match {len(self.pairs)} pairs")

    def ranked(self, pair_index: int) -> tuple[np.ndarray, np.ndarray]:
        row = self.scores[pair_index]
        order = np.lexsort((np.arange(row.size), -row))
        return order, row[order]

    def global_ranking(self, graph_constraint: bool = True) -> list[tuple[int, int, float]]:
        """``(pair_index, predicate, confidence)`` best first."""
        n, M = self.scores.shape
        if graph_constraint:
            pred = np.argmax(self.scores, axis=1)  # first maximum, i.e. lowest id on ties
            conf = self.scores[np.arange(n), pred]
            pair = np.arange(n)
        else:
            pair = np.repeat(np.arange(n), M)
            pred = np.tile(np.arange(M), n)
            conf = self.scores.reshape(-1)
        order = np.lexsort((pred, pair, -conf))
        return [(int(pair[i]), int(pred[i]), float(conf[i])) for i in order]


@dataclass
class SceneStats:
    hits: np.ndarray  # [M]
    gt: np.ndarray  # [M]

    @property
    def recall(self) -> float | None:
        n = int(self.gt.sum())
        return None if n == 0 else float(self.hits.sum()) / n


def _check_coverage(pred: PredictedGraph, gt: SceneInstance) -> dict[tuple[int, int], int]:
    lookup = {pair: i for i, pair in enumerate(pred.pairs)}
    for s, p, o in gt.gt_triplets:
        if (s, o) not in lookup:
            raise MetricError(f"ground-truth triplet {(s, p, o)} refers to pair {(s, o)} with no prediction")
    return lookup


def recall_at_k(pred: PredictedGraph, gt: SceneInstance, k: int, graph_constraint: bool = True) -> SceneStats:
    if k < 1:
        raise MetricError(f"k must be >= 1, got {k}")
    lookup = _check_coverage(pred, gt)
    M = pred.scores.shape[1]
    n = len(pred.pairs)
    if graph_constraint:
        best = np.argmax(pred.scores, axis=1)
        conf = pred.scores[np.arange(n), best]
        order = np.lexsort((best, np.arange(n), -conf))[:k]
        top = {(int(i), int(best[i])) for i in order}
    else:
        flat = pred.scores.reshape(-1)
        pair = np.repeat(np.arange(n), M)
        pidx = np.tile(np.arange(M), n)
        order = np.lexsort((pidx, pair, -flat))[:k]
        top = {(int(pair[i]), int(pidx[i])) for i in order}
    hits = np.zeros(M, dtype=np.int64)
    counts = np.zeros(M, dtype=np.int64)
    for s, p, o in gt.gt_triplets:
        counts[p] += 1
        if (lookup[(s, o)], p) in top:
            hits[p] += 1
    return SceneStats(hits, counts)


def oracle_recall(pred: PredictedGraph, gt: SceneInstance, k: int, graph_constraint: bool = True) -> SceneStats:
    """Exhaustive reference: materialise every (pair, predicate, score), sort in plain Python."""
    M = pred.scores.shape[1]
    entries = [(float(pred.scores[i, p]), i, p) for i in range(len(pred.pairs)) for p in range(M)]
    if graph_constraint:
        per_pair = {}
        for e in entries:
            i = e[1]
            if i not in per_pair or (-e[0], e[2]) < (-per_pair[i][0], per_pair[i][2]):
                per_pair[i] = e
        entries = list(per_pair.values())
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    top = entries[:k]
    hits = np.zeros(M, dtype=np.int64)
    counts = np.zeros(M, dtype=np.int64)
    for s, p, o in gt.gt_triplets:
        counts[p] += 1
        for _, i, q in top:
            if pred.pairs[i] == (s, o) and q == p:
                hits[p] += 1
                break
    return SceneStats(hits, counts)


@dataclass
class MetricReport:
    ks: list[int]
    recall: dict[int, float]
    mean_recall: dict[int, float]
    average: dict[int, float]
    per_predicate_recall: dict[int, list[float | None]]  # in descending-frequency order
    predicate_order: list[int]
    num_scenes: int
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ks": self.ks,
            "R": {str(k): self.recall[k] for k in self.ks},
            "mR": {str(k): self.mean_recall[k] for k in self.ks},
            "A": {str(k): self.average[k] for k in self.ks},
            "per_predicate_recall": {str(k): self.per_predicate_recall[k] for k in self.ks},
            "predicate_order": self.predicate_order,
            "num_scenes": self.num_scenes,
            "config_fingerprint": self.config_fingerprint,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def class_recall(self, k: int) -> dict[int, float | None]:
        return dict(zip(self.predicate_order, self.per_predicate_recall[k]))

    def group_mean_recall(self, predicates: Iterable[int], k: int) -> float:
        """Mean per-class recall over ``predicates`` that have ground truth."""
        by_class = self.class_recall(k)
        vals = [by_class[p] for p in predicates if by_class[p] is not None]
        return float(np.mean(vals)) if vals else float("nan")


def combined_average(recall: float, mean_recall: float) -> float:
    return (recall + mean_recall) / 2


def aggregate_report(per_scene: Sequence[dict[int, SceneStats]], freq: Sequence[float],
                     ks: Sequence[int] = DEFAULT_KS, fingerprint: str = "") -> MetricReport:
    """Image-level recall averages scene recalls; mean recall pools hits and counts per class
    and averages over classes that have ground truth."""
    if not per_scene:
        raise MetricError("cannot aggregate an empty evaluation")
    M = len(freq)
    order = sorted(range(M), key=lambda p: (-freq[p], p))
    recall, mrecall, avg, per_pred = {}, {}, {}, {}
    for k in ks:
        scene_r = [s[k].recall for s in per_scene if s[k].recall is not None]
        if not scene_r:
            raise MetricError("evaluation split has no ground-truth triplets")
        hits = np.sum([s[k].hits for s in per_scene], axis=0)
        gt = np.sum([s[k].gt for s in per_scene], axis=0)
        cls = [None if gt[p] == 0 else float(hits[p]) / float(gt[p]) for p in range(M)]
        present = [c for c in cls if c is not None]
        recall[k] = float(np.mean(scene_r))
        mrecall[k] = float(np.mean(present))
        avg[k] = combined_average(recall[k], mrecall[k])
        per_pred[k] = [cls[p] for p in order]
    return MetricReport(list(ks), recall, mrecall, avg, per_pred, order, len(per_scene), fingerprint)


def evaluate_graphs(graphs: Sequence[PredictedGraph], scenes: Sequence[SceneInstance], freq: Sequence[float],
                    ks: Sequence[int] = DEFAULT_KS, graph_constraint: bool = True,
                    fingerprint: str = "") -> MetricReport:
    if len(graphs) != len(scenes):
        raise MetricError(f"{len(graphs)} predicted graphs for {len(scenes)} scenes")
    stats = [{k: recall_at_k(g, s, k, graph_constraint) for k in ks} for g, s in zip(graphs, scenes)]
    return aggregate_report(stats, freq, ks, fingerprint)


def fingerprint(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def render_table(report: MetricReport, label: str = "model", ks: Sequence[int] = (50, 100)) -> str:
    ks = [k for k in ks if k in report.ks] or list(report.ks)
    def cell(d):
        return " / ".join(f"{100 * d[k]:.1f}" for k in ks)
    at = " / ".join(f"@{k}" for k in ks)
    header = f"{'':<16}| R{at:<14}| mR{at:<13}| A{at:<14}"
    row = f"{label:<16}| {cell(report.recall):<15}| {cell(report.mean_recall):<15}| {cell(report.average):<15}"
    return header + "\n" + row + "\n"
