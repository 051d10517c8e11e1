"""Mutually exclusive experts over frequency-sorted predicate groups.

Each expert classifies the predicates of one contiguous band of the
frequency-sorted predicate list plus one out-of-distribution (OOD) slot.
Training samples are included in an expert's subset by a Bernoulli draw
whose probability is the clamped ratio of that group's centre frequency to
the sample's class frequency. At evaluation the OOD slot is dropped and the
experts' in-group winners are ranked against each other.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone.synth import ConfigError
from .tensor import Tensor, add, cross_entropy


def sampling_weight(centre: float, freq: float) -> float:
    """``max(min(centre / freq, 1), 0.01)``; an unseen class (``freq == 0``) samples fully."""
    if freq <= 0:
        return 1.0
    return max(min(centre / freq, 1.0), 0.01)


@dataclass
class PredicateGroups:
    sorted_predicates: list[int]
    boundaries: list[int]
    centre_frequency: list[float]
    in_weights: list[dict[int, float]]
    out_weights: list[dict[int, float]]
    label_maps: list[dict[int, int]]

    @property
    def num_groups(self) -> int:
        return len(self.boundaries) - 1

    @property
    def num_predicates(self) -> int:
        return len(self.sorted_predicates)

    def members(self, g: int) -> list[int]:
        return self.sorted_predicates[self.boundaries[g]:self.boundaries[g + 1]]

    def size(self, g: int) -> int:
        return self.boundaries[g + 1] - self.boundaries[g]

    def ood_label(self, g: int) -> int:
        return self.size(g)

    def group_of(self, predicate: int) -> int:
        pos = self.sorted_predicates.index(predicate)
        return int(np.searchsorted(self.boundaries, pos, side="right") - 1)

    def weight_vector(self, g: int) -> np.ndarray:
        """Inclusion probability of every global predicate id in expert ``g``."""
        w = np.empty(self.num_predicates)
        for p, v in self.in_weights[g].items():
            w[p] = v
        for p, v in self.out_weights[g].items():
            w[p] = v
        return w

    def label_vector(self, g: int) -> np.ndarray:
        """Local label of every global predicate id in expert ``g`` (OOD for outsiders)."""
        labels = np.full(self.num_predicates, self.ood_label(g), dtype=np.int64)
        for p, local in self.label_maps[g].items():
            labels[p] = local
        return labels

    def to_dict(self) -> dict:
        return {
            "sorted_predicates": self.sorted_predicates,
            "boundaries": self.boundaries,
            "centre_frequency": self.centre_frequency,
            "in_weights": [{str(k): v for k, v in w.items()} for w in self.in_weights],
            "out_weights": [{str(k): v for k, v in w.items()} for w in self.out_weights],
            "label_maps": [{str(k): v for k, v in m.items()} for m in self.label_maps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredicateGroups":
        def ints(ms):
            return [{int(k): v for k, v in m.items()} for m in ms]
        groups = cls(list(d["sorted_predicates"]), list(d["boundaries"]), list(d["centre_frequency"]),
                     ints(d["in_weights"]), ints(d["out_weights"]), ints(d["label_maps"]))
        groups.validate()
        return groups

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "PredicateGroups":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        M = self.num_predicates
        if sorted(self.sorted_predicates) != list(range(M)):
            raise ConfigError("sorted_predicates must be a permutation of the predicate ids")
        b = self.boundaries
        if b[0] != 0 or b[-1] != M or any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ConfigError(f"boundaries {b} must increase strictly from 0 to {M}")
        for g in range(self.num_groups):
            members = self.members(g)
            if sorted(self.label_maps[g]) != sorted(members) or \
                    sorted(self.label_maps[g].values()) != list(range(len(members))):
                raise ConfigError(f"label map of group {g} is not a bijection onto [0, {len(members)})")
            weights = list(self.in_weights[g].values()) + list(self.out_weights[g].values())
            if len(weights) != M or not all(0.01 <= w <= 1.0 for w in weights):
                raise ConfigError(f"group {g} weights must cover all predicates and lie in [0.01, 1]")


def even_boundaries(M: int, G: int) -> list[int]:
    """Contiguous sizes differing by at most one, larger groups first."""
    base, extra = divmod(M, G)
    sizes = [base + (1 if g < extra else 0) for g in range(G)]
    return [0] + list(np.cumsum(sizes).tolist())


def build_groups(freq: Sequence[float], G: int, boundaries: Sequence[int] | None = None) -> PredicateGroups:
    M = len(freq)
    if G < 1:
        raise ConfigError(f"need at least one expert, got G={G}")
    if G > M:
        raise ConfigError(f"cannot split {M} predicates into {G} groups")
    order = sorted(range(M), key=lambda p: (-freq[p], p))
    bounds = list(boundaries) if boundaries is not None else even_boundaries(M, G)
    if len(bounds) != G + 1:
        raise ConfigError(f"expected {G + 1} boundaries, got {bounds}")
    centres, ins, outs, maps = [], [], [], []
    for g in range(G):
        members = order[bounds[g]:bounds[g + 1]]
        if not members:
            raise ConfigError(f"group {g} is empty under boundaries {bounds}")
        centre = float(freq[members[len(members) // 2]])
        inside = set(members)
        centres.append(centre)
        ins.append({p: sampling_weight(centre, freq[p]) for p in members})
        outs.append({p: sampling_weight(centre, freq[p]) for p in order if p not in inside})
        maps.append({p: i for i, p in enumerate(members)})
    groups = PredicateGroups(order, bounds, centres, ins, outs, maps)
    groups.validate()
    return groups


@dataclass
class ExpertSubset:
    indices: np.ndarray  # positions in the batch
    labels: np.ndarray  # local labels, OOD = group size


def expert_rngs(seed: int, step: int, G: int) -> list[np.random.Generator]:
    """One independent stream per expert so subsets do not depend on each other."""
    return [np.random.default_rng([seed, 7, g, step]) for g in range(G)]


def sample_expert_batches(labels: Sequence[int], groups: PredicateGroups,
                          rngs: Sequence[np.random.Generator]) -> list[ExpertSubset]:
    labels = np.asarray(labels, dtype=np.int64)
    subsets = []
    for g in range(groups.num_groups):
        keep = rngs[g].random(labels.shape[0]) < groups.weight_vector(g)[labels]
        idx = np.flatnonzero(keep)
        subsets.append(ExpertSubset(idx, groups.label_vector(g)[labels[idx]]))
    return subsets


def multi_expert_loss(expert_logits: Sequence[Tensor | None], expert_labels: Sequence[np.ndarray],
                      sample_weights: Sequence[np.ndarray | None] | None = None) -> Tensor:
    """Sum over experts of the (optionally weighted) mean cross-entropy on each expert's subset."""
    loss = None
    for g, (logits, labels) in enumerate(zip(expert_logits, expert_labels)):
        if logits is None or len(labels) == 0:
            continue
        w = None if sample_weights is None else sample_weights[g]
        term = cross_entropy(logits, labels, w)
        loss = term if loss is None else add(loss, term)
    return loss if loss is not None else Tensor(0.0)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def retained_probabilities(expert_logits: Sequence[np.ndarray], groups: PredicateGroups) -> np.ndarray:
    """``[B, M]`` in-group probabilities indexed by global predicate id.

    Each expert's softmax runs over all of its slots, OOD included; the OOD
    entry is then dropped.
    """
    B = np.asarray(expert_logits[0]).shape[0]
    out = np.zeros((B, groups.num_predicates))
    for g, logits in enumerate(expert_logits):
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (B, groups.size(g) + 1):
            raise ValueError(f"expert {g} logits have shape {logits.shape}, expected {(B, groups.size(g) + 1)}")
        probs = _softmax(logits)[:, :groups.size(g)]
        out[:, groups.members(g)] = probs
    return out


@dataclass
class RankedPrediction:
    predicates: np.ndarray  # global ids, best first
    confidences: np.ndarray


def merge_predictions(expert_logits: Sequence[np.ndarray], groups: PredicateGroups,
                      extend: bool = True) -> list[RankedPrediction]:
    """Per pair: each expert's in-group winner ranked by confidence, then (if ``extend``) the remaining
    in-group classes ranked by retained probability. Ties go to the lower global id."""
    probs = retained_probabilities(expert_logits, groups)
    out = []
    for row in probs:
        cands = []
        for g in range(groups.num_groups):
            lo = groups.boundaries[g]
            local = row[groups.members(g)]
            best = int(np.argmax(local))
            cands.append((float(local[best]), groups.sorted_predicates[lo + best]))
        cands.sort(key=lambda c: (-c[0], c[1]))
        ids = [p for _, p in cands]
        confs = [c for c, _ in cands]
        if extend:
            chosen = set(ids)
            rest = sorted((p for p in range(groups.num_predicates) if p not in chosen), key=lambda p: (-row[p], p))
            ids += rest
            confs += [float(row[p]) for p in rest]
        out.append(RankedPrediction(np.array(ids, dtype=np.int64), np.array(confs)))
    return out
