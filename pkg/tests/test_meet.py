import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vetosgg.backbone import ConfigError
from vetosgg.meet import (PredicateGroups, build_groups, even_boundaries, expert_rngs, merge_predictions,
                          multi_expert_loss, retained_probabilities, sample_expert_batches, sampling_weight)
from vetosgg.tensor import Tape, Tensor

ZIPF = [387, 193, 129, 97, 77, 65, 55, 48, 43, 39, 35, 32]


def test_sampling_weight_clamps():
    assert sampling_weight(10, 5) == 1.0
    assert sampling_weight(10, 20) == 0.5
    assert sampling_weight(1, 1000) == 0.01
    assert sampling_weight(5, 0) == 1.0


def test_even_boundaries_larger_first():
    assert even_boundaries(12, 3) == [0, 4, 8, 12]
    assert even_boundaries(50, 4) == [0, 13, 26, 38, 50]


def test_groups_follow_frequency_order():
    freq = [5, 50, 20, 1, 20, 9]
    g = build_groups(freq, 3)
    assert g.sorted_predicates == [1, 2, 4, 5, 0, 3]  # ties broken by id
    assert [g.members(i) for i in range(3)] == [[1, 2], [4, 5], [0, 3]]
    assert g.centre_frequency == [20.0, 9.0, 1.0]
    assert g.group_of(3) == 2 and g.ood_label(0) == 2


def test_weights_and_labels():
    g = build_groups(ZIPF, 3)
    centre = g.centre_frequency[2]
    assert centre == 35.0  # members 43, 39, 35, 32; index floor(4 / 2)
    w = g.weight_vector(2)
    assert w[0] == pytest.approx(35 / 387)
    assert w[8] == pytest.approx(35 / 43)  # members are thinned too when above the centre
    assert w[10] == 1.0 and w[11] == 1.0  # clamped from above
    labels = g.label_vector(0)
    assert labels.tolist() == [0, 1, 2, 3] + [4] * 8


def test_too_many_groups():
    with pytest.raises(ConfigError):
        build_groups(ZIPF, 13)
    with pytest.raises(ConfigError, match="empty"):
        build_groups(ZIPF, 3, [0, 4, 4, 12])


def test_groups_round_trip(tmp_path):
    g = build_groups(ZIPF, 3)
    g.save(tmp_path / "groups.json")
    assert PredicateGroups.load(tmp_path / "groups.json") == g


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5000), min_size=4, max_size=30), st.integers(1, 4))
def test_weights_always_in_range(freq, G):
    g = build_groups(freq, min(G, len(freq)))
    for i in range(g.num_groups):
        w = g.weight_vector(i)
        assert np.all((w >= 0.01) & (w <= 1.0))


def test_sampling_is_seeded_and_per_expert():
    g = build_groups(ZIPF, 3)
    labels = np.arange(12).repeat(20)
    a = sample_expert_batches(labels, g, expert_rngs(0, 5, 3))
    b = sample_expert_batches(labels, g, expert_rngs(0, 5, 3))
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))
    c = sample_expert_batches(labels, g, expert_rngs(0, 6, 3))
    assert any(not np.array_equal(x.indices, y.indices) for x, y in zip(a, c))
    for i, sub in enumerate(a):
        assert np.array_equal(sub.labels, g.label_vector(i)[labels[sub.indices]])


def test_multi_expert_loss_sums_means():
    rng = np.random.default_rng(0)
    l1, l2 = Tensor(rng.normal(size=(3, 5)), True), Tensor(rng.normal(size=(2, 5)), True)
    y1, y2 = np.array([0, 4, 2]), np.array([1, 1])

    def ce(x, y):
        z = x - x.max(axis=1, keepdims=True)
        return float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]))

    with Tape() as tape:
        loss = multi_expert_loss([l1, None, l2], [y1, np.array([], dtype=int), y2])
        tape.backward(loss)
    assert float(loss.data) == pytest.approx(ce(l1.data, y1) + ce(l2.data, y2), rel=1e-12)
    assert l1.grad.shape == (3, 5)
    assert float(multi_expert_loss([None], [np.array([])]).data) == 0.0


def test_retained_probabilities_drop_ood():
    g = build_groups(ZIPF, 3)
    logits = [np.zeros((1, 5)) for _ in range(3)]
    probs = retained_probabilities(logits, g)
    assert probs.shape == (1, 12) and np.allclose(probs, 0.2)
    with pytest.raises(ValueError, match="expected"):
        retained_probabilities([np.zeros((1, 4))] * 3, g)


def test_merge_ranks_expert_winners():
    g = build_groups(ZIPF, 3)
    logits = [np.full((1, 5), -5.0) for _ in range(3)]
    logits[0][0, 1] = 3.0  # predicate 1
    logits[1][0, 0] = 4.0  # predicate 4
    logits[2][0, 4] = 9.0  # OOD of the tail expert: absorbs its mass and is never emitted
    logits[2][0, 2] = 4.0  # predicate 10
    out = merge_predictions(logits, g)[0]
    assert out.predicates[:3].tolist() == [4, 1, 10]
    assert sorted(out.predicates.tolist()) == list(range(12))
    short = merge_predictions(logits, g, extend=False)[0]
    assert len(short.predicates) == 3
