import numpy as np
import pytest

from services.density import ClassMixture
from services.errors import ContractViolation
from services.metrics import (
    ScoreSet, accuracy, auroc, confusion_counts, default_abstain_threshold, diversity_distance,
    fpr95, fpr95_threshold, score_histogram,
)

ID_RANGE = np.arange(1.0, 101.0)


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0
    assert accuracy([0, 1, 1, 1], [0, 1, 2, 1]) == 0.75
    with pytest.raises(ContractViolation):
        accuracy([0, 1], [0])
    with pytest.raises(ContractViolation):
        accuracy([], [])


def test_fpr95_hand_enumerated_quantile():
    assert fpr95_threshold(ID_RANGE) == 6.0
    assert fpr95(ScoreSet(ID_RANGE, [4.5])) == 0.0
    assert fpr95(ScoreSet(ID_RANGE, [6.5])) == 1.0
    assert fpr95(ScoreSet(ID_RANGE, [6.0])) == 1.0


def test_fpr95_examples():
    assert fpr95(ScoreSet(np.ones(40), np.zeros(40))) == 0.0
    assert fpr95(ScoreSet(ID_RANGE, ID_RANGE)) == pytest.approx(0.95)


def test_fpr95_needs_enough_id_scores():
    with pytest.raises(ContractViolation):
        fpr95(ScoreSet(np.ones(19), np.zeros(3)))
    with pytest.raises(ContractViolation):
        ScoreSet(np.ones(20), [])


def test_auroc_examples():
    assert auroc(ScoreSet([2.0, 4.0], [1.0, 3.0])) == 0.75
    assert auroc(ScoreSet([5.0, 6.0], [1.0, 2.0])) == 1.0
    assert auroc(ScoreSet([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])) == 0.5


def test_auroc_matches_pair_count(rng):
    for _ in range(100):
        ids = rng.integers(0, 6, size=int(rng.integers(1, 8))).astype(float)
        oods = rng.integers(0, 6, size=int(rng.integers(1, 8))).astype(float)
        pairs = [1.0 if a > b else 0.5 if a == b else 0.0 for a in ids for b in oods]
        assert auroc(ScoreSet(ids, oods)) == pytest.approx(np.mean(pairs), abs=1e-12)


def test_auroc_swap_sums_to_one(rng):
    for _ in range(20):
        scores = ScoreSet(rng.integers(0, 4, size=7).astype(float), rng.integers(0, 4, size=5).astype(float))
        assert auroc(scores) + auroc(scores.swapped()) == pytest.approx(1.0, abs=1e-12)


def test_metrics_are_invariant_under_monotone_transforms(rng):
    ids, oods = rng.normal(1.0, 1.0, size=40), rng.normal(size=30)

    def transform(x):
        return x ** 3 + 2 * x + 7

    base, moved = ScoreSet(ids, oods), ScoreSet(transform(ids), transform(oods))
    assert auroc(moved) == pytest.approx(auroc(base), abs=1e-12)
    assert fpr95(moved) == fpr95(base)


def test_diversity_distance_examples():
    assert diversity_distance(ClassMixture(0, np.array([[0.0, 0.0], [0.0, 1.0]]), np.array([0.5, 0.5]))) == 1.0
    assert diversity_distance(ClassMixture(0, np.ones((3, 2)), np.full(3, 1 / 3))) == 0.0
    with pytest.raises(ContractViolation):
        diversity_distance(ClassMixture(0, np.ones((1, 2)), np.ones(1)))


def test_diversity_distance_matches_pair_loop(rng):
    for _ in range(100):
        m = int(rng.integers(2, 6))
        means = rng.normal(size=(m, 3))
        pairs = [np.sqrt(np.sum((means[a] - means[b]) ** 2)) for a in range(m) for b in range(a + 1, m)]
        mix = ClassMixture(0, means, np.full(m, 1 / m))
        assert diversity_distance(mix) == pytest.approx(np.mean(pairs), abs=1e-12)


def test_histogram_counts_sum_to_samples(rng):
    scores = ScoreSet(rng.uniform(size=33), rng.uniform(size=17))
    frame = score_histogram(scores, bins=7)
    assert len(frame) == 7
    assert frame['id_count'].sum() == 33
    assert frame['ood_count'].sum() == 17
    assert np.all(frame['bin_left'] < frame['bin_right'])
    with pytest.raises(ContractViolation):
        score_histogram(scores, bins=0)


def test_default_abstain_threshold_is_fifth_percentile():
    assert default_abstain_threshold(np.arange(101.0)) == pytest.approx(5.0)


def test_confusion_counts_long_form():
    frame = confusion_counts([0, 1, 1, 2], [0, 1, 2, 2], num_classes=3)
    assert len(frame) == 9
    counts = frame.set_index(['true_class', 'predicted_class'])['count']
    assert counts[(2, 1)] == 1
    assert counts[(2, 2)] == 1
    assert counts[(0, 0)] == 1
    assert frame['count'].sum() == 4
