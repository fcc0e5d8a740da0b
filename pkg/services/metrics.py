"""Classification and out-of-distribution metrics."""
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist
from sklearn.metrics import accuracy_score, confusion_matrix, roc_auc_score

from services.density import ClassMixture
from services.errors import ContractViolation

TPR_TARGET = 0.95
MIN_ID_SCORES = 20
ABSTAIN_PERCENTILE = 5.0


def _finite(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64).ravel()
    if array.size == 0:
        raise ContractViolation(f"{name} must not be empty")
    if not np.all(np.isfinite(array)):
        raise ContractViolation(f"{name} contain non-finite values")
    return array


@dataclass(frozen=True, eq=False)
class ScoreSet:
    """OoD scores of in-distribution and out-of-distribution samples"""
    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'id_scores', _finite(self.id_scores, 'ID scores'))
        object.__setattr__(self, 'ood_scores', _finite(self.ood_scores, 'OoD scores'))

    def swapped(self) -> 'ScoreSet':
        return ScoreSet(id_scores=self.ood_scores, ood_scores=self.id_scores)


def _paired(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ContractViolation(
            f"need equally long, non-empty predictions and labels, "
            f"got {predictions.shape} and {labels.shape}")
    return predictions, labels


def accuracy(predictions, labels) -> float:
    predictions, labels = _paired(predictions, labels)
    return float(accuracy_score(labels, predictions))


def fpr95_threshold(id_scores) -> float:
    """Largest observed ID score that still admits at least 95% of ID samples"""
    scores = np.sort(_finite(id_scores, 'ID scores'))[::-1]
    admitted = math.ceil(TPR_TARGET * scores.size - 1e-9)
    return float(scores[admitted - 1])


def fpr95(scores: ScoreSet) -> float:
    if scores.id_scores.size < MIN_ID_SCORES:
        raise ContractViolation(
            f"FPR95 needs at least {MIN_ID_SCORES} ID scores, got {scores.id_scores.size}")
    threshold = fpr95_threshold(scores.id_scores)
    return float(np.mean(scores.ood_scores >= threshold))


def auroc(scores: ScoreSet) -> float:
    """P(ID score > OoD score) with ties counted one half"""
    y_true = np.concatenate([np.ones(scores.id_scores.size), np.zeros(scores.ood_scores.size)])
    y_score = np.concatenate([scores.id_scores, scores.ood_scores])
    return float(roc_auc_score(y_true, y_score))


def diversity_distance(mix: ClassMixture) -> float:
    """Mean pairwise L2 distance between a class's prototype means"""
    if mix.num_prototypes < 2:
        raise ContractViolation(
            f"diversity distance needs M ≥ 2, class {mix.class_id} has M={mix.num_prototypes}")
    return float(np.mean(pdist(mix.means, metric='euclidean')))


def default_abstain_threshold(id_scores) -> float:
    return float(np.percentile(_finite(id_scores, 'ID scores'), ABSTAIN_PERCENTILE))


def score_histogram(scores: ScoreSet, bins: int = 20) -> pd.DataFrame:
    if bins < 1:
        raise ContractViolation(f"need at least one bin, got {bins}")
    edges = np.histogram_bin_edges(
        np.concatenate([scores.id_scores, scores.ood_scores]), bins=bins)
    id_counts, _ = np.histogram(scores.id_scores, bins=edges)
    ood_counts, _ = np.histogram(scores.ood_scores, bins=edges)
    return pd.DataFrame({
        'bin_left': edges[:-1],
        'bin_right': edges[1:],
        'id_count': id_counts,
        'ood_count': ood_counts,
    })


def confusion_counts(predictions, labels, num_classes: int) -> pd.DataFrame:
    """Long-form confusion counts: true_class, predicted_class, count"""
    predictions, labels = _paired(predictions, labels)
    matrix = confusion_matrix(labels, predictions, labels=np.arange(num_classes))
    rows = [
        {'true_class': t, 'predicted_class': p, 'count': int(matrix[t, p])}
        for t in range(num_classes) for p in range(num_classes)
    ]
    return pd.DataFrame(rows, columns=['true_class', 'predicted_class', 'count'])
