"""Activation-level tables and the losses of the training objective.

Every loss returns its value together with a hand-derived gradient. Sort
positions are treated as constants at the current point.
"""
from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from services.density import FeatureGrid, ModelHead, squared_distances
from services.errors import ContractViolation

DEFAULT_LAMBDA1 = 0.2
DEFAULT_LAMBDA2 = 0.5


@dataclass(frozen=True, eq=False)
class MiningTable:
    """Per-class logits of T activation levels, level 1 being the most active.

    positions[c, m, t] is the row-major grid index holding prototype m's
    (t+1)-th largest likelihood.
    """
    logits: np.ndarray
    positions: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]

    @property
    def levels(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True, eq=False)
class ProxySet:
    """One learnable proxy per class for the Proxy-Anchor loss"""
    vectors: np.ndarray
    margin: float = 0.1
    alpha: float = 32.0

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        if vectors.ndim != 2 or not np.all(np.isfinite(vectors)):
            raise ContractViolation("proxies must be a finite C×raw_dim array")
        object.__setattr__(self, 'vectors', vectors)

    @classmethod
    def initialize(cls, num_classes: int, dim: int, rng: np.random.Generator,
                   margin: float = 0.1, alpha: float = 32.0) -> 'ProxySet':
        return cls(rng.normal(size=(num_classes, dim)), margin=margin, alpha=alpha)

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    def with_vectors(self, vectors: np.ndarray) -> 'ProxySet':
        return replace(self, vectors=vectors)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    mining: float
    aux: float
    total: float
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2

    def as_row(self) -> dict:
        return {'ce': self.ce, 'mining': self.mining, 'aux': self.aux, 'total': self.total}


@dataclass(frozen=True, eq=False)
class AuxResult:
    loss: float
    grad_embeddings: np.ndarray
    grad_proxies: np.ndarray


def _check_label(label: int, num_classes: int) -> None:
    if not 0 <= label < num_classes:
        raise ContractViolation(f"label {label} outside [0, {num_classes})")


def build_mining_table(grid: FeatureGrid, head: ModelHead, levels: int) -> MiningTable:
    if not 1 <= levels <= grid.num_positions:
        raise ContractViolation(
            f"levels must lie in [1, {grid.num_positions}], got {levels}")
    logits = np.empty((head.num_classes, levels))
    positions = np.empty((head.num_classes, head.num_prototypes, levels), dtype=np.int64)

    for c, mix in enumerate(head.classes):
        likelihoods = np.exp(-np.pi * squared_distances(grid.flat, mix.means).T)
        # stable sort of the negated map keeps equal likelihoods in row-major order
        order = np.argsort(-likelihoods, axis=1, kind='stable')[:, :levels]
        ranked = np.take_along_axis(likelihoods, order, axis=1)
        logits[c] = np.sum(mix.priors[:, None] * ranked, axis=0)
        positions[c] = order
    return MiningTable(logits=logits, positions=positions)


def _cross_entropy(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    loss = float(logsumexp(logits) - logits[label])
    grad = softmax(logits)
    grad[label] -= 1.0
    return loss, grad


def ce_loss(table: MiningTable, label: int) -> Tuple[float, np.ndarray]:
    """Cross-entropy over the level-1 logits of every class"""
    _check_label(label, table.num_classes)
    loss, grad_level1 = _cross_entropy(table.logits[:, 0], label)
    grad = np.zeros_like(table.logits)
    grad[:, 0] = grad_level1
    return loss, grad


def mining_loss(table: MiningTable, label: int) -> Tuple[float, np.ndarray]:
    """Average CE of the true class's level-t logits against the wrong classes' level-1 logits"""
    _check_label(label, table.num_classes)
    if table.levels < 2:
        raise ContractViolation("mining requires at least two levels")
    wrong = np.arange(table.num_classes) != label
    grad = np.zeros_like(table.logits)
    total = 0.0

    for level in range(1, table.levels):
        competition = table.logits[:, 0].copy()
        competition[label] = table.logits[label, level]
        loss, grad_competition = _cross_entropy(competition, label)
        total += loss
        grad[wrong, 0] += grad_competition[wrong]
        grad[label, level] += grad_competition[label]

    competitions = table.levels - 1
    return total / competitions, grad / competitions


def _unit_rows(vectors: np.ndarray, name: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ContractViolation(f"cosine similarity is undefined for a zero-norm {name}")
    return vectors / norms[:, None], norms


def _unit_backward(grad_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    radial = np.sum(grad_unit * unit, axis=1, keepdims=True)
    return (grad_unit - radial * unit) / norms[:, None]


def aux_loss(embeddings: np.ndarray, labels: np.ndarray, proxies: ProxySet) -> AuxResult:
    """Proxy-Anchor loss on GAP embeddings with cosine similarity"""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.shape[0] == 0 or labels.shape != (embeddings.shape[0],):
        raise ContractViolation("aux loss needs a non-empty batch with one label per embedding")
    if embeddings.shape[1] != proxies.vectors.shape[1]:
        raise ContractViolation(
            f"embeddings have raw_dim={embeddings.shape[1]}, proxies {proxies.vectors.shape[1]}")
    num_classes = proxies.num_classes
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ContractViolation(f"labels must lie in [0, {num_classes})")

    unit_e, norm_e = _unit_rows(embeddings, 'embedding')
    unit_q, norm_q = _unit_rows(proxies.vectors, 'proxy')
    similarity = unit_e @ unit_q.T
    alpha, delta = proxies.alpha, proxies.margin

    positive = labels[:, None] == np.arange(num_classes)[None, :]
    pos_exp = np.where(positive, np.exp(-alpha * (similarity - delta)), 0.0)
    neg_exp = np.where(positive, 0.0, np.exp(alpha * (similarity + delta)))
    pos_sum = pos_exp.sum(axis=0)
    neg_sum = neg_exp.sum(axis=0)
    present = positive.any(axis=0)
    num_present = int(present.sum())

    loss = np.log1p(pos_sum[present]).sum() / num_present + np.log1p(neg_sum).sum() / num_classes

    grad_similarity = -alpha * pos_exp / (1.0 + pos_sum)[None, :] / num_present
    grad_similarity += alpha * neg_exp / (1.0 + neg_sum)[None, :] / num_classes

    grad_embeddings = _unit_backward(grad_similarity @ unit_q, unit_e, norm_e)
    grad_proxies = _unit_backward(grad_similarity.T @ unit_e, unit_q, norm_q)
    return AuxResult(float(loss), grad_embeddings, grad_proxies)


def total_loss(ce: float, mining: float, aux: float,
               lambda1: float = DEFAULT_LAMBDA1, lambda2: float = DEFAULT_LAMBDA2) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ContractViolation("loss weights must be non-negative")
    return LossBreakdown(
        ce=ce,
        mining=mining,
        aux=aux,
        total=ce + lambda1 * mining + lambda2 * aux,
        lambda1=lambda1,
        lambda2=lambda2
    )


def logits_to_feature_grad(
    table: MiningTable,
    grid: FeatureGrid,
    head: ModelHead,
    grad_logits: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Back-propagate a C×T logit gradient to the grid features and the means.

    Returns ((H̄·W̄)×D feature gradient, C×M×D mean gradient).
    """
    flat = grid.flat
    grad_features = np.zeros_like(flat)
    grad_means = np.zeros((head.num_classes, head.num_prototypes, head.dim))

    for c, mix in enumerate(head.classes):
        if not np.any(grad_logits[c]):
            continue
        positions = table.positions[c]
        diffs = flat[positions] - mix.means[:, None, :]
        likelihoods = np.exp(-np.pi * np.sum(diffs * diffs, axis=-1))
        coefficients = -2.0 * np.pi * grad_logits[c][None, :] * mix.priors[:, None] * likelihoods
        contributions = coefficients[..., None] * diffs
        np.add.at(grad_features, positions.ravel(), contributions.reshape(-1, head.dim))
        grad_means[c] = -contributions.sum(axis=1)
    return grad_features, grad_means
