"""Class-wise memory banks and the modified EM fit of prototype mixtures."""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import List, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp, xlogy
from sklearn.cluster import kmeans_plusplus
from sklearn.neighbors import NearestNeighbors

from services.density import ClassMixture, FeatureGrid, ModelHead, squared_distances
from services.errors import ContractViolation
from utils.parallel import ordered_map

logger = logging.getLogger(__name__)

# squared distance below which two means count as coincident
COINCIDENT_TOL = 1e-12


class MemoryBank:
    """Per-class FIFO queues of class-relevant feature vectors"""

    def __init__(self, num_classes: int, dim: int, capacity: int):
        if num_classes < 1 or dim < 1 or capacity < 1:
            raise ContractViolation(
                f"invalid bank shape: C={num_classes}, D={dim}, N={capacity}")
        self._dim = dim
        self._capacity = capacity
        self._queues = [deque(maxlen=capacity) for _ in range(num_classes)]
        self._inserted = [0] * num_classes

    @property
    def num_classes(self) -> int:
        return len(self._queues)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def capacity(self) -> int:
        return self._capacity

    def _queue(self, class_id: int) -> deque:
        if not 0 <= class_id < self.num_classes:
            raise ContractViolation(f"class {class_id} outside [0, {self.num_classes})")
        return self._queues[class_id]

    def enqueue(self, class_id: int, vectors: np.ndarray) -> None:
        queue = self._queue(class_id)
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        if vectors.shape[1] != self._dim:
            raise ContractViolation(
                f"bank stores D={self._dim} vectors, got D={vectors.shape[1]}")
        if not np.all(np.isfinite(vectors)):
            raise ContractViolation("refusing to store non-finite features")
        for vector in vectors:
            stored = vector.copy()
            stored.setflags(write=False)
            # deque(maxlen=N) drops the oldest entry on overflow
            queue.append(stored)
            self._inserted[class_id] += 1

    def clear(self, class_id: int) -> None:
        self._queue(class_id).clear()

    def size(self, class_id: int) -> int:
        return len(self._queue(class_id))

    def inserted(self, class_id: int) -> int:
        return self._inserted[class_id]

    def snapshot(self, class_id: int) -> np.ndarray:
        """Copy of a class queue, oldest entry first"""
        queue = self._queue(class_id)
        if not queue:
            return np.empty((0, self._dim))
        return np.stack(queue)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for class_id in range(self.num_classes):
            for slot, vector in enumerate(self._queues[class_id]):
                rows.append([class_id, slot, *vector])
        columns = ['class_id', 'slot_index'] + [f'f{d}' for d in range(self._dim)]
        return pd.DataFrame(rows, columns=columns)


@dataclass(frozen=True)
class EmConfig:
    loops: int = 3
    smoothing_alpha: float = 0.1
    ema_tau: float = 0.99
    m_step_lr: float = 3e-3
    m_step_iters: int = 10
    diversity_enabled: bool = True

    def __post_init__(self):
        if self.loops < 1:
            raise ContractViolation(f"EM needs at least one loop, got {self.loops}")
        if self.smoothing_alpha < 0:
            raise ContractViolation("smoothing_alpha must be non-negative")
        if not 0.0 <= self.ema_tau < 1.0:
            raise ContractViolation(f"ema_tau must lie in [0, 1), got {self.ema_tau}")
        if self.m_step_lr <= 0 or self.m_step_iters < 1:
            raise ContractViolation("M-step needs lr > 0 and at least one iteration")


@dataclass(frozen=True, eq=False)
class Responsibilities:
    raw: np.ndarray
    smoothed: np.ndarray
    fallback_rows: Tuple[int, ...] = ()

    @property
    def weights(self) -> np.ndarray:
        """Smoothed responsibilities, which feed every M-step update"""
        return self.smoothed


@dataclass(frozen=True, eq=False)
class MStepResult:
    means: np.ndarray
    dead_components: Tuple[int, ...] = ()
    aborted: bool = False


@dataclass
class EmReport:
    class_id: int
    log_likelihood_before: float
    log_likelihood_after: float = float('nan')
    dead_components: List[int] = field(default_factory=list)
    aborted_steps: int = 0


def _weights(resp: Union[Responsibilities, np.ndarray]) -> np.ndarray:
    if isinstance(resp, Responsibilities):
        return resp.weights
    return np.asarray(resp, dtype=np.float64)


def _features(bank_slice) -> np.ndarray:
    features = np.asarray(bank_slice, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ContractViolation(f"bank slice must be a non-empty N×D array, got {features.shape}")
    return features


def bank_update(bank: MemoryBank, grid: FeatureGrid, label: int, mix: ClassMixture) -> MemoryBank:
    """Enqueue, for every prototype, the grid feature it explains best"""
    if mix.class_id != label:
        raise ContractViolation(f"mixture of class {mix.class_id} used for label {label}")
    if grid.dim != mix.dim or grid.dim != bank.dim:
        raise ContractViolation(
            f"dimension mismatch: grid D={grid.dim}, mixture D={mix.dim}, bank D={bank.dim}")
    # smallest distance is the largest likelihood, without underflow ties
    winners = np.argmin(squared_distances(grid.flat, mix.means), axis=0)
    bank.enqueue(label, grid.flat[winners])
    return bank


def component_log_weights(features: np.ndarray, mix: ClassMixture) -> np.ndarray:
    """N×M matrix of log(π_m · N(f_n; p_m, Σ))"""
    with np.errstate(divide='ignore'):
        log_priors = np.log(mix.priors)
    return log_priors[None, :] - np.pi * squared_distances(features, mix.means)


def bank_log_likelihood(bank_slice, mix: ClassMixture) -> float:
    """(1/N) Σ_n log Σ_m π_m N(f_n; p_m, Σ)"""
    log_weights = component_log_weights(_features(bank_slice), mix)
    return float(np.mean(logsumexp(log_weights, axis=1)))


def smooth_responsibilities(raw: np.ndarray, alpha: float) -> np.ndarray:
    shifted = np.asarray(raw, dtype=np.float64) + alpha
    return shifted / shifted.sum(axis=1, keepdims=True)


def e_step(bank_slice, mix: ClassMixture, smoothing_alpha: float) -> Responsibilities:
    features = _features(bank_slice)
    if smoothing_alpha < 0:
        raise ContractViolation("smoothing_alpha must be non-negative")
    log_weights = component_log_weights(features, mix)
    log_norm = logsumexp(log_weights, axis=1)
    usable = np.isfinite(log_norm)

    raw = np.zeros_like(log_weights)
    raw[usable] = np.exp(log_weights[usable] - log_norm[usable, None])

    fallback_rows = tuple(int(n) for n in np.flatnonzero(~usable))
    if fallback_rows:
        mass = mix.priors.sum()
        fallback = mix.priors / mass if mass > 0 else np.full(mix.num_prototypes, 1.0 / mix.num_prototypes)
        raw[~usable] = fallback
        logger.warning(
            "Class %d: %d feature(s) underflowed every component, using priors as responsibilities",
            mix.class_id, len(fallback_rows))

    return Responsibilities(
        raw=raw,
        smoothed=smooth_responsibilities(raw, smoothing_alpha),
        fallback_rows=fallback_rows
    )


def m_step_closed_form(resp, bank_slice, previous_means=None) -> MStepResult:
    """Responsibility-weighted averages of the bank features"""
    weights = _weights(resp)
    features = _features(bank_slice)
    if weights.shape[0] != features.shape[0]:
        raise ContractViolation(
            f"{weights.shape[0]} responsibility rows for {features.shape[0]} features")

    counts = weights.sum(axis=0)
    live = counts > 0
    means = np.empty((weights.shape[1], features.shape[1]))
    means[live] = (weights[:, live].T @ features) / counts[live, None]

    dead = tuple(int(m) for m in np.flatnonzero(~live))
    if dead:
        if previous_means is None:
            raise ContractViolation(f"dead components {dead} and no previous means to keep")
        means[~live] = np.asarray(previous_means)[~live]
        logger.warning("Dead EM components %s kept their previous means", dead)
    return MStepResult(means=means, dead_components=dead)


def m_step_objective(means, resp, bank_slice, priors, diversity: bool = True) -> float:
    """Responsibility-weighted log-likelihood minus the pairwise repulsion penalty"""
    weights = _weights(resp)
    features = _features(bank_slice)
    means = np.asarray(means, dtype=np.float64)
    num_prototypes = means.shape[0]

    fit = np.sum(xlogy(weights, np.asarray(priors)[None, :]))
    fit -= np.pi * np.sum(weights * squared_distances(features, means))
    objective = fit / features.shape[0]

    if diversity and num_prototypes > 1:
        kernel = np.exp(-squared_distances(means, means))
        np.fill_diagonal(kernel, 0.0)
        objective -= kernel.sum() / (num_prototypes * (num_prototypes - 1))
    return float(objective)


def m_step_objective_grad(means, resp, bank_slice, diversity: bool = True) -> np.ndarray:
    weights = _weights(resp)
    features = _features(bank_slice)
    means = np.asarray(means, dtype=np.float64)
    num_prototypes = means.shape[0]

    counts = weights.sum(axis=0)
    grad = (2.0 * np.pi / features.shape[0]) * (weights.T @ features - counts[:, None] * means)

    if diversity and num_prototypes > 1:
        distances = squared_distances(means, means)
        kernel = np.exp(-distances)
        np.fill_diagonal(kernel, 0.0)
        diffs = means[:, None, :] - means[None, :, :]
        coincident = np.argwhere(np.triu(distances < COINCIDENT_TOL, k=1))
        if len(coincident):
            # the repulsion vanishes at zero distance; split such pairs along a
            # fixed axis, at the separation where the repulsion peaks
            axis = np.ones(means.shape[1]) / np.sqrt(2.0 * means.shape[1])
            for m, k in coincident:
                diffs[m, k], diffs[k, m] = axis, -axis
                kernel[m, k] = kernel[k, m] = np.exp(-0.5)
        scale = 4.0 / (num_prototypes * (num_prototypes - 1))
        grad += scale * np.einsum('mk,mkd->md', kernel, diffs)
    return grad


def m_step_diverse(
    resp,
    bank_slice,
    mix: ClassMixture,
    lr: float,
    iters: int,
    diversity: bool = True
) -> MStepResult:
    """Gradient ascent on the diversity-regularised M-step objective.

    Responsibilities and priors stay fixed; ascent starts from mix.means.
    """
    if iters < 1 or lr <= 0:
        raise ContractViolation(f"need iters ≥ 1 and lr > 0, got iters={iters}, lr={lr}")
    features = _features(bank_slice)
    means = np.array(mix.means, copy=True)

    for _ in range(iters):
        means = means + lr * m_step_objective_grad(means, resp, features, diversity)
        objective = m_step_objective(means, resp, features, mix.priors, diversity)
        if not np.isfinite(objective) or not np.all(np.isfinite(means)):
            logger.error("Class %d: non-finite M-step objective, keeping previous means", mix.class_id)
            return MStepResult(means=np.array(mix.means, copy=True), aborted=True)
    return MStepResult(means=means)


def blend_priors(prev_priors, raw_priors, tau: float) -> np.ndarray:
    """Exponential moving average τ·prev + (1 − τ)·raw, not renormalised"""
    return tau * np.asarray(prev_priors, dtype=np.float64) + (1.0 - tau) * np.asarray(raw_priors)


def prior_update(resp, prev_priors, tau: float) -> np.ndarray:
    if not 0.0 <= tau < 1.0:
        raise ContractViolation(f"tau must lie in [0, 1), got {tau}")
    raw = _weights(resp).mean(axis=0)
    blended = blend_priors(prev_priors, raw, tau)
    return blended / blended.sum()


def fit_class(features: np.ndarray, mix: ClassMixture, cfg: EmConfig) -> Tuple[ClassMixture, EmReport]:
    """Run cfg.loops E/M alternations on one class queue"""
    if features.shape[0] < mix.num_prototypes:
        raise ContractViolation(
            f"class {mix.class_id} queue holds {features.shape[0]} vectors, "
            f"fewer than M={mix.num_prototypes}; warm-up is incomplete")
    report = EmReport(mix.class_id, bank_log_likelihood(features, mix))

    for _ in range(cfg.loops):
        resp = e_step(features, mix, cfg.smoothing_alpha)
        if cfg.diversity_enabled:
            step = m_step_diverse(resp, features, mix, cfg.m_step_lr, cfg.m_step_iters)
        else:
            step = m_step_closed_form(resp, features, previous_means=mix.means)
        report.dead_components.extend(step.dead_components)
        report.aborted_steps += int(step.aborted)
        # the M-step above used the pre-update priors
        priors = prior_update(resp, mix.priors, cfg.ema_tau)
        mix = ClassMixture(class_id=mix.class_id, means=step.means, priors=priors)

    report.log_likelihood_after = bank_log_likelihood(features, mix)
    return mix, report


def em_fit_with_reports(
    bank: MemoryBank,
    head: ModelHead,
    cfg: EmConfig,
    threads: int = 1,
    skip_short: bool = False
) -> Tuple[ModelHead, List[EmReport]]:
    """Refit every class mixture on a snapshot of its memory queue.

    With skip_short, a class whose queue holds fewer than M vectors keeps its
    mixture and gets no report instead of failing the fit.
    """
    if bank.num_classes != head.num_classes or bank.dim != head.dim:
        raise ContractViolation(
            f"bank (C={bank.num_classes}, D={bank.dim}) does not match "
            f"head (C={head.num_classes}, D={head.dim})")
    snapshots = [bank.snapshot(c) for c in range(head.num_classes)]
    if skip_short:
        ready = [c for c in range(head.num_classes) if len(snapshots[c]) >= head.num_prototypes]
    else:
        ready = list(range(head.num_classes))
    fitted = ordered_map(
        lambda c: fit_class(snapshots[c], head.classes[c], cfg),
        ready,
        threads
    )
    for _, report in fitted:
        logger.debug(
            "EM class %d: bank log-likelihood %.6f -> %.6f",
            report.class_id, report.log_likelihood_before, report.log_likelihood_after)
    mixtures = list(head.classes)
    for mix, _ in fitted:
        mixtures[mix.class_id] = mix
    return head.replace_classes(mixtures), [report for _, report in fitted]


def em_fit(
    bank: MemoryBank,
    head: ModelHead,
    cfg: EmConfig,
    threads: int = 1,
    skip_short: bool = False
) -> ModelHead:
    head, _ = em_fit_with_reports(bank, head, cfg, threads, skip_short)
    return head


def relevance_ratios(
    features: np.ndarray,
    labels: np.ndarray,
    images: np.ndarray,
    neighbours: int
) -> np.ndarray:
    """Per feature: distance to the nearest other-class feature over the distance
    to its k-th nearest same-class feature taken from a different image.

    Parts that recur across a class score high; background positions, which
    every class shares, score near or below one. k is capped at the number of
    other images in the class, and a class with a single image scores inf.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    images = np.asarray(images)
    if not (features.ndim == 2 and labels.shape == images.shape == (features.shape[0],)):
        raise ContractViolation(
            f"features {features.shape}, labels {labels.shape} and images {images.shape} disagree")
    if neighbours < 1:
        raise ContractViolation(f"need at least one neighbour, got {neighbours}")

    ratios = np.full(features.shape[0], np.inf)
    for class_id in np.unique(labels):
        inside = np.flatnonzero(labels == class_id)
        outside = np.flatnonzero(labels != class_id)
        class_images = np.unique(images[inside])
        k = min(neighbours, len(class_images) - 1)
        if k < 1:
            logger.warning("Class %d has a single image; keeping all its features", class_id)
            continue

        d_out = np.full(len(inside), np.inf)
        if len(outside):
            nearest = NearestNeighbors(n_neighbors=1, algorithm='brute').fit(features[outside])
            d_out = nearest.kneighbors(features[inside])[0][:, 0]

        # enough neighbours that k of them survive dropping the query's own image
        per_image = int(np.max(np.bincount(images[inside])))
        same = NearestNeighbors(n_neighbors=min(k + per_image, len(inside)), algorithm='brute')
        dist, ind = same.fit(features[inside]).kneighbors(features[inside])
        foreign = images[inside][ind] != images[inside][:, None]
        d_in = np.array([row[mask][k - 1] for row, mask in zip(dist, foreign)])

        with np.errstate(divide='ignore', invalid='ignore'):
            ratios[inside] = np.where(d_in > 0, d_out / d_in, np.inf)
    return ratios


def seed_mixture(bank_slice, class_id: int, num_prototypes: int, rng: np.random.Generator) -> ClassMixture:
    """k-means++ means drawn from a warm-up queue, with uniform priors"""
    features = _features(bank_slice)
    if features.shape[0] < num_prototypes:
        raise ContractViolation(
            f"class {class_id} queue holds {features.shape[0]} vectors, need {num_prototypes}")
    centers, _ = kmeans_plusplus(
        features,
        n_clusters=num_prototypes,
        random_state=int(rng.integers(2**31 - 1))
    )
    return ClassMixture(
        class_id=class_id,
        means=centers,
        priors=np.full(num_prototypes, 1.0 / num_prototypes)
    )


def seed_head(bank: MemoryBank, num_prototypes: int, rng: np.random.Generator) -> ModelHead:
    return ModelHead(tuple(
        seed_mixture(bank.snapshot(c), c, num_prototypes, rng)
        for c in range(bank.num_classes)
    ))
