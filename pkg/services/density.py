"""Gaussian-distributed prototypes and the densities they induce.

Every prototype shares the covariance (1/2π)·I, so the Gaussian normaliser is
exactly one and a likelihood reduces to exp(−π‖f − p‖²), a value in [0, 1].
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp, softmax

from services.errors import ContractViolation, DegeneratePosteriorError

logger = logging.getLogger(__name__)

COVARIANCE_DIAG = 1.0 / (2.0 * np.pi)
PRIOR_TOLERANCE = 1e-9


def _readonly(values) -> np.ndarray:
    array = np.array(values, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """An H̄×W̄ grid of D-dimensional feature vectors"""
    values: np.ndarray

    def __post_init__(self):
        values = _readonly(self.values)
        if values.ndim != 3 or min(values.shape) == 0:
            raise ContractViolation(
                f"feature grid must have shape H×W×D, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ContractViolation("feature grid contains non-finite values")
        object.__setattr__(self, 'values', values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def num_positions(self) -> int:
        return self.height * self.width

    @property
    def flat(self) -> np.ndarray:
        """Row-major (H̄·W̄)×D view of the grid"""
        return self.values.reshape(-1, self.dim)

    def position(self, flat_index: int) -> Tuple[int, int]:
        return divmod(int(flat_index), self.width)


@dataclass(frozen=True, eq=False)
class ClassMixture:
    """One class's prototype means and importance priors.

    Priors produced by EM sum to one; a pruned mixture may keep less mass.
    """
    class_id: int
    means: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        means = _readonly(self.means)
        priors = _readonly(self.priors)
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] < 1:
            raise ContractViolation(
                f"means must have shape M×D with M ≥ 1, got {means.shape}")
        if priors.shape != (means.shape[0],):
            raise ContractViolation(
                f"expected {means.shape[0]} priors, got shape {priors.shape}")
        if not np.all(np.isfinite(means)):
            raise ContractViolation(f"class {self.class_id} has non-finite means")
        if not np.all(np.isfinite(priors)) or np.any(priors < 0):
            raise ContractViolation(
                f"class {self.class_id} priors must be finite and non-negative")
        if priors.sum() > 1.0 + PRIOR_TOLERANCE:
            raise ContractViolation(
                f"class {self.class_id} priors sum to {priors.sum():.12f} > 1")
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'priors', priors)

    @property
    def num_prototypes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def covariance_diag(self) -> float:
        return COVARIANCE_DIAG


@dataclass(frozen=True, eq=False)
class ModelHead:
    """The C class mixtures of a model; the class prior p(c) is uniform"""
    classes: Tuple[ClassMixture, ...]

    def __post_init__(self):
        classes = tuple(self.classes)
        if len(classes) < 2:
            raise ContractViolation(f"a head needs at least two classes, got {len(classes)}")
        shapes = {mix.means.shape for mix in classes}
        if len(shapes) != 1:
            raise ContractViolation(f"class mixtures disagree on M×D: {sorted(shapes)}")
        for index, mix in enumerate(classes):
            if mix.class_id != index:
                raise ContractViolation(
                    f"mixture at position {index} has class_id {mix.class_id}")
        object.__setattr__(self, 'classes', classes)

    @classmethod
    def from_arrays(cls, means: np.ndarray, priors: np.ndarray) -> 'ModelHead':
        """Build a head from (C, M, D) means and (C, M) priors"""
        means = np.asarray(means, dtype=np.float64)
        priors = np.asarray(priors, dtype=np.float64)
        if means.ndim != 3 or priors.shape != means.shape[:2]:
            raise ContractViolation(
                f"means {means.shape} and priors {priors.shape} are incompatible")
        return cls(tuple(
            ClassMixture(class_id=c, means=means[c], priors=priors[c])
            for c in range(means.shape[0])
        ))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_prototypes(self) -> int:
        return self.classes[0].num_prototypes

    @property
    def dim(self) -> int:
        return self.classes[0].dim

    @property
    def class_prior(self) -> float:
        return 1.0 / self.num_classes

    @property
    def means(self) -> np.ndarray:
        return np.stack([mix.means for mix in self.classes])

    @property
    def priors(self) -> np.ndarray:
        return np.stack([mix.priors for mix in self.classes])

    def mixture(self, class_id: int) -> ClassMixture:
        if not 0 <= class_id < self.num_classes:
            raise ContractViolation(f"class {class_id} outside [0, {self.num_classes})")
        return self.classes[class_id]

    def replace_means(self, means: np.ndarray) -> 'ModelHead':
        return ModelHead.from_arrays(means, self.priors)

    def replace_classes(self, updated: Sequence[ClassMixture]) -> 'ModelHead':
        return ModelHead(tuple(updated))


@dataclass(frozen=True)
class Decision:
    """Outcome of classify_or_abstain; label is None when the model abstains"""
    label: Optional[int]
    score: float

    @property
    def abstained(self) -> bool:
        return self.label is None


def _as_vector(values, name: str) -> np.ndarray:
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise ContractViolation(f"{name} must be a vector, got shape {vector.shape}")
    return vector


def gaussian_likelihood(f, mean) -> float:
    """N(f; mean, Σ) with Σ = I/2π, which equals exp(−π‖f − mean‖²)"""
    f = _as_vector(f, 'feature')
    mean = _as_vector(mean, 'mean')
    if f.shape != mean.shape:
        raise ContractViolation(
            f"dimension mismatch: feature has {f.shape[0]}, mean has {mean.shape[0]}")
    diff = f - mean
    return float(np.exp(-np.pi * np.dot(diff, diff)))


def squared_distances(features: np.ndarray, means: np.ndarray) -> np.ndarray:
    """K×M matrix of ‖f_k − p_m‖²"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if features.shape[1] != means.shape[1]:
        raise ContractViolation(
            f"dimension mismatch: features have D={features.shape[1]}, "
            f"prototypes have D={means.shape[1]}")
    return cdist(features, means, metric='sqeuclidean')


def log_likelihood_map(grid: FeatureGrid, mix: ClassMixture) -> np.ndarray:
    distances = squared_distances(grid.flat, mix.means)
    return (-np.pi * distances).T.reshape(mix.num_prototypes, grid.height, grid.width)


def likelihood_map(grid: FeatureGrid, mix: ClassMixture) -> np.ndarray:
    """M×H̄×W̄ likelihood of every grid position under every prototype"""
    return np.exp(log_likelihood_map(grid, mix))


def max_log_likelihoods(grid: FeatureGrid, mix: ClassMixture) -> np.ndarray:
    distances = squared_distances(grid.flat, mix.means)
    return -np.pi * distances.min(axis=0)


def class_conditional(grid: FeatureGrid, mix: ClassMixture) -> float:
    """p(x|c) = Σ_m π_m · (peak of prototype m's likelihood map)"""
    return float(mix.priors @ np.exp(max_log_likelihoods(grid, mix)))


def class_densities(grid: FeatureGrid, head: ModelHead) -> np.ndarray:
    return np.array([class_conditional(grid, mix) for mix in head.classes])


def log_class_densities(grid: FeatureGrid, head: ModelHead) -> np.ndarray:
    """log p(x|c) per class, finite even where p(x|c) underflows"""
    with np.errstate(divide='ignore'):
        return np.array([
            logsumexp(max_log_likelihoods(grid, mix), b=mix.priors)
            for mix in head.classes
        ])


def posterior_from_densities(densities) -> np.ndarray:
    densities = _as_vector(densities, 'densities')
    if not np.all(np.isfinite(densities)) or np.any(densities < 0):
        raise ContractViolation("class densities must be finite and non-negative")
    total = densities.sum()
    if total <= 0.0:
        raise DegeneratePosteriorError("every class density is zero")
    return densities / total


def posterior(grid: FeatureGrid, head: ModelHead) -> np.ndarray:
    """p(c|x) under the uniform class prior"""
    log_densities = log_class_densities(grid, head)
    if np.all(np.isneginf(log_densities)):
        raise DegeneratePosteriorError("every class density is zero")
    return softmax(log_densities)


def ood_score(grid: FeatureGrid, head: ModelHead) -> float:
    """Σ_c p(x|c); low values flag out-of-distribution inputs"""
    return float(np.sum(class_densities(grid, head)))


def decide(densities, threshold: float, log_densities=None) -> Decision:
    """Abstain when the summed density falls strictly below threshold.

    A sample that is not abstained on but has zero density under every class
    cannot be ranked and raises DegeneratePosteriorError.
    """
    if threshold < 0:
        raise ContractViolation(f"threshold must be non-negative, got {threshold}")
    densities = _as_vector(densities, 'densities')
    score = float(np.sum(densities))
    if score < threshold:
        return Decision(label=None, score=score)
    ranking = densities if log_densities is None else np.asarray(log_densities, dtype=np.float64)
    if np.all(ranking == (0.0 if log_densities is None else -np.inf)):
        raise DegeneratePosteriorError("every class density is zero; no class can be ranked")
    # argmax returns the first maximum, so ties go to the lowest class id
    return Decision(label=int(np.argmax(ranking)), score=score)


def classify_or_abstain(grid: FeatureGrid, head: ModelHead, threshold: float) -> Decision:
    return decide(
        class_densities(grid, head),
        threshold,
        log_densities=log_class_densities(grid, head)
    )
