"""Synthetic planted-part grids used in place of real image datasets."""
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from services.errors import ContractViolation

logger = logging.getLogger(__name__)

GENERATOR_NAME = 'numpy.PCG64'
OOD_LABEL = -1
MAX_CENTER_DRAWS = 100


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Named, versioned generator; streams derived from one seed are independent"""
    return np.random.Generator(np.random.PCG64([seed, stream]))


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 3
    parts_per_class: int = 2
    raw_dim: int = 64
    height: int = 5
    width: int = 5
    noise_sigma: float = 0.1
    part_scale: float = 1.0
    part_strengths: Optional[Tuple[float, ...]] = None
    train_per_class: int = 50
    test_per_class: int = 20
    ood_samples: int = 60
    ood_shift: float = 1.0
    part_centers: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation("a synthetic task needs at least two classes")
        if min(self.parts_per_class, self.raw_dim, self.height, self.width) < 1:
            raise ContractViolation("parts, dimensions and grid sides must be positive")
        if self.noise_sigma < 0 or self.ood_shift < 0:
            raise ContractViolation("noise_sigma and ood_shift must be non-negative")
        if self.part_strengths is not None and len(self.part_strengths) != self.parts_per_class:
            raise ContractViolation(
                f"{len(self.part_strengths)} part strengths for {self.parts_per_class} parts")

    @property
    def strengths(self) -> np.ndarray:
        if self.part_strengths is None:
            return np.ones(self.parts_per_class)
        return np.asarray(self.part_strengths, dtype=np.float64)

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop('part_centers')
        if data['part_strengths'] is not None:
            data['part_strengths'] = list(data['part_strengths'])
        return data


@dataclass(frozen=True, eq=False)
class Split:
    name: str
    raw: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.raw.ndim != 4 or self.labels.shape != (self.raw.shape[0],):
            raise ContractViolation(
                f"split {self.name}: raw {self.raw.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return self.raw.shape[0]

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    spec: SyntheticSpec
    seed: int
    centers: np.ndarray
    train: Split
    test: Split
    ood: Split


def _min_cross_class_distance(centers: np.ndarray) -> float:
    best = np.inf
    for a in range(centers.shape[0]):
        for b in range(a + 1, centers.shape[0]):
            best = min(best, cdist(centers[a], centers[b]).min())
    return float(best)


def _resolve_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    required = 4.0 * spec.noise_sigma
    shape = (spec.num_classes, spec.parts_per_class, spec.raw_dim)
    if spec.part_centers is not None:
        centers = np.asarray(spec.part_centers, dtype=np.float64)
        if centers.shape != shape:
            raise ContractViolation(f"part centers have shape {centers.shape}, expected {shape}")
        if _min_cross_class_distance(centers) < required:
            raise ContractViolation("part centers of different classes are closer than 4·noise_sigma")
        return centers
    for _ in range(MAX_CENTER_DRAWS):
        centers = rng.normal(0.0, spec.part_scale, size=shape)
        if _min_cross_class_distance(centers) >= required:
            return centers
    raise ContractViolation(
        f"could not draw part centers separated by {required:.3f}; raise part_scale or raw_dim")


def _plant(centers: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    grid = rng.normal(0.0, spec.noise_sigma, size=(spec.height, spec.width, spec.raw_dim))
    positions = rng.choice(spec.height * spec.width, size=centers.shape[0], replace=False)
    flat = grid.reshape(-1, spec.raw_dim)
    for strength, center, position in zip(spec.strengths, centers, positions):
        flat[position] = strength * center + rng.normal(0.0, spec.noise_sigma, size=spec.raw_dim)
    return grid


def _labelled_split(name: str, centers: np.ndarray, per_class: int,
                    spec: SyntheticSpec, rng: np.random.Generator) -> Split:
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    raw = np.stack([_plant(centers[label], spec, rng) for label in labels]) if len(labels) else \
        np.empty((0, spec.height, spec.width, spec.raw_dim))
    return Split(name=name, raw=raw, labels=labels.astype(np.int64))


def _ood_split(centers: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> Split:
    samples = []
    for _ in range(spec.ood_samples):
        source = centers[rng.integers(spec.num_classes)]
        directions = rng.normal(size=source.shape)
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        samples.append(_plant(source + spec.ood_shift * directions, spec, rng))
    raw = np.stack(samples) if samples else np.empty((0, spec.height, spec.width, spec.raw_dim))
    return Split(name='ood', raw=raw, labels=np.full(spec.ood_samples, OOD_LABEL, dtype=np.int64))


def generate_dataset(spec: SyntheticSpec, seed: int) -> SyntheticDataset:
    """Train/test splits with planted class parts plus shifted-part OoD samples"""
    if spec.parts_per_class > spec.height * spec.width:
        raise ContractViolation(
            f"a {spec.height}×{spec.width} grid cannot hold {spec.parts_per_class} parts")
    rng = make_rng(seed)
    centers = _resolve_centers(spec, rng)
    train = _labelled_split('train', centers, spec.train_per_class, spec, rng)
    test = _labelled_split('test', centers, spec.test_per_class, spec, rng)
    ood = _ood_split(centers, spec, rng)
    logger.info(
        "Generated %d train, %d test and %d OoD grids (seed %d)",
        len(train), len(test), len(ood), seed)
    return SyntheticDataset(spec=spec, seed=seed, centers=centers, train=train, test=test, ood=ood)
