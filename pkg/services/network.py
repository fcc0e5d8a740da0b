"""Position-wise feature network: an affine backbone and two affine add-on layers."""
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from services.density import FeatureGrid
from services.errors import ContractViolation, NonFiniteLossError

BACKBONE_PARAMS = ('backbone.weight', 'backbone.bias')
ADD_ON_PARAMS = ('add_on.0.weight', 'add_on.0.bias', 'add_on.1.weight', 'add_on.1.bias')
PARAMETER_NAMES = BACKBONE_PARAMS + ADD_ON_PARAMS


@dataclass(frozen=True, eq=False)
class TinyNet:
    params: Dict[str, np.ndarray]

    def __post_init__(self):
        missing = set(PARAMETER_NAMES) - set(self.params)
        if missing:
            raise ContractViolation(f"network is missing parameters {sorted(missing)}")
        params = {name: np.array(self.params[name], dtype=np.float64, copy=True)
                  for name in PARAMETER_NAMES}
        raw_dim = params['backbone.weight'].shape[1]
        dim = params['add_on.1.weight'].shape[0]
        expected = {
            'backbone.weight': (raw_dim, raw_dim),
            'backbone.bias': (raw_dim,),
            'add_on.0.weight': (dim, raw_dim),
            'add_on.0.bias': (dim,),
            'add_on.1.weight': (dim, dim),
            'add_on.1.bias': (dim,),
        }
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ContractViolation(f"{name} has shape {params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(params[name])):
                raise ContractViolation(f"{name} has non-finite entries")
        object.__setattr__(self, 'params', params)

    @classmethod
    def identity(cls, raw_dim: int, dim: int) -> 'TinyNet':
        return cls({
            'backbone.weight': np.eye(raw_dim),
            'backbone.bias': np.zeros(raw_dim),
            'add_on.0.weight': np.eye(dim, raw_dim),
            'add_on.0.bias': np.zeros(dim),
            'add_on.1.weight': np.eye(dim),
            'add_on.1.bias': np.zeros(dim),
        })

    @classmethod
    def initialize(cls, raw_dim: int, dim: int, rng: np.random.Generator,
                   noise: float = 0.01) -> 'TinyNet':
        """Identity layers perturbed by N(0, noise²) weights"""
        base = cls.identity(raw_dim, dim).params
        return cls({
            name: value + noise * rng.normal(size=value.shape) if name.endswith('weight') else value
            for name, value in base.items()
        })

    @property
    def raw_dim(self) -> int:
        return self.params['backbone.weight'].shape[1]

    @property
    def dim(self) -> int:
        return self.params['add_on.1.weight'].shape[0]

    @property
    def num_parameters(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.params.items()}

    def with_parameters(self, params: Dict[str, np.ndarray]) -> 'TinyNet':
        return TinyNet(params)

    def step(self, grads: Dict[str, np.ndarray], lr_backbone: float, lr_add_on: float) -> 'TinyNet':
        """One plain gradient-descent update"""
        with np.errstate(over='ignore', invalid='ignore'):
            updated = {
                name: value - (lr_backbone if name in BACKBONE_PARAMS else lr_add_on) * grads[name]
                for name, value in self.params.items()
            }
        broken = [name for name, value in updated.items() if not np.all(np.isfinite(value))]
        if broken:
            raise NonFiniteLossError(f"gradient step left non-finite values in {broken}")
        return TinyNet(updated)


@dataclass(frozen=True, eq=False)
class ForwardCache:
    inputs: np.ndarray
    backbone: np.ndarray
    hidden: np.ndarray

    @property
    def embedding(self) -> np.ndarray:
        """GAP over positions of the backbone output"""
        return self.backbone.mean(axis=0)


def forward(net: TinyNet, raw: np.ndarray) -> Tuple[FeatureGrid, ForwardCache]:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[2] != net.raw_dim:
        raise ContractViolation(
            f"expected an H×W×{net.raw_dim} input, got shape {raw.shape}")
    p = net.params
    inputs = raw.reshape(-1, net.raw_dim)
    with np.errstate(over='ignore', invalid='ignore'):
        backbone = inputs @ p['backbone.weight'].T + p['backbone.bias']
        hidden = backbone @ p['add_on.0.weight'].T + p['add_on.0.bias']
        features = hidden @ p['add_on.1.weight'].T + p['add_on.1.bias']
    if not np.all(np.isfinite(features)):
        raise NonFiniteLossError("network produced non-finite features")
    grid = FeatureGrid(features.reshape(raw.shape[0], raw.shape[1], net.dim))
    return grid, ForwardCache(inputs=inputs, backbone=backbone, hidden=hidden)


def backward(
    net: TinyNet,
    cache: ForwardCache,
    grad_features: np.ndarray,
    grad_backbone: Optional[np.ndarray] = None
) -> Dict[str, np.ndarray]:
    """Parameter gradients from a (H̄·W̄)×D feature gradient.

    grad_backbone carries any extra gradient arriving directly at the
    backbone output (the auxiliary loss reads it through GAP).
    """
    p = net.params
    grads = {
        'add_on.1.weight': grad_features.T @ cache.hidden,
        'add_on.1.bias': grad_features.sum(axis=0),
    }
    grad_hidden = grad_features @ p['add_on.1.weight']
    grads['add_on.0.weight'] = grad_hidden.T @ cache.backbone
    grads['add_on.0.bias'] = grad_hidden.sum(axis=0)
    grad_z = grad_hidden @ p['add_on.0.weight']
    if grad_backbone is not None:
        grad_z = grad_z + grad_backbone
    grads['backbone.weight'] = grad_z.T @ cache.inputs
    grads['backbone.bias'] = grad_z.sum(axis=0)
    return grads
