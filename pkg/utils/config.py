"""Flat JSON experiment configuration with MGPROTO_ environment overrides."""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from services.em import EmConfig
from services.errors import ConfigError
from services.synthetic import SyntheticSpec
from services.training import TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = 'MGPROTO_'


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    seed: int = Field(0, ge=0)
    out: str = 'runs/default'
    threads: int = Field(1, ge=1)

    # synthetic data
    num_classes: int = Field(3, ge=2)
    parts_per_class: int = Field(2, ge=1)
    raw_dim: int = Field(64, ge=1)
    height: int = Field(5, ge=1)
    width: int = Field(5, ge=1)
    noise_sigma: float = Field(0.1, ge=0)
    part_scale: float = Field(1.0, gt=0)
    part_strengths: Optional[List[float]] = None
    train_per_class: int = Field(50, ge=1)
    test_per_class: int = Field(20, ge=1)
    ood_samples: int = Field(60, ge=0)
    ood_shift: float = Field(1.0, ge=0)

    # network and objective
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(10, ge=1)
    lr_backbone: float = Field(1e-4, ge=0)
    lr_add_on: float = Field(3e-3, ge=0)
    lr_proxy: float = Field(3e-3, ge=0)
    lr_prototype: float = Field(3e-3, ge=0)
    lr_decay_factor: float = Field(0.4, gt=0, le=1)
    lr_decay_every: int = Field(15, ge=1)
    lambda1: float = Field(0.2, ge=0)
    lambda2: float = Field(0.5, ge=0)
    levels: int = Field(20, ge=1)
    memory_capacity: int = Field(400, ge=1)
    memory_enabled: bool = True
    warmup_epochs: int = Field(1, ge=1)
    warmup_neighbours: int = Field(10, ge=1)
    warmup_margin: float = Field(1.5, gt=0)
    num_prototypes: int = Field(10, ge=1)
    prototype_dim: int = Field(64, ge=1)
    mining_enabled: bool = True
    aux_enabled: bool = True
    point_based: bool = False
    init_noise: float = Field(0.01, ge=0)
    proxy_margin: float = Field(0.1, ge=0)
    proxy_alpha: float = Field(32.0, gt=0)

    # EM
    em_loops: int = Field(3, ge=1)
    smoothing_alpha: float = Field(0.1, ge=0)
    ema_tau: float = Field(0.99, ge=0, lt=1)
    m_step_lr: float = Field(3e-3, gt=0)
    m_step_iters: int = Field(10, ge=1)
    diversity_enabled: bool = True

    # evaluation
    abstain_threshold: Optional[float] = Field(None, ge=0)
    histogram_bins: int = Field(20, ge=1)

    @model_validator(mode='after')
    def _check_consistency(self) -> 'ExperimentConfig':
        area = self.height * self.width
        if self.levels > area:
            raise ValueError(f"levels={self.levels} exceeds the {self.height}×{self.width} grid")
        if self.parts_per_class > area:
            raise ValueError(f"{self.parts_per_class} parts do not fit a {self.height}×{self.width} grid")
        if self.memory_capacity < self.num_prototypes:
            raise ValueError("memory_capacity must hold at least num_prototypes vectors")
        if self.part_strengths is not None and len(self.part_strengths) != self.parts_per_class:
            raise ValueError("part_strengths needs one entry per part")
        return self

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.num_classes,
            parts_per_class=self.parts_per_class,
            raw_dim=self.raw_dim,
            height=self.height,
            width=self.width,
            noise_sigma=self.noise_sigma,
            part_scale=self.part_scale,
            part_strengths=tuple(self.part_strengths) if self.part_strengths is not None else None,
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            ood_samples=self.ood_samples,
            ood_shift=self.ood_shift,
        )

    def train_config(self) -> TrainConfig:
        fields = TrainConfig.__dataclass_fields__
        return TrainConfig(**{name: getattr(self, name) for name in fields})

    def em_config(self) -> EmConfig:
        return EmConfig(
            loops=self.em_loops,
            smoothing_alpha=self.smoothing_alpha,
            ema_tau=self.ema_tau,
            m_step_lr=self.m_step_lr,
            m_step_iters=self.m_step_iters,
            diversity_enabled=self.diversity_enabled,
        )


def env_overrides(environ: Mapping[str, str] = os.environ) -> Dict[str, str]:
    """Scalar fields named MGPROTO_<FIELD>; pydantic coerces the strings"""
    overrides = {}
    for name, info in ExperimentConfig.model_fields.items():
        key = ENV_PREFIX + name.upper()
        if key in environ and info.annotation != Optional[List[float]]:
            overrides[name] = environ[key]
    return overrides


def load_config(path: Optional[Path], overrides: Optional[Dict[str, Any]] = None,
                environ: Mapping[str, str] = os.environ) -> ExperimentConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as error:
            raise ConfigError(f"{path} is not valid JSON: {error}") from error
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a JSON object")

    data.update(env_overrides(environ))
    data.update({key: value for key, value in (overrides or {}).items() if value is not None})
    try:
        config = ExperimentConfig(**data)
    except ValidationError as error:
        raise ConfigError(f"invalid configuration:\n{error}") from error
    logger.debug("Loaded configuration: %s", config.model_dump())
    return config
