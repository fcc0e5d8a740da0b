"""Alternate training: network updates with a frozen head, then EM with a frozen network."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from services.density import FeatureGrid, ModelHead, class_densities, decide, log_class_densities
from services.em import EmConfig, MemoryBank, bank_update, em_fit, relevance_ratios, seed_head
from services.errors import ContractViolation, NonFiniteLossError
from services.grounding import GroundingRecord, ground_prototypes, hard_replace_baseline
from services.mining import (
    LossBreakdown, ProxySet, aux_loss, build_mining_table, ce_loss,
    logits_to_feature_grad, mining_loss, total_loss,
)
from services.network import ForwardCache, TinyNet, backward, forward
from services.synthetic import Split, make_rng
from utils.parallel import ordered_map

logger = logging.getLogger(__name__)

TRAIN_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 10
    lr_backbone: float = 1e-4
    lr_add_on: float = 3e-3
    lr_proxy: float = 3e-3
    lr_prototype: float = 3e-3
    lr_decay_factor: float = 0.4
    lr_decay_every: int = 15
    lambda1: float = 0.2
    lambda2: float = 0.5
    levels: int = 20
    memory_capacity: int = 400
    memory_enabled: bool = True
    warmup_epochs: int = 1
    warmup_neighbours: int = 10
    warmup_margin: float = 1.5
    num_prototypes: int = 10
    prototype_dim: int = 64
    mining_enabled: bool = True
    aux_enabled: bool = True
    point_based: bool = False
    init_noise: float = 0.01
    proxy_margin: float = 0.1
    proxy_alpha: float = 32.0
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 1:
            raise ContractViolation("need epochs ≥ 0, batch_size ≥ 1 and warmup_epochs ≥ 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractViolation("loss weights must be non-negative")
        if self.levels < 1 or self.num_prototypes < 1 or self.prototype_dim < 1:
            raise ContractViolation("levels, num_prototypes and prototype_dim must be positive")
        if self.warmup_neighbours < 1 or self.warmup_margin <= 0:
            raise ContractViolation("warm-up needs at least one neighbour and a positive margin")

    @property
    def mining_active(self) -> bool:
        return self.mining_enabled and self.lambda1 > 0 and self.levels >= 2

    @property
    def aux_active(self) -> bool:
        return self.aux_enabled and self.lambda2 > 0

    def lr_scale(self, epoch: int) -> float:
        """Step decay: ×lr_decay_factor every lr_decay_every epochs"""
        return self.lr_decay_factor ** (epoch // self.lr_decay_every)


@dataclass
class TrainState:
    net: TinyNet
    head: ModelHead
    bank: MemoryBank
    proxies: ProxySet
    rng: np.random.Generator
    seed: int
    point_based: bool = False
    epoch: int = 0


@dataclass(frozen=True, eq=False)
class BatchResult:
    breakdown: LossBreakdown
    net_grads: Dict[str, np.ndarray]
    proxy_grads: np.ndarray
    mean_grads: np.ndarray


@dataclass(frozen=True, eq=False)
class Evaluation:
    predictions: np.ndarray
    densities: np.ndarray
    scores: np.ndarray
    abstained: np.ndarray


@dataclass
class TrainResult:
    state: TrainState
    history: List[dict] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=['step', 'epoch', 'ce', 'mining', 'aux', 'total'])


def init_state(num_classes: int, raw_dim: int, cfg: TrainConfig, seed: int) -> TrainState:
    rng = make_rng(seed, TRAIN_STREAM)
    net = TinyNet.initialize(raw_dim, cfg.prototype_dim, rng, noise=cfg.init_noise)
    proxies = ProxySet.initialize(num_classes, raw_dim, rng,
                                  margin=cfg.proxy_margin, alpha=cfg.proxy_alpha)
    # placeholder means; warm-up reseeds them from the filled queues
    head = ModelHead.from_arrays(
        rng.normal(size=(num_classes, cfg.num_prototypes, cfg.prototype_dim)),
        np.full((num_classes, cfg.num_prototypes), 1.0 / cfg.num_prototypes)
    )
    bank = MemoryBank(num_classes, cfg.prototype_dim, cfg.memory_capacity)
    return TrainState(net=net, head=head, bank=bank, proxies=proxies, rng=rng,
                      seed=seed, point_based=cfg.point_based)


def batch_objective(
    net: TinyNet,
    head: ModelHead,
    proxies: ProxySet,
    raws: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig
) -> BatchResult:
    """mean(ce + lambda1·mining) + lambda2·aux over one minibatch, with gradients.

    Network and proxy gradients follow the whole objective. Mean gradients
    follow the CE term alone, since only point-based training steps the means
    and it learns them from the classification loss.
    """
    batch_size = len(labels)
    lambda1 = cfg.lambda1 if cfg.mining_active else 0.0
    lambda2 = cfg.lambda2 if cfg.aux_active else 0.0
    levels = cfg.levels if cfg.mining_active else 1

    def head_losses(i: int):
        grid, cache = forward(net, raws[i])
        table = build_mining_table(grid, head, levels)
        ce, grad_ce = ce_loss(table, int(labels[i]))
        grad_features, grad_means = logits_to_feature_grad(table, grid, head, grad_ce / batch_size)
        mining = 0.0
        if cfg.mining_active:
            mining, grad_mining = mining_loss(table, int(labels[i]))
            grad_mined, _ = logits_to_feature_grad(
                table, grid, head, lambda1 * grad_mining / batch_size)
            grad_features = grad_features + grad_mined
        return ce, mining, grad_features, grad_means, cache

    per_sample = ordered_map(head_losses, range(batch_size), cfg.threads)
    caches: List[ForwardCache] = [item[4] for item in per_sample]

    aux = 0.0
    grad_embeddings = np.zeros((batch_size, net.raw_dim))
    proxy_grads = np.zeros_like(proxies.vectors)
    if cfg.aux_active:
        result = aux_loss(np.stack([cache.embedding for cache in caches]), labels, proxies)
        aux = result.loss
        grad_embeddings = lambda2 * result.grad_embeddings
        proxy_grads = lambda2 * result.grad_proxies

    def net_grads(i: int) -> Dict[str, np.ndarray]:
        positions = caches[i].backbone.shape[0]
        # GAP spreads the embedding gradient evenly over positions
        grad_backbone = np.broadcast_to(grad_embeddings[i] / positions, caches[i].backbone.shape)
        return backward(net, caches[i], per_sample[i][2], grad_backbone)

    grads = ordered_map(net_grads, range(batch_size), cfg.threads)
    summed = {name: np.zeros_like(value) for name, value in net.params.items()}
    mean_grads = np.zeros((head.num_classes, head.num_prototypes, head.dim))
    for i in range(batch_size):
        for name in summed:
            summed[name] += grads[i][name]
        mean_grads += per_sample[i][3]

    breakdown = total_loss(
        ce=sum(item[0] for item in per_sample) / batch_size,
        mining=sum(item[1] for item in per_sample) / batch_size,
        aux=aux,
        lambda1=lambda1,
        lambda2=lambda2
    )
    return BatchResult(breakdown=breakdown, net_grads=summed,
                       proxy_grads=proxy_grads, mean_grads=mean_grads)


def _fill_bank(state: TrainState, raws: np.ndarray, labels: np.ndarray) -> None:
    for raw, label in zip(raws, labels):
        grid, _ = forward(state.net, raw)
        bank_update(state.bank, grid, int(label), state.head.mixture(int(label)))


def _finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteLossError(f"update left non-finite {what}")
    return values


def select_warmup_features(state: TrainState, split: Split, cfg: TrainConfig) -> List[np.ndarray]:
    """Per class, the grid features that look class-specific.

    A feature is kept when its nearest other-class feature lies at least
    warmup_margin times farther away than its k-th nearest same-class feature
    from another image. A class left with fewer than M features keeps its M
    highest-scoring ones.
    """
    grids = [features_of(state.net, raw).flat for raw in split.raw]
    positions = grids[0].shape[0]
    features = np.concatenate(grids)
    labels = np.repeat(split.labels, positions)
    images = np.repeat(np.arange(len(split)), positions)
    ratios = relevance_ratios(features, labels, images, cfg.warmup_neighbours)

    selected = []
    for class_id in range(state.head.num_classes):
        inside = np.flatnonzero(labels == class_id)
        keep = inside[ratios[inside] >= cfg.warmup_margin]
        if len(keep) < cfg.num_prototypes:
            ranked = inside[np.argsort(-ratios[inside], kind='stable')]
            keep = np.sort(ranked[:cfg.num_prototypes])
            logger.warning(
                "Class %d: only %d feature(s) clear the warm-up margin %.2f; keeping the best %d",
                class_id, int(np.sum(ratios[inside] >= cfg.warmup_margin)), cfg.warmup_margin, len(keep))
        logger.debug("Class %d: %d of %d warm-up features kept", class_id, len(keep), len(inside))
        selected.append(features[keep])
    return selected


def warm_up(state: TrainState, split: Split, cfg: TrainConfig, em_cfg: Optional[EmConfig] = None) -> TrainState:
    """Fill every class queue with class-specific features, then seed the mixtures.

    No prototype is meaningful yet, so the queues start from the features
    picked by select_warmup_features. Given em_cfg, every further warm-up
    epoch refills the queues with per-prototype winners and refits the
    mixtures while the network stays fixed.
    """
    for class_id, features in enumerate(select_warmup_features(state, split, cfg)):
        if len(features):
            state.bank.enqueue(class_id, features)
    for class_id in range(state.head.num_classes):
        if state.bank.size(class_id) < cfg.num_prototypes:
            raise ContractViolation(
                f"warm-up left class {class_id} with {state.bank.size(class_id)} queued "
                f"features, fewer than M={cfg.num_prototypes}")
    state.head = seed_head(state.bank, cfg.num_prototypes, state.rng)

    if em_cfg is not None and not state.point_based:
        for _ in range(cfg.warmup_epochs - 1):
            _fill_bank(state, split.raw, split.labels)
            state.head = em_fit(state.bank, state.head, em_cfg, cfg.threads)
    logger.info("Warm-up filled %d class queues; prototypes seeded with k-means++",
                state.head.num_classes)
    return state


def _apply_updates(
    state: TrainState,
    outcome: BatchResult,
    raws: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    em_cfg: EmConfig,
    scale: float
) -> None:
    state.net = state.net.step(outcome.net_grads, cfg.lr_backbone * scale, cfg.lr_add_on * scale)
    if cfg.aux_active:
        state.proxies = state.proxies.with_vectors(_finite(
            state.proxies.vectors - cfg.lr_proxy * scale * outcome.proxy_grads, 'proxies'))

    if state.point_based:
        state.head = state.head.replace_means(_finite(
            state.head.means - cfg.lr_prototype * scale * outcome.mean_grads, 'prototype means'))
        return
    if not cfg.memory_enabled:
        # mini-batch-only EM: the queues hold this batch alone
        for class_id in range(state.bank.num_classes):
            state.bank.clear(class_id)
    # queues see the post-step network
    _fill_bank(state, raws, labels)
    state.head = em_fit(state.bank, state.head, em_cfg, cfg.threads,
                        skip_short=not cfg.memory_enabled)


def train(
    state: TrainState,
    split: Split,
    cfg: TrainConfig,
    em_cfg: EmConfig,
    progress: bool = False
) -> TrainResult:
    if len(split) == 0:
        raise ContractViolation("cannot train on an empty split")
    result = TrainResult(state=state)
    warm_up(state, split, cfg, em_cfg)
    step = 0

    for epoch in tqdm(range(cfg.epochs), desc='epochs', disable=not progress):
        scale = cfg.lr_scale(epoch)
        order = state.rng.permutation(len(split))
        epoch_losses = []

        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            raws, labels = split.raw[batch], split.labels[batch]
            breakdown = None
            try:
                outcome = batch_objective(state.net, state.head, state.proxies, raws, labels, cfg)
                breakdown = outcome.breakdown
                if not np.isfinite(breakdown.total):
                    raise NonFiniteLossError("non-finite loss")
                _apply_updates(state, outcome, raws, labels, cfg, em_cfg, scale)
            except NonFiniteLossError as error:
                logger.error("%s at epoch %d, step %d (batch %s)", error, epoch, step, batch.tolist())
                raise NonFiniteLossError(
                    f"{error} at epoch {epoch}, step {step}",
                    batch_indices=batch.tolist(),
                    breakdown=breakdown.as_row() if breakdown is not None else None
                ) from error

            result.history.append({'step': step, 'epoch': epoch, **breakdown.as_row()})
            epoch_losses.append(breakdown.total)
            step += 1

        state.epoch = epoch + 1
        logger.info("Epoch %d/%d: mean total loss %.6f", epoch + 1, cfg.epochs, np.mean(epoch_losses))
    return result


def evaluate(
    net: TinyNet,
    head: ModelHead,
    split: Split,
    threshold: Optional[float] = None,
    threads: int = 1
) -> Evaluation:
    """Argmax predictions, class densities and OoD scores for every sample"""
    if net.dim != head.dim:
        raise ContractViolation(f"network emits D={net.dim}, head expects D={head.dim}")

    def score(i: int):
        grid, _ = forward(net, split.raw[i])
        return class_densities(grid, head), log_class_densities(grid, head)

    scored = ordered_map(score, range(len(split)), threads)
    densities = np.array([d for d, _ in scored]).reshape(len(split), head.num_classes)
    decisions = [decide(d, 0.0, log_densities=ld) for d, ld in scored]
    scores = np.array([decision.score for decision in decisions])
    abstained = scores < threshold if threshold is not None else np.zeros(len(split), dtype=bool)
    return Evaluation(
        predictions=np.array([decision.label for decision in decisions], dtype=np.int64),
        densities=densities,
        scores=scores,
        abstained=abstained
    )


def features_of(net: TinyNet, raw: np.ndarray) -> FeatureGrid:
    grid, _ = forward(net, raw)
    return grid


@dataclass(frozen=True, eq=False)
class TrainingRun:
    """Everything one run produces before any artefact is written"""
    result: TrainResult
    trained_head: ModelHead
    head: ModelHead
    records: List[GroundingRecord]
    before_grounding: Evaluation
    test: Evaluation
    ood: Optional[Evaluation] = None

    @property
    def state(self) -> TrainState:
        return self.result.state


class PrototypeTrainer:
    """Service class for training, grounding and scoring prototype models"""

    def __init__(self, train_cfg: TrainConfig, em_cfg: EmConfig, threads: int = 1):
        self.train_cfg = train_cfg
        self.em_cfg = em_cfg
        self.threads = threads

    def fit(self, split: Split, num_classes: int, seed: int, progress: bool = False) -> TrainResult:
        """Fresh state for this seed, warmed up and trained on split"""
        state = init_state(num_classes, split.raw.shape[-1], self.train_cfg, seed)
        return train(state, split, self.train_cfg, self.em_cfg, progress=progress)

    def ground(self, state: TrainState, split: Split) -> Tuple[ModelHead, List[GroundingRecord]]:
        """Project means onto training features; point-based heads get plain replacement"""
        if state.point_based:
            return hard_replace_baseline(state.net, state.head, split, True, self.threads)
        return ground_prototypes(state.net, state.head, split, self.threads)

    def score(self, state: TrainState, head: ModelHead, split: Split,
              threshold: Optional[float] = None) -> Evaluation:
        return evaluate(state.net, head, split, threshold, self.threads)

    def run(self, train_split: Split, test_split: Split, num_classes: int, seed: int,
            ood_split: Optional[Split] = None, progress: bool = False) -> TrainingRun:
        result = self.fit(train_split, num_classes, seed, progress)
        state = result.state
        before = self.score(state, state.head, test_split)
        head, records = self.ground(state, train_split)
        ood = self.score(state, head, ood_split) if ood_split is not None and len(ood_split) else None
        return TrainingRun(
            result=result,
            trained_head=state.head,
            head=head,
            records=records,
            before_grounding=before,
            test=self.score(state, head, test_split),
            ood=ood
        )
