"""Paired multi-seed training runs; run with `pytest -m slow`."""
from dataclasses import replace

import numpy as np
import pytest

from services.em import EmConfig
from services.grounding import ground_prototypes, hard_replace_baseline
from services.metrics import ScoreSet, accuracy, auroc, diversity_distance, fpr95
from services.pruning import prune
from services.synthetic import SyntheticSpec, generate_dataset, make_rng
from services.training import TrainConfig, evaluate, init_state, train

pytestmark = pytest.mark.slow

SEEDS = range(5)
TASK = SyntheticSpec(num_classes=3, raw_dim=16, height=4, width=4, noise_sigma=0.1,
                     train_per_class=20, test_per_class=20, ood_samples=40, ood_shift=1.0)
SUB_SALIENT = replace(TASK, noise_sigma=0.15, part_strengths=(1.0, 1 / 3))
TRAIN = TrainConfig(epochs=6, batch_size=10, levels=8, memory_capacity=100,
                    num_prototypes=4, prototype_dim=16)
EM = EmConfig(loops=2, m_step_iters=5)
CONFUSABLE_STREAM = 7


def _fit(spec, cfg, seed, em_cfg=EM):
    dataset = generate_dataset(spec, seed)
    state = init_state(spec.num_classes, spec.raw_dim, cfg, seed)
    train(state, dataset.train, cfg, em_cfg)
    return dataset, state


def _accuracy(state, head, split):
    return accuracy(evaluate(state.net, head, split).predictions, split.labels)


def test_mining_does_not_hurt_sub_salient_parts():
    with_mining, without = [], []
    for seed in SEEDS:
        dataset, state = _fit(SUB_SALIENT, TRAIN, seed)
        with_mining.append(_accuracy(state, state.head, dataset.test))
        dataset, state = _fit(SUB_SALIENT, replace(TRAIN, lambda1=0.0), seed)
        without.append(_accuracy(state, state.head, dataset.test))
    assert np.mean(with_mining) >= np.mean(without)


def test_diversity_spreads_prototypes_without_hurting_accuracy():
    spread, compact = [], []
    for seed in SEEDS:
        for em_cfg, bucket in ((EM, spread), (replace(EM, diversity_enabled=False), compact)):
            dataset, state = _fit(TASK, TRAIN, seed, em_cfg)
            bucket.append((
                _accuracy(state, state.head, dataset.test),
                np.mean([diversity_distance(mix) for mix in state.head.classes]),
            ))
    assert np.mean([a for a, _ in spread]) >= np.mean([a for a, _ in compact])
    assert np.mean([d for _, d in spread]) > np.mean([d for _, d in compact])


def _confusable_spec(seed):
    """Two classes whose parts pair up 0.6 apart, so point prototypes get pushed off the data"""
    rng = make_rng(seed, CONFUSABLE_STREAM)
    base = rng.normal(size=(2, 16))
    offsets = rng.normal(size=(2, 16))
    offsets *= 0.6 / np.linalg.norm(offsets, axis=1, keepdims=True)
    return replace(TASK, num_classes=2, ood_samples=0, part_centers=np.stack([base, base + offsets]))


def test_grounding_moves_prototypes_less_than_hard_replacement():
    point_drops, mixture_drops = [], []
    for seed in SEEDS:
        spec = _confusable_spec(seed)
        dataset, state = _fit(spec, TRAIN, seed)
        grounded, records = ground_prototypes(state.net, state.head, dataset.train)
        mixture_drops.append(
            _accuracy(state, state.head, dataset.test) - _accuracy(state, grounded, dataset.test))
        mixture_fit = np.mean([record.likelihood for record in records])

        dataset, state = _fit(spec, replace(TRAIN, point_based=True, lr_prototype=0.5), seed)
        replaced, records = hard_replace_baseline(state.net, state.head, dataset.train, point_based=True)
        point_drops.append(
            _accuracy(state, state.head, dataset.test) - _accuracy(state, replaced, dataset.test))
        point_fit = np.mean([record.likelihood for record in records])

        # likelihood of the chosen patch: closer to one means a smaller jump
        assert mixture_fit > point_fit, seed
    assert max(mixture_drops) <= 0.02
    assert np.mean(point_drops) >= np.mean(mixture_drops)


def test_well_shifted_ood_is_separated():
    dataset, state = _fit(TASK, TRAIN, seed=0)
    scores = ScoreSet(evaluate(state.net, state.head, dataset.test).scores,
                      evaluate(state.net, state.head, dataset.ood).scores)
    assert fpr95(scores) <= 0.05
    assert auroc(scores) >= 0.98


def test_single_gaussian_baseline_is_no_better_at_ood():
    spec = replace(TASK, parts_per_class=3)
    mixture = [_fit(spec, replace(TRAIN, num_prototypes=10), seed) for seed in SEEDS]
    single = [_fit(spec, replace(TRAIN, num_prototypes=1, levels=4), seed) for seed in SEEDS]

    def mean_auroc(runs):
        return np.mean([
            auroc(ScoreSet(evaluate(state.net, state.head, dataset.test).scores,
                           evaluate(state.net, state.head, dataset.ood).scores))
            for dataset, state in runs
        ])

    assert mean_auroc(single) <= mean_auroc(mixture)


def test_pruning_by_prior_is_robust():
    dataset, state = _fit(TASK, replace(TRAIN, num_prototypes=10, memory_capacity=150), seed=1)
    base = _accuracy(state, state.head, dataset.test)
    assert abs(_accuracy(state, prune(state.head, 8), dataset.test) - base) <= 0.02
    assert base - _accuracy(state, prune(state.head, 1), dataset.test) <= 0.05


def test_memory_bank_beats_mini_batch_only_em():
    banked, batch_only = [], []
    for seed in SEEDS:
        dataset, state = _fit(SUB_SALIENT, TRAIN, seed)
        banked.append(_accuracy(state, state.head, dataset.test))
        dataset, state = _fit(SUB_SALIENT, replace(TRAIN, memory_enabled=False), seed)
        batch_only.append(_accuracy(state, state.head, dataset.test))
    assert np.mean(banked) >= np.mean(batch_only)


def test_accuracy_is_insensitive_to_mining_levels():
    by_levels = {}
    for levels in (2, 4, 8, 16):
        by_levels[levels] = np.mean([
            _accuracy(state, state.head, dataset.test)
            for dataset, state in (_fit(SUB_SALIENT, replace(TRAIN, levels=levels), seed) for seed in SEEDS)
        ])
    assert max(by_levels.values()) - min(by_levels.values()) <= 0.05


def test_accuracy_is_insensitive_to_mining_weight():
    by_weight = {}
    for lambda1 in (0.1, 0.2, 0.5):
        by_weight[lambda1] = np.mean([
            _accuracy(state, state.head, dataset.test)
            for dataset, state in (_fit(SUB_SALIENT, replace(TRAIN, lambda1=lambda1), seed) for seed in SEEDS)
        ])
    assert max(by_weight.values()) - min(by_weight.values()) <= 0.05


def test_aux_loss_does_not_hurt():
    with_aux, without = [], []
    for seed in SEEDS:
        dataset, state = _fit(SUB_SALIENT, TRAIN, seed)
        with_aux.append(_accuracy(state, state.head, dataset.test))
        dataset, state = _fit(SUB_SALIENT, replace(TRAIN, aux_enabled=False), seed)
        without.append(_accuracy(state, state.head, dataset.test))
    assert np.mean(with_aux) >= np.mean(without) - 0.02
