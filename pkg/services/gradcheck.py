"""Finite-difference verification of every hand-derived gradient."""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from services.density import ModelHead
from services.em import m_step_objective, m_step_objective_grad, smooth_responsibilities
from services.mining import MiningTable, ProxySet, aux_loss, ce_loss, mining_loss
from services.network import PARAMETER_NAMES, TinyNet, forward
from services.synthetic import make_rng
from services.training import TrainConfig, batch_objective
from utils.finite_difference import central_difference, relative_error

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STREAM = 2

MICRO_CLASSES = 2
MICRO_PROTOTYPES = 2
MICRO_DIM = 3
MICRO_SIDE = 2
MICRO_LEVELS = 3


@dataclass(frozen=True)
class GradientCheck:
    name: str
    max_error: float
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)


Check = Callable[[np.random.Generator], List[Tuple[str, float]]]


def _table(rng: np.random.Generator) -> Tuple[MiningTable, int]:
    logits = rng.uniform(0.0, 1.0, size=(3, 4))
    return MiningTable(logits=logits, positions=np.zeros((3, 1, 4), dtype=np.int64)), int(rng.integers(3))


def _table_check(loss_fn) -> Check:
    def check(rng: np.random.Generator) -> List[Tuple[str, float]]:
        table, label = _table(rng)
        _, analytic = loss_fn(table, label)
        numeric = central_difference(
            lambda logits: loss_fn(MiningTable(logits, table.positions), label)[0], table.logits)
        return [('logits', relative_error(analytic, numeric))]
    return check


def check_aux(rng: np.random.Generator) -> List[Tuple[str, float]]:
    embeddings = rng.normal(size=(4, 5))
    labels = np.array([0, 1, 1, 2])
    proxies = ProxySet.initialize(4, 5, rng)
    result = aux_loss(embeddings, labels, proxies)
    numeric_e = central_difference(lambda e: aux_loss(e, labels, proxies).loss, embeddings)
    numeric_q = central_difference(
        lambda q: aux_loss(embeddings, labels, proxies.with_vectors(q)).loss, proxies.vectors)
    return [
        ('embeddings', relative_error(result.grad_embeddings, numeric_e)),
        ('proxies', relative_error(result.grad_proxies, numeric_q)),
    ]


def check_m_step(rng: np.random.Generator) -> List[Tuple[str, float]]:
    features = rng.normal(size=(12, 4))
    means = rng.normal(size=(3, 4))
    priors = rng.dirichlet(np.ones(3))
    resp = smooth_responsibilities(rng.dirichlet(np.ones(3), size=12), 0.1)
    analytic = m_step_objective_grad(means, resp, features)
    numeric = central_difference(lambda p: m_step_objective(p, resp, features, priors), means)
    return [('means', relative_error(analytic, numeric))]


def micro_instance(rng: np.random.Generator):
    """Two classes, two prototypes, 2×2 grids of 3-dimensional features"""
    net = TinyNet.initialize(MICRO_DIM, MICRO_DIM, rng, noise=0.3)
    raws = rng.normal(0.0, 0.5, size=(MICRO_CLASSES, MICRO_SIDE, MICRO_SIDE, MICRO_DIM))
    labels = np.arange(MICRO_CLASSES)
    means = np.stack([
        forward(net, raws[c])[0].flat[rng.choice(MICRO_SIDE * MICRO_SIDE, MICRO_PROTOTYPES, replace=False)]
        for c in range(MICRO_CLASSES)
    ]) + 0.1 * rng.normal(size=(MICRO_CLASSES, MICRO_PROTOTYPES, MICRO_DIM))
    head = ModelHead.from_arrays(means, rng.dirichlet(np.ones(MICRO_PROTOTYPES), size=MICRO_CLASSES))
    proxies = ProxySet.initialize(MICRO_CLASSES, MICRO_DIM, rng)
    cfg = TrainConfig(batch_size=MICRO_CLASSES, levels=MICRO_LEVELS,
                      num_prototypes=MICRO_PROTOTYPES, prototype_dim=MICRO_DIM)
    return net, head, proxies, raws, labels, cfg


def check_end_to_end(rng: np.random.Generator) -> List[Tuple[str, float]]:
    net, head, proxies, raws, labels, cfg = micro_instance(rng)
    outcome = batch_objective(net, head, proxies, raws, labels, cfg)
    errors = []

    for name in PARAMETER_NAMES:
        def objective(value, name=name):
            params = net.parameters()
            params[name] = value
            return batch_objective(net.with_parameters(params), head, proxies, raws, labels, cfg).breakdown.total
        numeric = central_difference(objective, net.params[name])
        errors.append((name, relative_error(outcome.net_grads[name], numeric)))

    numeric_q = central_difference(
        lambda q: batch_objective(net, head, proxies.with_vectors(q), raws, labels, cfg).breakdown.total,
        proxies.vectors)
    errors.append(('proxies', relative_error(outcome.proxy_grads, numeric_q)))

    numeric_p = central_difference(
        lambda p: batch_objective(net, head.replace_means(p), proxies, raws, labels, cfg).breakdown.ce,
        head.means)
    errors.append(('prototype means via ce', relative_error(outcome.mean_grads, numeric_p)))
    return errors


SUITE: Dict[str, Check] = {
    'ce_loss': _table_check(ce_loss),
    'mining_loss': _table_check(mining_loss),
    'aux_loss': check_aux,
    'm_step_objective': check_m_step,
    'total_loss': check_end_to_end,
}


def run_gradient_suite(seed: int, instances: int = 20,
                       tolerance: float = GRADCHECK_TOLERANCE) -> List[GradientCheck]:
    """Worst relative error of every check over `instances` random instances"""
    rng = make_rng(seed, GRADCHECK_STREAM)
    worst: Dict[str, float] = {}
    for _ in range(instances):
        for suite_name, check in SUITE.items():
            for part, error in check(rng):
                key = f"{suite_name}[{part}]"
                worst[key] = max(worst.get(key, 0.0), error)

    results = [GradientCheck(name, error, tolerance) for name, error in worst.items()]
    failed = [result.name for result in results if not result.passed]
    if failed:
        logger.error("Gradient checks failed: %s", ', '.join(failed))
    else:
        logger.info("All %d gradient checks passed over %d instances", len(results), instances)
    return results
