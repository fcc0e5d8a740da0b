"""Projection of prototype means onto real training patches."""
import logging
from dataclasses import asdict, dataclass
from typing import List, Tuple

import numpy as np
import pandas as pd

from services.density import ClassMixture, ModelHead, squared_distances
from services.errors import ContractViolation
from services.network import TinyNet, forward
from services.synthetic import Split
from utils.parallel import ordered_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundingRecord:
    class_id: int
    prototype: int
    sample_id: int
    row: int
    col: int
    likelihood: float


def _class_features(net: TinyNet, split: Split, class_id: int, threads: int):
    sample_ids = split.indices_of(class_id)
    if len(sample_ids) == 0:
        raise ContractViolation(f"class {class_id} has no training samples to ground on")
    grids = ordered_map(lambda i: forward(net, split.raw[i])[0], sample_ids, threads)
    flat = np.concatenate([grid.flat for grid in grids])
    return sample_ids, grids[0].width, grids[0].num_positions, flat


def _project(
    net: TinyNet,
    head: ModelHead,
    split: Split,
    threads: int
) -> Tuple[ModelHead, List[GroundingRecord]]:
    if net.dim != head.dim:
        raise ContractViolation(f"network emits D={net.dim}, head expects D={head.dim}")
    records = []
    mixtures = []
    for mix in head.classes:
        sample_ids, width, positions, flat = _class_features(net, split, mix.class_id, threads)
        distances = squared_distances(flat, mix.means)
        # argmin keeps the first hit: lowest sample id, then row-major position
        winners = np.argmin(distances, axis=0)
        for m, winner in enumerate(winners):
            sample, position = divmod(int(winner), positions)
            row, col = divmod(position, width)
            records.append(GroundingRecord(
                class_id=mix.class_id,
                prototype=m,
                sample_id=int(sample_ids[sample]),
                row=row,
                col=col,
                likelihood=float(np.exp(-np.pi * distances[winner, m]))
            ))
        mixtures.append(ClassMixture(class_id=mix.class_id, means=flat[winners], priors=mix.priors))
    return head.replace_classes(mixtures), records


def ground_prototypes(
    net: TinyNet,
    head: ModelHead,
    split: Split,
    threads: int = 1
) -> Tuple[ModelHead, List[GroundingRecord]]:
    """Replace every mean by the same-class training feature it finds most likely"""
    grounded, records = _project(net, head, split, threads)
    logger.info("Grounded %d prototypes on training patches", len(records))
    return grounded, records


def hard_replace_baseline(
    net: TinyNet,
    head: ModelHead,
    split: Split,
    point_based: bool,
    threads: int = 1
) -> Tuple[ModelHead, List[GroundingRecord]]:
    """Push every point prototype onto its nearest same-class training patch"""
    if not point_based:
        raise ContractViolation("hard replacement applies to heads trained in point-based mode")
    replaced, records = _project(net, head, split, threads)
    logger.info("Replaced %d point prototypes by their nearest patches", len(records))
    return replaced, records


def records_frame(records: List[GroundingRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        [asdict(record) for record in records],
        columns=['class_id', 'prototype', 'sample_id', 'row', 'col', 'likelihood']
    )
