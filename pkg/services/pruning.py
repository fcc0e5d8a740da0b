"""Prior-ranked removal of low-importance prototypes."""
import logging

import numpy as np

from services.density import ClassMixture, ModelHead
from services.errors import ContractViolation

logger = logging.getLogger(__name__)


def prune(head: ModelHead, keep: int, renormalize: bool = False) -> ModelHead:
    """Keep the top-`keep` prototypes of every class by importance prior.

    Ties go to the lower prototype index and kept prototypes stay in their
    original order. Priors are left unnormalised unless asked otherwise.
    """
    if not 1 <= keep <= head.num_prototypes:
        raise ContractViolation(f"keep must lie in [1, {head.num_prototypes}], got {keep}")
    pruned = []
    for mix in head.classes:
        ranked = np.argsort(-mix.priors, kind='stable')[:keep]
        kept = np.sort(ranked)
        priors = mix.priors[kept]
        if renormalize and priors.sum() > 0:
            priors = priors / priors.sum()
        pruned.append(ClassMixture(class_id=mix.class_id, means=mix.means[kept], priors=priors))

    head = head.replace_classes(pruned)
    retained = head.priors.sum(axis=1)
    logger.info("Pruned to %d prototypes per class; retained prior mass %.4f to %.4f",
                keep, retained.min(), retained.max())
    return head
