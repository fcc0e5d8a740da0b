import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from services.density import ModelHead
from services.errors import ContractViolation
from services.metrics import ScoreSet, auroc, default_abstain_threshold, fpr95
from services.network import TinyNet
from services.synthetic import OOD_LABEL, Split
from services.training import Evaluation, evaluate
from utils.checkpoint import load_checkpoint
from utils.report import RunReport
from utils.tensor_file import load_split

logger = logging.getLogger(__name__)


class BaseCommand(ABC):
    """One CLI action; `execute` returns the process exit code"""

    def __init__(self, out: Optional[Path] = None, threads: int = 1):
        self.out = Path(out) if out is not None else None
        self.threads = threads
        self.context: Dict[str, Any] = {}

    def execute(self) -> int:
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
        return self._run()

    @abstractmethod
    def _run(self) -> int:
        """Command body, implemented by subclasses"""

    def load_model(self, path: Path):
        checkpoint = load_checkpoint(path)
        if checkpoint.net is None:
            raise ContractViolation(f"{path} holds no network section; retrain to evaluate it")
        self.context['checkpoint'] = Path(path)
        return checkpoint.net, checkpoint.head

    @staticmethod
    def load_data(path: Path) -> Split:
        return load_split(path)

    def score(self, net: TinyNet, head: ModelHead, split: Split,
              threshold: Optional[float] = None) -> Evaluation:
        if split.raw.shape[-1] != net.raw_dim:
            raise ContractViolation(
                f"split {split.name} has raw_dim={split.raw.shape[-1]}, network expects {net.raw_dim}")
        if len(split) == 0:
            raise ContractViolation(f"split {split.name} is empty")
        return evaluate(net, head, split, threshold, self.threads)


def labelled(split: Split) -> bool:
    return bool(np.all(split.labels != OOD_LABEL))


def add_ood_metrics(report: RunReport, id_eval: Evaluation, ood_eval: Evaluation,
                    threshold: Optional[float]) -> float:
    """FPR95, AUROC and abstention rates; returns the abstention threshold used"""
    scores = ScoreSet(id_scores=id_eval.scores, ood_scores=ood_eval.scores)
    report.scores = scores
    if threshold is None:
        threshold = default_abstain_threshold(scores.id_scores)
    report.add('fpr95', 'ood', fpr95(scores))
    report.add('auroc', 'ood', auroc(scores))
    report.add('abstain_threshold', 'ood', threshold)
    report.add('abstention_rate', 'id', float(np.mean(scores.id_scores < threshold)))
    report.add('abstention_rate', 'ood', float(np.mean(scores.ood_scores < threshold)))
    return threshold
