import logging
from pathlib import Path
from typing import Optional

import click
import numpy as np

from commands.command import BaseCommand, labelled
from services.metrics import accuracy, confusion_counts
from utils.report import RunReport, emit_report

logger = logging.getLogger(__name__)


class EvaluateCommand(BaseCommand):
    def __init__(self, checkpoint: Path, data: Path, out: Path,
                 abstain_threshold: Optional[float] = None, threads: int = 1):
        super().__init__(out=out, threads=threads)
        self.checkpoint = Path(checkpoint)
        self.data = Path(data)
        self.abstain_threshold = abstain_threshold

    def _run(self) -> int:
        net, head = self.load_model(self.checkpoint)
        split = self.load_data(self.data)
        result = self.score(net, head, split, self.abstain_threshold)

        report = RunReport(head=head)
        if labelled(split):
            value = accuracy(result.predictions, split.labels)
            report.add('accuracy', split.name, value)
            confusion_counts(result.predictions, split.labels, head.num_classes).to_csv(
                self.out / 'confusion.csv', index=False)
            click.echo(f"Accuracy on {split.name}: {value:.4f}")
        if self.abstain_threshold is not None:
            rate = float(np.mean(result.abstained))
            report.add('abstention_rate', split.name, rate)
            click.echo(f"Abstained on {rate:.2%} of {split.name} at threshold {self.abstain_threshold:g}")
        report.add('mean_ood_score', split.name, float(np.mean(result.scores)))
        emit_report(report, self.out)
        return 0
