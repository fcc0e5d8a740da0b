from pathlib import Path
from typing import Optional

import click

from commands.command import BaseCommand, add_ood_metrics
from utils.report import RunReport, emit_report


class OodCommand(BaseCommand):
    """Score an ID and an OoD split with the summed class densities"""

    def __init__(self, checkpoint: Path, id_data: Path, ood_data: Path, out: Path,
                 abstain_threshold: Optional[float] = None, bins: int = 20, threads: int = 1):
        super().__init__(out=out, threads=threads)
        self.checkpoint = Path(checkpoint)
        self.id_data = Path(id_data)
        self.ood_data = Path(ood_data)
        self.abstain_threshold = abstain_threshold
        self.bins = bins

    def _run(self) -> int:
        net, head = self.load_model(self.checkpoint)
        id_split = self.load_data(self.id_data)
        ood_split = self.load_data(self.ood_data)

        report = RunReport(head=head, histogram_bins=self.bins)
        threshold = add_ood_metrics(
            report,
            self.score(net, head, id_split),
            self.score(net, head, ood_split),
            self.abstain_threshold
        )
        emit_report(report, self.out)

        values = {(row['metric_name'], row['split']): row['value'] for row in report.metrics}
        click.echo(f"FPR95 {values[('fpr95', 'ood')]:.4f}  AUROC {values[('auroc', 'ood')]:.4f}")
        click.echo(f"Abstain threshold {threshold:.6g}: "
                   f"ID {values[('abstention_rate', 'id')]:.2%}, "
                   f"OoD {values[('abstention_rate', 'ood')]:.2%} abstained")
        return 0
