import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from commands.command import BaseCommand, add_ood_metrics
from services.errors import NonFiniteLossError
from services.grounding import records_frame
from services.metrics import MIN_ID_SCORES, accuracy, diversity_distance
from services.synthetic import Split, generate_dataset
from services.training import PrototypeTrainer
from utils.checkpoint import export_json, save_checkpoint
from utils.config import ExperimentConfig
from utils.report import RunReport, emit_report
from utils.tensor_file import save_dataset

logger = logging.getLogger(__name__)


class TrainCommand(BaseCommand):
    """Generate data, train, ground the prototypes and write every artefact"""

    def __init__(self, config: ExperimentConfig):
        super().__init__(out=Path(config.out), threads=config.threads)
        self.config = config

    def _dump_diagnostics(self, error: NonFiniteLossError, split: Split) -> Path:
        path = self.out / 'diagnostic_dump.json'
        indices = error.batch_indices
        path.write_text(json.dumps({
            'message': str(error),
            'batch_indices': indices,
            'labels': split.labels[indices].tolist(),
            'loss': error.breakdown,
            'raw_inputs': split.raw[indices].tolist(),
        }, indent=2))
        logger.error("Wrote diagnostic dump to %s", path)
        return path

    def _run(self) -> int:
        config = self.config
        dataset = generate_dataset(config.synthetic_spec(), config.seed)
        save_dataset(dataset, self.out / 'data')

        trainer = PrototypeTrainer(config.train_config(), config.em_config(), self.threads)
        scores_ood = len(dataset.ood) > 0 and len(dataset.test) >= MIN_ID_SCORES
        try:
            run = trainer.run(dataset.train, dataset.test, config.num_classes, config.seed,
                              ood_split=dataset.ood if scores_ood else None,
                              progress=sys.stderr.isatty())
        except NonFiniteLossError as error:
            self._dump_diagnostics(error, dataset.train)
            raise
        run.result.history_frame().to_csv(self.out / 'loss_history.csv', index=False)
        run.state.bank.to_frame().to_csv(self.out / 'bank.csv', index=False)
        records_frame(run.records).to_csv(self.out / 'grounding.csv', index=False)

        report = RunReport(histogram_bins=config.histogram_bins)
        report.add('accuracy_before_grounding', 'test',
                   accuracy(run.before_grounding.predictions, dataset.test.labels))
        test_accuracy = accuracy(run.test.predictions, dataset.test.labels)
        report.add('accuracy', 'test', test_accuracy)
        if run.head.num_prototypes >= 2:
            report.add('diversity_distance', 'head',
                       float(np.mean([diversity_distance(mix) for mix in run.trained_head.classes])))
        if run.ood is not None:
            add_ood_metrics(report, run.test, run.ood, config.abstain_threshold)

        save_checkpoint(self.out / 'model.mgp', run.head, run.state.net)
        export_json(self.out / 'model.json', run.head)
        report.head = run.head
        emit_report(report, self.out)

        click.echo(f"Trained {config.epochs} epochs on {len(dataset.train)} samples; "
                   f"test accuracy {test_accuracy:.4f}")
        click.echo(f"Artefacts written to {self.out}")
        return 0
