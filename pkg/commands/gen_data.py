import click

from commands.command import BaseCommand
from services.synthetic import generate_dataset
from utils.config import ExperimentConfig
from utils.tensor_file import save_dataset


class GenerateDataCommand(BaseCommand):
    def __init__(self, config: ExperimentConfig):
        super().__init__(out=config.out)
        self.config = config

    def _run(self) -> int:
        dataset = generate_dataset(self.config.synthetic_spec(), self.config.seed)
        for sidecar in save_dataset(dataset, self.out):
            click.echo(f"Wrote {sidecar}")
        return 0
