from pathlib import Path

import click
import pandas as pd

from commands.command import BaseCommand
from services.metrics import accuracy
from services.pruning import prune
from utils.checkpoint import save_checkpoint


class PruneCommand(BaseCommand):
    """Keep the top `keep` prototypes per class and compare test accuracy"""

    def __init__(self, checkpoint: Path, data: Path, keep: int, out: Path,
                 renormalize: bool = False, threads: int = 1):
        super().__init__(out=out, threads=threads)
        self.checkpoint = Path(checkpoint)
        self.data = Path(data)
        self.keep = keep
        self.renormalize = renormalize

    def _run(self) -> int:
        net, head = self.load_model(self.checkpoint)
        split = self.load_data(self.data)
        if not 1 <= self.keep <= head.num_prototypes:
            raise click.BadParameter(
                f"must lie in [1, {head.num_prototypes}], got {self.keep}", param_hint="--keep")
        pruned = prune(head, self.keep, self.renormalize)

        before = accuracy(self.score(net, head, split).predictions, split.labels)
        after = accuracy(self.score(net, pruned, split).predictions, split.labels)
        save_checkpoint(self.out / 'pruned.mgp', pruned, net)
        pd.DataFrame([
            {'metric': 'num_prototypes', 'before': head.num_prototypes, 'after': pruned.num_prototypes},
            {'metric': 'accuracy', 'before': before, 'after': after},
        ], columns=['metric', 'before', 'after']).to_csv(self.out / 'prune_comparison.csv', index=False)

        click.echo(f"Prototypes per class {head.num_prototypes} → {pruned.num_prototypes}")
        click.echo(f"Acc. {before:.4f} → {after:.4f}")
        return 0
