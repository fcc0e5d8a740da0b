import logging
from pathlib import Path

import click
from threadpoolctl import threadpool_limits

from commands.factory import CommandFactory
from services.errors import CheckpointFormatError, ConfigError, MGProtoError
from services.gradcheck import GRADCHECK_TOLERANCE
from utils.config import load_config
from utils.log import setup_logging

logger = logging.getLogger('mgproto')

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ExperimentGroup(click.Group):
    """Maps service errors onto the CLI's exit codes: 2 usage/config, 1 runtime"""

    def invoke(self, ctx: click.Context):
        try:
            # BLAS stays single-threaded; --threads only fans out over samples
            with threadpool_limits(limits=1):
                return super().invoke(ctx)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except (ConfigError, CheckpointFormatError, FileNotFoundError) as error:
            logger.error("%s", error)
            click.echo(f"Error: {error}", err=True)
            ctx.exit(EXIT_USAGE)
        except MGProtoError as error:
            logger.error("%s", error)
            click.echo(f"Error: {error}", err=True)
            ctx.exit(EXIT_RUNTIME)
        except Exception as error:
            logger.exception("Unexpected failure")
            click.echo(f"Error: {error}", err=True)
            ctx.exit(EXIT_RUNTIME)


def run_command(name: str, **options) -> None:
    command = CommandFactory.create_command(name, **options)
    if command is None:
        raise click.UsageError(f"unknown command {name}")
    code = command.execute()
    if code:
        click.get_current_context().exit(code)


config_option = click.option('--config', 'config_path', type=click.Path(dir_okay=False, path_type=Path),
                             help='Flat JSON experiment configuration.')
seed_option = click.option('--seed', type=int, default=None, help='Overrides the configured seed.')
threads_option = click.option('--threads', type=click.IntRange(min=1), default=None,
                              help='Worker threads for per-sample work.')
threshold_option = click.option('--abstain-threshold', type=click.FloatRange(min=0), default=None,
                                help='Abstain when the summed class density falls below this value.')


def _existing(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return path


@click.group(cls=ExperimentGroup)
@click.option('--verbose', '-v', is_flag=True, help='Debug logging.')
def cli(verbose: bool):
    """Gaussian-mixture prototype experiments on synthetic part grids"""
    setup_logging(verbose)


@cli.command()
@config_option
@seed_option
@click.option('--out', type=click.Path(file_okay=False, path_type=Path), default=None)
@threads_option
def train(config_path, seed, out, threads):
    """Train, ground the prototypes and write checkpoint, metrics and report."""
    if config_path is None:
        raise click.UsageError('train needs --config')
    config = load_config(config_path, {'seed': seed, 'out': str(out) if out else None, 'threads': threads})
    run_command('train', config=config)


@cli.command(name='eval')
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option('--data', required=True, type=click.Path(dir_okay=False, path_type=Path),
              help='JSON sidecar of a dataset split.')
@click.option('--out', required=True, type=click.Path(file_okay=False, path_type=Path))
@threshold_option
@threads_option
def evaluate(checkpoint, data, out, abstain_threshold, threads):
    """Accuracy, confusion counts and abstention rate on one split."""
    run_command('eval', checkpoint=_existing(checkpoint), data=_existing(data), out=out,
                abstain_threshold=abstain_threshold, threads=threads or 1)


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option('--id-data', required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option('--ood-data', required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option('--out', required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option('--bins', type=click.IntRange(min=1), default=20, show_default=True)
@threshold_option
@threads_option
def ood(checkpoint, id_data, ood_data, out, bins, abstain_threshold, threads):
    """FPR95, AUROC and score histograms for an ID/OoD pair of splits."""
    run_command('ood', checkpoint=_existing(checkpoint), id_data=_existing(id_data),
                ood_data=_existing(ood_data), out=out, abstain_threshold=abstain_threshold,
                bins=bins, threads=threads or 1)


@cli.command()
@click.option('--checkpoint', required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option('--data', required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option('--keep', required=True, type=int, help='Prototypes kept per class.')
@click.option('--out', required=True, type=click.Path(file_okay=False, path_type=Path))
@click.option('--renormalize', is_flag=True, help='Rescale kept priors to sum to one.')
@threads_option
def prune(checkpoint, data, keep, out, renormalize, threads):
    """Prune prototypes by importance prior and compare accuracy."""
    run_command('prune', checkpoint=_existing(checkpoint), data=_existing(data), keep=keep,
                out=out, renormalize=renormalize, threads=threads or 1)


@cli.command(name='gen-data')
@config_option
@seed_option
@click.option('--out', type=click.Path(file_okay=False, path_type=Path), default=None)
def gen_data(config_path, seed, out):
    """Write the synthetic train/test/OoD splits."""
    config = load_config(config_path, {'seed': seed, 'out': str(out) if out else None})
    run_command('gen-data', config=config)


@cli.command()
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--instances', type=click.IntRange(min=1), default=20, show_default=True)
@click.option('--tolerance', type=float, default=GRADCHECK_TOLERANCE, show_default=True)
def gradcheck(seed, instances, tolerance):
    """Compare every analytic gradient with central finite differences."""
    run_command('gradcheck', seed=seed, instances=instances, tolerance=tolerance)


if __name__ == '__main__':
    cli()
