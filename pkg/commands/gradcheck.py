import click
from colorama import Fore, Style

from commands.command import BaseCommand
from services.gradcheck import GRADCHECK_TOLERANCE, run_gradient_suite


class GradcheckCommand(BaseCommand):
    def __init__(self, seed: int, instances: int, tolerance: float = GRADCHECK_TOLERANCE):
        super().__init__()
        self.seed = seed
        self.instances = instances
        self.tolerance = tolerance

    def _run(self) -> int:
        results = run_gradient_suite(self.seed, self.instances, self.tolerance)
        for result in results:
            verdict = f"{Fore.GREEN}OK{Style.RESET_ALL}" if result.passed else f"{Fore.RED}FAIL{Style.RESET_ALL}"
            click.echo(f"{result.name:<32} max rel. error {result.max_error:.3e}  {verdict}")
        return 0 if all(result.passed for result in results) else 1
