from typing import Optional

from commands.command import BaseCommand
from commands.evaluate import EvaluateCommand
from commands.gen_data import GenerateDataCommand
from commands.gradcheck import GradcheckCommand
from commands.ood import OodCommand
from commands.prune import PruneCommand
from commands.train import TrainCommand


class CommandFactory:
    _commands = {
        'train': TrainCommand,
        'eval': EvaluateCommand,
        'ood': OodCommand,
        'prune': PruneCommand,
        'gen-data': GenerateDataCommand,
        'gradcheck': GradcheckCommand,
    }

    @classmethod
    def create_command(cls, name: str, **options) -> Optional[BaseCommand]:
        command_class = cls._commands.get(name)
        if command_class:
            return command_class(**options)
        return None
