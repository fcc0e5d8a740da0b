import logging
import sys

from colorama import Fore, Style, just_fix_windows_console

LEVEL_COLOURS = {
    logging.DEBUG: Fore.CYAN,
    logging.INFO: Fore.GREEN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}


class ColourFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        message = super().format(record)
        colour = LEVEL_COLOURS.get(record.levelno, '')
        return message.replace(record.levelname, f"{colour}{record.levelname}{Style.RESET_ALL}", 1)


class ConsoleHandler(logging.StreamHandler):
    """Writes to whatever sys.stderr is when a record is emitted"""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def setup_logging(verbose: bool = False) -> None:
    """One coloured stderr handler on the root logger"""
    just_fix_windows_console()
    handler = ConsoleHandler()
    handler.setFormatter(ColourFormatter('%(levelname)s %(name)s: %(message)s'))
    root = logging.getLogger()
    for existing in list(root.handlers):
        if isinstance(existing.formatter, ColourFormatter):
            root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
