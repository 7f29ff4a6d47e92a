# Command-line surface
from .commands import COMMANDS
from .parser import build_parser

__all__ = ["COMMANDS", "build_parser"]
