"""
Console entry point for prerankcal.

Handled errors are logged, echoed on stderr and mapped to the exit code of
their class: 2 usage, 3 data or metric, 4 numerical failure.
"""
import sys
from typing import List, Optional

from src.cli import COMMANDS, build_parser
from src.shared.errors import PrerankcalError
from src.shared.logging import get_logger, setup_logging

logger = get_logger(__name__)


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except PrerankcalError as exc:
        logger.error(
            "command_failed",
            command=args.command,
            error_code=exc.error_code,
            message=exc.message,
            details=exc.details,
        )
        print(f"prerankcal {args.command}: {exc.message}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
