#!/usr/bin/env python3
"""
Command-line launcher for the genscl package.
Configures logging from the environment and runs the CLI.
"""

import logging
import sys
from typing import List, Optional

from .core.cli import run_cli
from .core.config import Config
from .core.errors import ConfigError, ExitCode


def configure_logging(config: Config) -> None:
    """Log to stderr, and to GSCL_LOG_FILE when set; stdout carries reports only."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if config.log_file:
        handlers.append(logging.FileHandler(config.log_file))
    logging.basicConfig(
        level=getattr(logging, config.log_level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> None:
    """Main entry point for the genscl command."""
    try:
        config = Config.from_env()
    except ConfigError as e:
        print(f"genscl: error: {e}", file=sys.stderr)
        sys.exit(ExitCode.USAGE)

    configure_logging(config)
    logger = logging.getLogger(__name__)

    try:
        code = run_cli(argv, config)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        code = 130
    sys.exit(code)


if __name__ == "__main__":
    main()
