"""
Main application module for the Slow SDE Laboratory.
Parses the command line, sets up logging and the results ledger, and runs
one command.
"""

import argparse
import asyncio
import logging
import os
import sys

from config import Config
from config_parser import parse_config
from command_handler import CommandHandler
from db_manager import ResultsDatabase
from exceptions import ConfigError
from reporter import Reporter

logger = logging.getLogger(__name__)

COMMANDS = ("run", "sde", "compare", "moments", "sweep", "verify")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def build_parser():
    parser = argparse.ArgumentParser(prog="slowsde", description="Local SGD and Slow SDE laboratory")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    parser.add_argument("--out", help=f"output directory (default: {Config.OUTPUT_DIR})")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for experiment cells")
    parser.add_argument("--quiet", action="store_true", help="log warnings and errors only")
    return parser


def configure_logging(quiet=False):
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def add_log_file(output_dir):
    """Mirror the log into the resolved output directory."""
    handler = logging.FileHandler(os.path.join(output_dir, Config.LOG_FILE))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


async def main(argv=None):
    """Main entry point; returns the exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.quiet)
    code = Config.EXIT_RUNTIME_FAILURE
    try:
        logger.info(f"Starting Slow SDE Laboratory: {args.command}")

        resolved = parse_config(args.config, args.overrides, output=args.out)
        os.makedirs(resolved.output, exist_ok=True)
        add_log_file(resolved.output)

        db_manager = ResultsDatabase(os.path.join(resolved.output, Config.DB_FILE))
        if not await db_manager.init_db():
            logger.warning("Results ledger unavailable; continuing without it")
            db_manager = None

        reporter = Reporter(db_manager, resolved.output, quiet=args.quiet)
        command_handler = CommandHandler(db_manager, reporter, resolved, args.threads)
        code = await command_handler.handle(args.command)

    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        code = Config.EXIT_CONFIG_ERROR
    except KeyboardInterrupt:
        logger.info("Stopped by user")
    except Exception as e:
        logger.error(f"Error in main application: {e}")
        code = Config.EXIT_RUNTIME_FAILURE
    finally:
        if 'db_manager' in locals() and db_manager is not None:
            await db_manager.close()

        logger.info(f"Shutdown complete (exit code {code})")
    return code


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
