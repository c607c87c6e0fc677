"""
Command-line surface: `rarevar fit | call | simulate | diagnose | verify-theorem`.

Exit codes: 0 success, 1 validation or input error, 2 numeric failure.
"""
import json
import logging
import sys

import click
import numba

from rarevar import __version__
from rarevar.utils.error_handling import RarevarError, format_error_report, validation_error

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
USAGE_EXIT_CODE = 1


class RarevarGroup(click.Group):
    """Click group that maps library errors and usage errors onto the exit-code contract."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except RarevarError as error:
            click.echo(json.dumps(format_error_report(error), indent=2), err=True)
            sys.exit(error.exit_code)

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as error:
            error.show()
            sys.exit(USAGE_EXIT_CODE if isinstance(error, click.UsageError) else error.exit_code)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(USAGE_EXIT_CODE)
        if not standalone_mode:
            return rv
        sys.exit(rv if isinstance(rv, int) else 0)


def configure_logging(level: str) -> None:
    level = level.upper()
    if level not in LOG_LEVELS:
        raise validation_error(f"Unknown log level '{level}'", invalid_fields={"log_level": ", ".join(LOG_LEVELS)})
    logging.basicConfig(format=LOG_FORMAT, stream=sys.stderr, force=True)
    logging.getLogger().setLevel(level)


def configure_threads(threads) -> None:
    if threads is None:
        return
    available = numba.config.NUMBA_NUM_THREADS
    if not 1 <= threads <= available:
        raise validation_error(
            f"--threads must be between 1 and {available}",
            error_code="parameter_out_of_range",
            invalid_fields={"threads": f"Got {threads}"},
        )
    numba.set_num_threads(threads)


@click.group(cls=RarevarGroup)
@click.version_option(__version__, prog_name="rarevar")
@click.option("--log-level", default="INFO", show_default=True, help="DEBUG, INFO, WARNING or ERROR")
@click.option("--threads", type=int, default=None, help="Cap on parallel worker threads (default: all cores)")
def cli(log_level, threads):
    """Rare-variant detection with discrete-data local false discovery rates."""
    configure_logging(log_level)
    configure_threads(threads)


from rarevar.cli.commands import call, diagnose, fit, simulate, verify_theorem  # noqa: E402

cli.add_command(fit)
cli.add_command(call)
cli.add_command(simulate)
cli.add_command(diagnose)
cli.add_command(verify_theorem)


def main():
    cli(prog_name="rarevar")
