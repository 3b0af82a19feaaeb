"""Command-line interface for copulasmm."""
import sys

import click

from . import __version__
from . import pipeline
from .config import load_config
from .errors import CopulaSMMError


def _common(f):
    f = click.option("--print-logs", is_flag=True, help="Print log messages to screen")(f)
    f = click.option("--verbose", "-v", is_flag=True, help="Verbose logging")(f)
    f = click.option("--out", "-o", "output_dir", default=None,
                     help="Output directory. Overrides config and COPULASMM_OUTPUT_DIR.")(f)
    f = click.option("--seed", type=int, default=None, help="Override the estimation / Monte Carlo seed")(f)
    f = click.option("--workers", "-w", type=int, default=None,
                     help="Worker processes for Monte Carlo. Overrides config and COPULASMM_WORKERS.")(f)
    f = click.option("--config", "-c", "config_path", required=True,
                     type=click.Path(dir_okay=False), help="Path to JSON config file")(f)
    return f


def _run(action, config_path, workers, seed, output_dir, **kwargs):
    try:
        cfg = pipeline.with_overrides(load_config(config_path), output_dir, workers, seed)
        action(cfg, **kwargs)
    except CopulaSMMError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)


@click.group()
@click.version_option(__version__, prog_name="copulasmm")
def main():
    """Factor copula estimation by simulated method of moments."""


@main.command("filter")
@_common
def filter_cmd(config_path, workers, seed, output_dir, verbose, print_logs):
    """Fit the marginal models and write standardized residuals."""
    _run(pipeline.run_filter, config_path, workers, seed, output_dir,
         verbose=verbose, print_logs_to_screen=print_logs)


@main.command("estimate")
@_common
@click.option("--progress", is_flag=True, help="Show bootstrap progress bars")
def estimate_cmd(config_path, workers, seed, output_dir, verbose, print_logs, progress):
    """Estimate the copula parameters with standard errors and the J-test."""
    _run(pipeline.run_estimate, config_path, workers, seed, output_dir,
         verbose=verbose, print_logs_to_screen=print_logs, progress=progress)


@main.command("montecarlo")
@_common
@click.option("--progress", is_flag=True, help="Show a replication progress bar")
def montecarlo_cmd(config_path, workers, seed, output_dir, verbose, print_logs, progress):
    """Run a Monte Carlo design and write its summary table."""
    _run(pipeline.run_montecarlo, config_path, workers, seed, output_dir,
         verbose=verbose, print_logs_to_screen=print_logs, progress=progress)


@main.command("jtest")
@_common
@click.option("--n-draws", type=int, default=None, help="Simulated critical value draws")
def jtest_cmd(config_path, workers, seed, output_dir, verbose, print_logs, n_draws):
    """Recompute the J-test from a previous estimate run."""
    _run(pipeline.run_jtest, config_path, workers, seed, output_dir,
         verbose=verbose, print_logs_to_screen=print_logs, n_draws=n_draws)


if __name__ == "__main__":
    main()
