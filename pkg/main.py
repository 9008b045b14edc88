import logging
import sys

import click

from ergodic.exceptions import ConfigurationError, ErgodicError
from ergodic.Experiment import ExperimentConfig, compare_runs, run_experiment

logger = logging.getLogger("ergodic")

LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]


def common_options(func):
    """Options shared by every run command."""
    func = click.option("--seed", type=int, default=None, help="Monte Carlo seed.")(func)
    func = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(func)
    func = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                        help="Dotted configuration override, e.g. problem.h=0.05 (repeatable).")(func)
    func = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                        help="JSON or TOML configuration file.")(func)
    return func


def execute(mode, config_path, overrides, out, seed):
    try:
        config = ExperimentConfig.load(config_path, overrides, mode=mode, out=out, seed=seed)
    except ConfigurationError as e:
        click.echo("configuration error: %s" % e, err=True)
        sys.exit(2)
    try:
        manifest = run_experiment(config)
    except ErgodicError as e:
        click.echo("run failed: %s" % e, err=True)
        sys.exit(1)
    for key, value in sorted(manifest.summary.items()):
        click.echo("%s: %s" % (key, value))
    if not manifest.ok:
        click.echo("%s failed: %s" % (manifest.failure["phase"], manifest.failure["message"]), err=True)
        sys.exit(1)
    click.echo("manifest written to %s" % config.out)


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG.")
def cli(verbose):
    """Relative value iteration for ergodic control of controlled diffusions."""
    logging.basicConfig(level=LEVELS[min(verbose, len(LEVELS) - 1)],
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@common_options
def solve(config_path, overrides, out, seed):
    """Policy iteration for (rho, V*, v*)."""
    execute("pia", config_path, overrides, out, seed)


@cli.command()
@click.option("--mode", type=click.Choice(["vi", "rvi", "rvi-min"]), default="rvi", show_default=True)
@common_options
def evolve(mode, config_path, overrides, out, seed):
    """Time-march VI / RVI from phi0 (the stationary solve provides rho and the target)."""
    execute(mode, config_path, overrides, out, seed)


@cli.command()
@common_options
def simulate(config_path, overrides, out, seed):
    """Monte Carlo estimate of the ergodic cost under the policy-iteration policy."""
    execute("mc-check", config_path, overrides, out, seed)


@cli.command()
@common_options
def full(config_path, overrides, out, seed):
    """Solve, RVI run, VI coupling, Monte Carlo cross-checks and lemma diagnostics."""
    execute("full", config_path, overrides, out, seed)


@cli.command()
@click.argument("manifest_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest_b", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="comparison", show_default=True)
def compare(manifest_a, manifest_b, out):
    """Compare the diagnostics series of two runs (e.g. h against h/2)."""
    try:
        _, final = compare_runs(manifest_a, manifest_b, out)
    except ConfigurationError as e:
        click.echo("cannot compare: %s" % e, err=True)
        sys.exit(2)
    click.echo(final.to_string(index=False))


if __name__ == "__main__":
    cli()
