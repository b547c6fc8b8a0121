import logging

import click

from lcmsec.bench.discovery import sweep
from lcmsec.core import util
from lcmsec.core.const import BENCH_DISCOVERY_NODES, BENCH_DISCOVERY_TIME_BOUND_MS
from lcmsec.core.exceptions import BenchException

logger = logging.getLogger(__name__)


def parse_nodes(ctx, param, value):
    try:
        nodes = util.parse_int_list(value)
    except ValueError:
        raise click.BadParameter(f"{value} is not a comma separated list of integers")
    if not nodes or min(nodes) < 2:
        raise click.BadParameter("node counts must be at least 2")
    return nodes


@click.command("bench-discovery")
@click.option("--nodes", default=",".join(str(n) for n in BENCH_DISCOVERY_NODES), show_default=True,
              callback=parse_nodes, help="comma separated node counts")
@click.option("--runs", type=click.IntRange(min=1), default=1, show_default=True,
              help="runs per node count over consecutive seeds")
@click.option("--seed", type=int, default=0, show_default=True, help="seed of the first run")
@click.option("--mu-ms", type=click.FloatRange(min=0), default=25.0, show_default=True, help="mean link delay")
@click.option("--sigma-ms", type=click.FloatRange(min=0), default=5.0, show_default=True, help="link delay deviation")
@click.option("--loss", type=click.FloatRange(0, 1), default=0.0, show_default=True, help="per-link loss probability")
@click.option("--bound-ms", type=click.FloatRange(min=0, min_open=True), default=BENCH_DISCOVERY_TIME_BOUND_MS,
              show_default=True, help="virtual time allowed for convergence")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="write the report here instead of stdout")
def bench_discovery(nodes, runs, seed, mu_ms, sigma_ms, loss, bound_ms, csv_path):
    """
    Count JOIN and JOIN_RESPONSE messages until simulated nodes share k_g and k_ch
    """
    try:
        report = sweep(nodes, runs, seed, mu_ms, sigma_ms, loss, bound_ms)
        if csv_path:
            report.save(csv_path)
        else:
            click.echo(report.to_csv(), nl=False)
    except BenchException as e:
        logger.error(f"discovery bench failed: {e}")
        raise click.ClickException(str(e)) from e

    failed = report.column("converged").count(False)
    if failed:
        raise click.ClickException(f"{failed} of {len(report.rows)} runs did not converge within {bound_ms} ms")
