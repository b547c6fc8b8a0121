import asyncio
import logging

import click

from lcmsec.bench.latency import run_sim_latency, run_udp_reflector, run_udp_source
from lcmsec.core import util
from lcmsec.core.configstore import ConfigStore
from lcmsec.core.const import BENCH_COUNT, BENCH_SIZES, BENCH_TIMEOUT_MS
from lcmsec.core.exceptions import (
    BenchException,
    ConfigStoreException,
    IdentityException,
    SessionException,
    TransportException,
)
from lcmsec.core.identity import LocalIdentity

logger = logging.getLogger(__name__)


def parse_sizes(ctx, param, value):
    try:
        sizes = util.parse_int_list(value)
    except ValueError:
        raise click.BadParameter(f"{value} is not a comma separated list of integers")
    if not sizes:
        raise click.BadParameter("at least one size is required")
    return sizes


@click.command("bench-latency")
@click.option("--sim", is_flag=True, default=False, help="run source and reflector on a simulated network")
@click.option("--role", type=click.Choice(["source", "reflector"]), default="source", show_default=True,
              help="role of this process on a real multicast group")
@click.option("-c", "--config", type=click.Path(exists=True, dir_okay=False),
              help="session config file, required without --sim")
@click.option("--sizes", default=",".join(str(s) for s in BENCH_SIZES), show_default=True, callback=parse_sizes,
              help="comma separated payload sizes in bytes")
@click.option("--count", type=click.IntRange(min=1), default=BENCH_COUNT, show_default=True,
              help="messages per size")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--mu-ms", type=click.FloatRange(min=0), default=0.0, show_default=True, help="simulated mean delay")
@click.option("--sigma-ms", type=click.FloatRange(min=0), default=0.0, show_default=True,
              help="simulated delay deviation")
@click.option("--loss", type=click.FloatRange(0, 1), default=0.0, show_default=True, help="simulated loss probability")
@click.option("--timeout-ms", type=click.FloatRange(min=0, min_open=True), default=BENCH_TIMEOUT_MS,
              show_default=True, help="per-message echo timeout")
@click.option("--duration", type=float, help="seconds the reflector stays up, runs until interrupted by default")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="write the report here instead of stdout")
def bench_latency(sim, role, config, sizes, count, seed, mu_ms, sigma_ms, loss, timeout_ms, duration, csv_path):
    """
    Echo round-trip latency of lcmsec against plain LCM
    """
    try:
        if sim:
            report = run_sim_latency(sizes, count, seed, mu_ms, sigma_ms, loss, timeout_ms)
        else:
            if not config:
                raise click.UsageError("--config is required without --sim")
            cfg = ConfigStore(config).session_config()
            identity = LocalIdentity.load(cfg.certificate, cfg.private_key, cfg.root_store)
            if role == "reflector":
                asyncio.run(run_udp_reflector(cfg, identity, duration))
                return
            report = asyncio.run(run_udp_source(cfg, identity, sizes, count, timeout_ms, seed))
    except KeyboardInterrupt:
        logger.info("interrupted")
        return
    except (BenchException, ConfigStoreException, IdentityException, SessionException, TransportException) as e:
        logger.error(f"latency bench failed: {e}")
        raise click.ClickException(str(e)) from e

    if csv_path:
        report.save(csv_path)
    else:
        click.echo(report.to_csv(), nl=False)
