import logging
import sys

import click

import lcmsec.core.util as util
from lcmsec import version
from lcmsec.cli.cmd_bench_discovery import bench_discovery
from lcmsec.cli.cmd_bench_latency import bench_latency
from lcmsec.cli.cmd_ca import ca
from lcmsec.cli.cmd_demo import demo
from lcmsec.core.const import CONTEXT_SETTINGS

logger = logging.getLogger(__name__)


def print_version(ctx, param, value):
    if not value or ctx.resilient_parsing:
        return
    click.echo("lcmsec v{}".format(version()))
    click.echo("python v{}".format(sys.version))
    ctx.exit()


@click.group(context_settings=CONTEXT_SETTINGS)
@click.pass_context
@click.option(
    "-V",
    "--version",
    help="show version",
    is_flag=True,
    callback=print_version,
    expose_value=False,
    is_eager=True,
)
@click.option("-v", "--debug", help="enable debug logging", is_flag=True, default=False)
def cli(ctx, debug):
    util.init_logging(logging.DEBUG if debug else logging.INFO)
    ctx.ensure_object(dict)
    ctx.obj["debug"] = debug


cli.add_command(ca)
cli.add_command(demo)
cli.add_command(bench_latency)
cli.add_command(bench_discovery)
