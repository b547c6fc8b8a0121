import asyncio
import logging
import sys
from typing import Optional

import click

from lcmsec.core.configstore import ConfigStore, SessionConfig
from lcmsec.core.exceptions import (
    ConfigStoreException,
    IdentityException,
    SessionException,
    TransportException,
)
from lcmsec.core.identity import LocalIdentity
from lcmsec.core.session import Session, wait_ready
from lcmsec.core.transport import udp_bind_multicast

logger = logging.getLogger(__name__)


async def run_publisher(config: SessionConfig, identity: LocalIdentity, channel: str, stream=None):
    """Publish every line of stream on channel until EOF"""
    stream = stream or sys.stdin
    loop = asyncio.get_running_loop()
    endpoint = udp_bind_multicast(config.group, config.interface, config.ttl, loop)
    session = Session(config, identity, endpoint)
    try:
        session.start()
        await wait_ready(session, config.discovery_timeout_ms)
        while True:
            line = await loop.run_in_executor(None, stream.readline)
            if not line:
                break
            session.publish(channel, line.rstrip("\n").encode())
        logger.info(f"published {session.stats['published']} messages on {channel}")
    finally:
        session.close()
        endpoint.close()


async def run_subscriber(config: SessionConfig, identity: LocalIdentity, channels: list[str],
                         duration_s: Optional[float] = None):
    loop = asyncio.get_running_loop()
    endpoint = udp_bind_multicast(config.group, config.interface, config.ttl, loop)
    session = Session(config, identity, endpoint)

    def show(channel: str, payload: bytes):
        click.echo(f"{channel}: {payload.decode('utf-8', errors='replace')}")

    for channel in channels:
        session.subscribe(channel, show)
    try:
        session.start()
        await wait_ready(session, config.discovery_timeout_ms)
        if duration_s is None:
            await asyncio.Event().wait()
        else:
            await asyncio.sleep(duration_s)
    finally:
        drops = {k: v for k, v in session.stats.items() if k not in ("delivered", "published")}
        logger.info(f"delivered {session.stats['delivered']} messages, drops: {drops}")
        session.close()
        endpoint.close()


@click.command()
@click.argument("role", type=click.Choice(["pub", "sub"]))
@click.option("-c", "--config", required=True, type=click.Path(exists=True, dir_okay=False), help="session config file")
@click.option("--channel", help="channel to publish on or subscribe to, defaults to every configured channel")
@click.option("--duration", type=float, help="seconds the subscriber stays up, runs until interrupted by default")
def demo(role, config, channel, duration):
    """
    Line-oriented publisher reading stdin, or subscriber printing deliveries
    """
    try:
        cfg = ConfigStore(config).session_config()
        identity = LocalIdentity.load(cfg.certificate, cfg.private_key, cfg.root_store)
        if channel is not None and channel not in cfg.channels:
            raise SessionException(f"channel {channel} is not configured in {config}")
        if not cfg.channels:
            raise SessionException(f"{config} configures no channels")
        if role == "pub":
            asyncio.run(run_publisher(cfg, identity, channel or cfg.channels[0]))
        else:
            asyncio.run(run_subscriber(cfg, identity, [channel] if channel else list(cfg.channels), duration))
    except KeyboardInterrupt:
        logger.info("interrupted")
    except (ConfigStoreException, IdentityException, SessionException, TransportException) as e:
        logger.error(f"demo {role} failed: {e}")
        raise click.ClickException(str(e)) from e
