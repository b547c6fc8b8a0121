"""
Echo latency bench.

A source publishes `count` messages of each size on the ping channel; the
reflector republishes every ping on the pong channel as soon as it is
delivered. Round-trip quantiles are reported next to the same exchange coded
as plain LCM, so the row shows what the security layer adds.

In simulation the round trip is the wall-clock processing time of both
sessions plus the virtual network delay. Over UDP it is wall-clock time.
"""

import asyncio
import logging
import random
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from lcmsec.bench.nodes import issue_identities, run_until_converged, sim_sessions
from lcmsec.bench.report import LATENCY_COLUMNS, BenchReport, percentile
from lcmsec.core.configstore import SessionConfig, TimingConfig
from lcmsec.core.const import (
    BENCH_DISCOVERY_TIME_BOUND_MS,
    BENCH_GROUP,
    BENCH_PING_CHANNEL,
    BENCH_PONG_CHANNEL,
    BENCH_TIMEOUT_MS,
    MAGIC_PLAIN_LCM,
    MAX_DATAGRAM_SIZE,
)
from lcmsec.core.exceptions import BenchException, WireCodecException
from lcmsec.core.identity import LocalIdentity
from lcmsec.core.session import Session, wait_ready
from lcmsec.core.transport import Receiver, SimNet, udp_bind_multicast
from lcmsec.core.wire_codec import decode_plain_lcm, encode_plain_lcm, peek_magic

logger = logging.getLogger(__name__)

_MSG_ID = struct.Struct(">I")
QUANTILES = (0.5, 0.9, 0.99)


@dataclass
class SizeResult:
    size: int
    count: int
    datagrams: int = 0
    rtts_us: list[float] = field(default_factory=list)
    baseline_us: list[float] = field(default_factory=list)

    @property
    def received(self) -> int:
        return len(self.rtts_us)

    def row(self, mode: str) -> dict:
        p50, p90, p99 = (percentile(self.rtts_us, q) for q in QUANTILES)
        b50, b90, b99 = (percentile(self.baseline_us, q) for q in QUANTILES)
        return dict(
            mode=mode,
            size=self.size,
            count=self.count,
            received=self.received,
            loss_rate=1.0 - self.received / self.count if self.count else 0.0,
            datagrams=self.datagrams,
            p50_us=p50,
            p90_us=p90,
            p99_us=p99,
            baseline_p50_us=b50,
            baseline_p90_us=b90,
            baseline_p99_us=b99,
            delta_p50_us=p50 - b50 if p50 is not None and b50 is not None else None,
        )


def _check_sizes(sizes: Iterable[int]) -> list[int]:
    sizes = list(sizes)
    if not sizes:
        raise BenchException("at least one message size is required")
    for size in sizes:
        if size < _MSG_ID.size:
            raise BenchException(f"message size {size} is smaller than the {_MSG_ID.size} byte message id")
    return sizes


def make_payload(msg_id: int, size: int, rng: random.Random) -> bytes:
    return _MSG_ID.pack(msg_id) + rng.randbytes(size - _MSG_ID.size)


def message_id(payload: bytes) -> Optional[int]:
    if len(payload) < _MSG_ID.size:
        return None
    return _MSG_ID.unpack_from(payload)[0]


def plain_echo(payload: bytes, seqno: int) -> bytes:
    """Encode a ping, decode it, echo it as pong and decode that"""
    name, seq, body = decode_plain_lcm(encode_plain_lcm(BENCH_PING_CHANNEL, seqno, payload))
    _, _, echoed = decode_plain_lcm(encode_plain_lcm(BENCH_PONG_CHANNEL, seq, body))
    return echoed


def plain_aware(receiver: Receiver, on_plain: Callable[[bytes], None]) -> Receiver:
    """Route plain LCM datagrams to on_plain and everything else to receiver"""

    def receive(datagram: bytes):
        try:
            magic = peek_magic(datagram)
        except WireCodecException:
            magic = None
        if magic == MAGIC_PLAIN_LCM:
            on_plain(datagram)
        else:
            receiver(datagram)

    return receive


def _require_bench_channels(config: SessionConfig):
    missing = {BENCH_PING_CHANNEL, BENCH_PONG_CHANNEL} - set(config.channels)
    if missing:
        raise BenchException(f"config lacks bench channels {', '.join(sorted(missing))}")


# simulation

class SimLatencyBench:
    """Source and reflector sessions on one SimNet"""

    def __init__(self, seed: int = 0, mu_ms: float = 0.0, sigma_ms: float = 0.0, loss: float = 0.0,
                 timeout_ms: float = BENCH_TIMEOUT_MS, timing: Optional[TimingConfig] = None, step_ms: float = 1.0):
        self.seed = seed
        self.timeout_ms = timeout_ms
        self.step_ms = step_ms
        self.rng = random.Random(seed)
        self.net = SimNet(seed, loss, mu_ms, sigma_ms)
        _, identities = issue_identities(2, BENCH_GROUP, [BENCH_PING_CHANNEL, BENCH_PONG_CHANNEL])
        self.source, self.reflector = sim_sessions(self.net, identities, BENCH_GROUP,
                                                   [BENCH_PING_CHANNEL, BENCH_PONG_CHANNEL], timing)
        self.arrivals: dict[int, float] = {}
        self.reflector.subscribe(BENCH_PING_CHANNEL, self._reflect)
        self.source.subscribe(BENCH_PONG_CHANNEL, self._on_pong)
        self._next_id = 0

    def _reflect(self, channel: str, payload: bytes):
        self.reflector.publish(BENCH_PONG_CHANNEL, payload)

    def _on_pong(self, channel: str, payload: bytes):
        msg_id = message_id(payload)
        if msg_id is not None:
            self.arrivals.setdefault(msg_id, self.net.now)

    def establish(self, bound_ms: float = BENCH_DISCOVERY_TIME_BOUND_MS) -> float:
        """Run discovery for both nodes; returns the virtual convergence time"""
        for session in (self.source, self.reflector):
            session.start()
        converged = run_until_converged(self.net, [self.source, self.reflector], self.net.now + bound_ms)
        if converged is None:
            raise BenchException(f"bench sessions did not agree on keys within {bound_ms} ms")
        logger.info(f"bench sessions keyed after {converged:.1f} virtual ms")
        return converged

    def echo(self, size: int) -> tuple[Optional[float], int]:
        """One round trip; returns (rtt in microseconds or None on timeout, ping datagram count)"""
        msg_id = self._next_id
        self._next_id += 1
        payload = make_payload(msg_id, size, self.rng)
        sent_at = self.net.now
        deadline = sent_at + self.timeout_ms
        started = time.perf_counter()
        datagrams = self.source.publish(BENCH_PING_CHANNEL, payload)
        while msg_id not in self.arrivals and self.net.now < deadline:
            self.net.run_until(min(deadline, self.net.now + self.step_ms))
        elapsed = time.perf_counter() - started
        if msg_id not in self.arrivals:
            return None, len(datagrams)
        return elapsed * 1e6 + (self.arrivals[msg_id] - sent_at) * 1000.0, len(datagrams)

    def baseline(self, size: int, seqno: int) -> float:
        payload = make_payload(seqno, size, self.rng)
        started = time.perf_counter()
        plain_echo(payload, seqno)
        elapsed = time.perf_counter() - started
        return elapsed * 1e6 + (self.net.sample_delay() + self.net.sample_delay()) * 1000.0

    def run(self, sizes: Iterable[int], count: int) -> BenchReport:
        sizes = _check_sizes(sizes)
        if count <= 0:
            raise BenchException("count must be positive")
        self.establish()
        report = BenchReport(LATENCY_COLUMNS, dict(mode="sim", seed=self.seed, count=count))
        for size in sizes:
            result = SizeResult(size, count)
            for i in range(count):
                rtt, result.datagrams = self.echo(size)
                if rtt is not None:
                    result.rtts_us.append(rtt)
                result.baseline_us.append(self.baseline(size, i))
            logger.info(f"size {size}: {result.received}/{count} echoes, {result.datagrams} datagrams per ping")
            report.add_row(**result.row("sim"))
        return report


def run_sim_latency(sizes: Iterable[int], count: int, seed: int = 0, mu_ms: float = 0.0, sigma_ms: float = 0.0,
                    loss: float = 0.0, timeout_ms: float = BENCH_TIMEOUT_MS,
                    timing: Optional[TimingConfig] = None) -> BenchReport:
    return SimLatencyBench(seed, mu_ms, sigma_ms, loss, timeout_ms, timing).run(sizes, count)


# udp

async def run_udp_source(config: SessionConfig, identity: LocalIdentity, sizes: Iterable[int], count: int,
                         timeout_ms: float = BENCH_TIMEOUT_MS, seed: int = 0) -> BenchReport:
    """
    Send pings and time the echoes of a reflector on the same group.

    Raises:
        NoKey: discovery did not finish within config.discovery_timeout_ms
    """
    sizes = _check_sizes(sizes)
    _require_bench_channels(config)
    loop = asyncio.get_running_loop()
    endpoint = udp_bind_multicast(config.group, config.interface, config.ttl, loop)
    session = Session(config, identity, endpoint)
    waiters: dict[int, asyncio.Future] = {}
    plain_waiters: dict[int, asyncio.Future] = {}

    def resolve(pending: dict, msg_id: Optional[int]):
        future = pending.pop(msg_id, None)
        if future is not None and not future.done():
            future.set_result(time.perf_counter())

    def on_pong(channel: str, payload: bytes):
        resolve(waiters, message_id(payload))

    def on_plain(datagram: bytes):
        try:
            name, seqno, _ = decode_plain_lcm(datagram)
        except WireCodecException:
            return
        if name == BENCH_PONG_CHANNEL:
            resolve(plain_waiters, seqno)

    async def round_trip(pending: dict, msg_id: int, send: Callable[[], list]) -> tuple[Optional[float], int]:
        future = loop.create_future()
        pending[msg_id] = future
        started = time.perf_counter()
        datagrams = send()
        try:
            finished = await asyncio.wait_for(future, timeout_ms / 1000.0)
        except asyncio.TimeoutError:
            pending.pop(msg_id, None)
            return None, len(datagrams)
        return (finished - started) * 1e6, len(datagrams)

    def send_plain(datagram: bytes) -> list:
        endpoint.send(datagram)
        return [datagram]

    session.subscribe(BENCH_PONG_CHANNEL, on_pong)
    endpoint.set_receiver(plain_aware(session.receive, on_plain))
    rng = random.Random(seed)
    report = BenchReport(LATENCY_COLUMNS, dict(mode="udp", group=config.group, count=count))
    try:
        session.start()
        await wait_ready(session, config.discovery_timeout_ms)
        msg_id = 0
        for size in sizes:
            result = SizeResult(size, count)
            for _ in range(count):
                payload = make_payload(msg_id, size, rng)
                rtt, result.datagrams = await round_trip(
                    waiters, msg_id, lambda: session.publish(BENCH_PING_CHANNEL, payload))
                if rtt is not None:
                    result.rtts_us.append(rtt)
                plain = encode_plain_lcm(BENCH_PING_CHANNEL, msg_id, payload)
                if len(plain) <= MAX_DATAGRAM_SIZE:
                    rtt, _ = await round_trip(plain_waiters, msg_id, lambda: send_plain(plain))
                    if rtt is not None:
                        result.baseline_us.append(rtt)
                msg_id += 1
            logger.info(f"size {size}: {result.received}/{count} echoes")
            report.add_row(**result.row("udp"))
    finally:
        session.close()
        endpoint.close()
    return report


async def run_udp_reflector(config: SessionConfig, identity: LocalIdentity, duration_s: Optional[float] = None):
    """Echo secure pings and plain LCM pings until cancelled or duration_s passed"""
    _require_bench_channels(config)
    loop = asyncio.get_running_loop()
    endpoint = udp_bind_multicast(config.group, config.interface, config.ttl, loop)
    session = Session(config, identity, endpoint)

    def on_ping(channel: str, payload: bytes):
        session.publish(BENCH_PONG_CHANNEL, payload)

    def on_plain(datagram: bytes):
        try:
            name, seqno, payload = decode_plain_lcm(datagram)
        except WireCodecException:
            return
        if name == BENCH_PING_CHANNEL:
            endpoint.send(encode_plain_lcm(BENCH_PONG_CHANNEL, seqno, payload))

    session.subscribe(BENCH_PING_CHANNEL, on_ping)
    endpoint.set_receiver(plain_aware(session.receive, on_plain))
    try:
        session.start()
        await wait_ready(session, config.discovery_timeout_ms)
        logger.info(f"reflecting on {config.group}")
        if duration_s is None:
            await asyncio.Event().wait()
        else:
            await asyncio.sleep(duration_s)
    finally:
        session.close()
        endpoint.close()
