"""
Datagram endpoints: real UDP multicast and a deterministic simulated network.

Protocol code only talks to the Endpoint interface: send a datagram, receive
datagrams through a callback, read the clock and arm timers. The simulated
network runs on a simpy environment whose virtual clock counts milliseconds,
so a 32-node discovery experiment completes without sleeping.

Usage:
    net = SimNet(seed=7, loss=0.1, mu_ms=25, sigma_ms=5)
    a, b = net.add_node(), net.add_node()
    b.set_receiver(print)
    a.send(b"hello")
    net.run_until(100)
"""

import asyncio
import logging
import random
import socket
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Optional

import simpy

from lcmsec.core.const import DEFAULT_INTERFACE, DEFAULT_TTL, MAX_DATAGRAM_SIZE
from lcmsec.core.exceptions import Oversize, SocketError
from lcmsec.core.util import is_multicast_group, split_group

logger = logging.getLogger(__name__)

Receiver = Callable[[bytes], None]


class Timer(ABC):
    @abstractmethod
    def cancel(self):
        pass


class Endpoint(ABC):
    """Byte-transparent datagram endpoint with a clock and one-shot timers"""

    def __init__(self):
        self._receiver: Optional[Receiver] = None

    def set_receiver(self, receiver: Receiver):
        self._receiver = receiver

    def deliver(self, datagram: bytes):
        if self._receiver is not None:
            self._receiver(datagram)

    @staticmethod
    def check_size(datagram: bytes):
        if len(datagram) > MAX_DATAGRAM_SIZE:
            raise Oversize(f"datagram of {len(datagram)} bytes exceeds {MAX_DATAGRAM_SIZE}")

    @abstractmethod
    def send(self, datagram: bytes):
        pass

    @abstractmethod
    def now_ms(self) -> float:
        pass

    @abstractmethod
    def call_later(self, delay_ms: float, callback: Callable[[], None]) -> Timer:
        pass

    def close(self):
        pass


@dataclass(frozen=True)
class DeliveryEvent:
    time: float
    src: int
    dst: int
    datagram: bytes


class SimTimer(Timer):
    def __init__(self):
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class SimNet:
    """
    Seeded network model: independent per-link loss with probability `loss` and
    delay drawn from normal(mu_ms, sigma_ms) truncated at 0.

    Events are ordered by (time, enqueue sequence), which simpy guarantees for
    equal-priority events, so a fixed seed reproduces the schedule bit for bit.
    """

    def __init__(self, seed: int = 0, loss: float = 0.0, mu_ms: float = 25.0, sigma_ms: float = 5.0):
        if not 0.0 <= loss <= 1.0:
            raise ValueError(f"loss probability {loss} outside [0, 1]")
        self.seed = seed
        self.loss = loss
        self.mu_ms = mu_ms
        self.sigma_ms = sigma_ms
        self.env = simpy.Environment()
        self.rng = random.Random(seed)
        self.nodes: list["SimEndpoint"] = []
        self.pending_deliveries = 0
        self.sent = 0
        self.dropped = 0
        self._delivered: list[DeliveryEvent] = []

    @property
    def now(self) -> float:
        return float(self.env.now)

    def add_node(self) -> "SimEndpoint":
        ep = SimEndpoint(self, len(self.nodes))
        self.nodes.append(ep)
        return ep

    def node_rng(self, node_id: int) -> random.Random:
        """Independent deterministic RNG for a node's protocol decisions"""
        return random.Random(f"{self.seed}:{node_id}")

    def sample_delay(self) -> float:
        return max(0.0, self.rng.gauss(self.mu_ms, self.sigma_ms))

    def schedule(self, delay_ms: float, callback: Callable[[], None]) -> SimTimer:
        timer = SimTimer()

        def fire(_event):
            if not timer.cancelled:
                callback()

        self.env.timeout(max(0.0, delay_ms)).callbacks.append(fire)
        return timer

    def send(self, src: "SimEndpoint", datagram: bytes):
        Endpoint.check_size(datagram)
        self.sent += 1
        for dst in self.nodes:
            if dst is src or dst.closed:
                continue
            if self.loss > 0.0 and self.rng.random() < self.loss:
                self.dropped += 1
                continue
            self._enqueue(src, dst, bytes(datagram), self.sample_delay())

    def _enqueue(self, src: "SimEndpoint", dst: "SimEndpoint", datagram: bytes, delay: float):
        self.pending_deliveries += 1

        def arrive(_event):
            self.pending_deliveries -= 1
            if dst.closed:
                return
            self._delivered.append(DeliveryEvent(self.now, src.node_id, dst.node_id, datagram))
            dst.deliver(datagram)

        self.env.timeout(delay).callbacks.append(arrive)

    def run_until(self, t_virtual: float) -> list[DeliveryEvent]:
        """
        Process every event scheduled before t_virtual in timestamp order.

        The clock ends at t_virtual even when the queue runs dry first.
        """
        self._delivered = []
        if t_virtual > self.env.now:
            self.env.run(until=t_virtual)
        return self._delivered

    def run_for(self, duration_ms: float) -> list[DeliveryEvent]:
        return self.run_until(self.now + duration_ms)


class SimEndpoint(Endpoint):
    def __init__(self, net: SimNet, node_id: int):
        super().__init__()
        self.net = net
        self.node_id = node_id
        self.closed = False

    def send(self, datagram: bytes):
        self.net.send(self, datagram)

    def now_ms(self) -> float:
        return self.net.now

    def call_later(self, delay_ms: float, callback: Callable[[], None]) -> Timer:
        return self.net.schedule(delay_ms, callback)

    def close(self):
        self.closed = True


class _AsyncioTimer(Timer):
    def __init__(self, handle: asyncio.TimerHandle):
        self._handle = handle

    def cancel(self):
        self._handle.cancel()


class UdpMulticastEndpoint(Endpoint):
    """
    IPv4 multicast socket driven by an asyncio loop.

    The clock is wall-clock milliseconds, since discovery timestamps are
    compared across hosts. Sends are thread-safe; timers must be armed from the
    loop thread.
    """

    def __init__(self, sock: socket.socket, group: str, port: int, loop: asyncio.AbstractEventLoop):
        super().__init__()
        self.sock = sock
        self.group = group
        self.port = port
        self.loop = loop
        self.closed = False
        loop.add_reader(sock.fileno(), self._on_readable)

    def _on_readable(self):
        while True:
            try:
                datagram, _ = self.sock.recvfrom(MAX_DATAGRAM_SIZE)
            except (BlockingIOError, InterruptedError):
                return
            except OSError as e:
                logger.warning(f"multicast receive failed: {e}")
                return
            self.deliver(datagram)

    def send(self, datagram: bytes):
        self.check_size(datagram)
        try:
            self.sock.sendto(datagram, (self.group, self.port))
        except OSError as e:
            raise SocketError(f"multicast send to {self.group}:{self.port} failed: {e}") from e

    def now_ms(self) -> float:
        return time.time() * 1000.0

    def call_later(self, delay_ms: float, callback: Callable[[], None]) -> Timer:
        return _AsyncioTimer(self.loop.call_later(max(0.0, delay_ms) / 1000.0, callback))

    def close(self):
        if self.closed:
            return
        self.closed = True
        self.loop.remove_reader(self.sock.fileno())
        self.sock.close()


def udp_bind_multicast(group: str, interface: str = DEFAULT_INTERFACE, ttl: int = DEFAULT_TTL,
                       loop: Optional[asyncio.AbstractEventLoop] = None) -> UdpMulticastEndpoint:
    """
    Join a `<ipv4>:<port>` multicast group with loopback enabled.

    Raises:
        SocketError: invalid group, interface or socket failure
    """
    try:
        address, port = split_group(group)
        membership = socket.inet_aton(address) + socket.inet_aton(interface)
    except (ValueError, OSError) as e:
        raise SocketError(f"invalid multicast group {group!r} or interface {interface!r}: {e}") from e
    if not is_multicast_group(group):
        raise SocketError(f"{address} is not an IPv4 multicast address")
    if not 0 <= ttl <= 255:
        raise SocketError(f"ttl {ttl} out of range")

    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM, socket.IPPROTO_UDP)
    try:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if hasattr(socket, "SO_REUSEPORT"):
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
        sock.bind(("", port))
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_TTL, ttl)
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_LOOP, 1)
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_MULTICAST_IF, socket.inet_aton(interface))
        sock.setsockopt(socket.IPPROTO_IP, socket.IP_ADD_MEMBERSHIP, membership)
        sock.setblocking(False)
    except OSError as e:
        sock.close()
        raise SocketError(f"cannot join multicast group {group}: {e}") from e
    logger.info(f"joined multicast group {group} on {interface} with ttl {ttl}")
    return UdpMulticastEndpoint(sock, address, port, loop or asyncio.get_running_loop())
