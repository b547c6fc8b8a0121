import asyncio
import os
import statistics
import unittest

from lcmsec.core.const import ENV_VAR_SLOW_TESTS, MAX_DATAGRAM_SIZE
from lcmsec.core.exceptions import Oversize, SocketError
from lcmsec.core.transport import SimNet, udp_bind_multicast


def record(net: SimNet, count: int, seed_traffic: int = 20):
    nodes = [net.add_node() for _ in range(count)]
    inboxes = [[] for _ in nodes]
    for node, inbox in zip(nodes, inboxes):
        node.set_receiver(inbox.append)
    for i in range(seed_traffic):
        nodes[i % count].send(f"datagram {i}".encode())
    return nodes, inboxes


class TestSimNet(unittest.TestCase):

    def test_broadcast_excludes_sender(self):
        net = SimNet(seed=1, mu_ms=10, sigma_ms=0)
        a, b, c = net.add_node(), net.add_node(), net.add_node()
        inbox_a, inbox_b, inbox_c = [], [], []
        a.set_receiver(inbox_a.append)
        b.set_receiver(inbox_b.append)
        c.set_receiver(inbox_c.append)
        a.send(b"hello")
        self.assertEqual(net.run_until(9.9), [])
        events = net.run_until(10.5)
        self.assertEqual({(e.src, e.dst) for e in events}, {(0, 1), (0, 2)})
        self.assertEqual(inbox_a, [])
        self.assertEqual(inbox_b, [b"hello"])
        self.assertEqual(inbox_c, [b"hello"])
        self.assertEqual(net.now, 10.5)

    def test_deterministic(self):
        first = SimNet(seed=42, loss=0.2, mu_ms=25, sigma_ms=5)
        second = SimNet(seed=42, loss=0.2, mu_ms=25, sigma_ms=5)
        record(first, 4)
        record(second, 4)
        self.assertEqual(first.run_until(1000), second.run_until(1000))
        self.assertEqual(first.dropped, second.dropped)

    def test_loss_rate(self):
        net = SimNet(seed=3, loss=0.25)
        _, inboxes = record(net, 2, seed_traffic=4000)
        net.run_until(1000)
        self.assertEqual(net.sent, 4000)
        delivered = sum(len(i) for i in inboxes)
        self.assertEqual(delivered + net.dropped, 4000)
        self.assertAlmostEqual(net.dropped / 4000, 0.25, delta=0.03)

    def test_delay_distribution(self):
        net = SimNet(seed=17, mu_ms=25, sigma_ms=5)
        samples = [net.sample_delay() for _ in range(10_000)]
        self.assertAlmostEqual(statistics.fmean(samples), 25, delta=25 * 0.05)
        self.assertAlmostEqual(statistics.stdev(samples), 5, delta=5 * 0.05)

    def test_total_loss(self):
        net = SimNet(seed=3, loss=1.0)
        _, inboxes = record(net, 3)
        self.assertEqual(net.run_until(1000), [])
        self.assertEqual(inboxes, [[], [], []])

    def test_send_from_callback(self):
        net = SimNet(seed=2, mu_ms=10, sigma_ms=0)
        a, b = net.add_node(), net.add_node()
        echoed = []
        a.set_receiver(echoed.append)
        b.set_receiver(b.send)
        a.send(b"ping")
        net.run_until(25)
        self.assertEqual(echoed, [b"ping"])

    def test_timers(self):
        net = SimNet()
        node = net.add_node()
        fired = []
        node.call_later(5, lambda: fired.append("a"))
        cancelled = node.call_later(3, lambda: fired.append("b"))
        node.call_later(7, lambda: fired.append("c"))
        cancelled.cancel()
        net.run_for(6)
        self.assertEqual(fired, ["a"])
        net.run_for(6)
        self.assertEqual(fired, ["a", "c"])

    def test_closed_node(self):
        net = SimNet(sigma_ms=0)
        a, b = net.add_node(), net.add_node()
        inbox = []
        b.set_receiver(inbox.append)
        a.send(b"x")
        b.close()
        net.run_for(100)
        self.assertEqual(inbox, [])

    def test_oversize(self):
        net = SimNet()
        a = net.add_node()
        a.send(b"\x00" * MAX_DATAGRAM_SIZE)
        self.assertRaises(Oversize, a.send, b"\x00" * (MAX_DATAGRAM_SIZE + 1))

    def test_node_rng(self):
        net = SimNet(seed=5)
        self.assertEqual(net.node_rng(1).random(), SimNet(seed=5).node_rng(1).random())
        self.assertNotEqual(net.node_rng(1).random(), net.node_rng(2).random())
        self.assertRaises(ValueError, SimNet, loss=1.5)


class TestUdpMulticast(unittest.TestCase):

    def test_invalid_groups(self):
        async def bind(group):
            return udp_bind_multicast(group)

        for group in ["10.0.0.1:7667", "239.255.76.67", "239.255.76.67:99999"]:
            with self.subTest(group=group):
                self.assertRaises(SocketError, asyncio.run, bind(group))

    @unittest.skipUnless(os.environ.get(ENV_VAR_SLOW_TESTS), "needs a multicast capable interface")
    def test_loopback(self):
        async def exchange():
            endpoint = udp_bind_multicast("239.255.76.99:7699")
            received = asyncio.get_running_loop().create_future()
            endpoint.set_receiver(lambda d: received.done() or received.set_result(d))
            try:
                endpoint.send(b"ping")
                return await asyncio.wait_for(received, 2)
            finally:
                endpoint.close()

        self.assertEqual(asyncio.run(exchange()), b"ping")
