import functools
import itertools
import random
import unittest
from collections import Counter
from dataclasses import replace

from lcmsec.bench.nodes import issue_identities, keys_agree, run_until_converged, sim_sessions
from lcmsec.core import exceptions
from lcmsec.core.configstore import TimingConfig
from lcmsec.core.const import MAX_SENDER_ID, T_INFINITY
from lcmsec.core.crypto_suite import GroupOps
from lcmsec.core.dbgka import envelope_signed_by, seal_envelope
from lcmsec.core.discovery import DiscoveryState, Member, Phase, assign_sender_ids, compare, merge
from lcmsec.core.exceptions import DiscoveryException, SenderIdExhausted
from lcmsec.core.identity import LcmDomain
from lcmsec.core.transport import SimNet
from lcmsec.core.wire_codec import GkaRoundPayload, JoinPayload, ManagementEnvelope, ManagementKind

GROUP = "239.255.76.67:7667"
CHANNEL = "chatter"


class TestDiscoveryState(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        _, identities = issue_identities(6, GROUP, [])
        cls.m = {i.permission(LcmDomain(GROUP)).uid: Member(i.permission(LcmDomain(GROUP)).uid, i.certificate)
                 for i in identities}

    def state(self, p, j, t, instance=0) -> DiscoveryState:
        return DiscoveryState(tuple(self.m[u] for u in p), tuple(self.m[u] for u in j), t, instance)

    def test_more_participants_win(self):
        self.assertEqual(compare(self.state([1, 2], [], T_INFINITY), self.state([1], [2, 3, 4], 10)), 1)

    def test_more_joiners_win(self):
        self.assertEqual(compare(self.state([1], [2], 10), self.state([1], [2, 3], 500)), -1)

    def test_earlier_start_wins(self):
        self.assertEqual(compare(self.state([], [1, 2], 100), self.state([], [3, 4], 200)), 1)

    def test_ties(self):
        a = self.state([1], [2], 100, 3)
        self.assertEqual(compare(a, self.state([1], [2], 100, 3)), 0)
        b = self.state([1], [3], 100, 3)
        self.assertNotEqual(compare(a, b), 0)
        self.assertEqual(compare(a, b), -compare(b, a))

    def test_merge_is_a_semilattice(self):
        rng = random.Random(2)
        states = []
        for _ in range(12):
            uids = rng.sample(range(1, 7), rng.randrange(1, 6))
            split = rng.randrange(len(uids) + 1)
            states.append(self.state(uids[:split], uids[split:], rng.choice([100, 200, T_INFINITY]), rng.randrange(3)))
        for a, b, c in itertools.product(states[:6], repeat=3):
            self.assertEqual(merge(a, a), a)
            self.assertEqual(merge(a, b), merge(b, a))
            self.assertEqual(merge(merge(a, b), c), merge(a, merge(b, c)))
        self.assertEqual(functools.reduce(merge, states), max(states, key=DiscoveryState.sort_key))

    def test_total_order(self):
        rng = random.Random(13)

        def random_state():
            uids = rng.sample(range(1, 7), rng.randrange(1, 7))
            split = rng.randrange(len(uids) + 1)
            return self.state(uids[:split], uids[split:], rng.choice([100, 150, 200, T_INFINITY]), rng.randrange(2))

        for _ in range(10_000):
            a, b, c = random_state(), random_state(), random_state()
            self.assertEqual(compare(a, b), -compare(b, a))
            self.assertEqual(compare(a, b) == 0, a == b)
            if compare(a, b) >= 0 and compare(b, c) >= 0:
                self.assertGreaterEqual(compare(a, c), 0)

    def test_gossip_order_does_not_matter(self):
        rng = random.Random(14)
        states = [self.state(rng.sample(range(1, 4), 1), rng.sample(range(4, 7), rng.randrange(3)),
                             rng.choice([100, 200]), rng.randrange(2)) for _ in range(8)]
        expected = max(states, key=DiscoveryState.sort_key)
        for _ in range(1000):
            rng.shuffle(states)
            self.assertEqual(functools.reduce(merge, states), expected)

    def test_invalid_states(self):
        self.assertRaises(DiscoveryException, self.state, [1, 1], [], 0)
        self.assertRaises(DiscoveryException, self.state, [1], [1, 2], 0)

    def test_payload_is_sorted(self):
        payload = self.state([3, 1], [5, 4], 100, 2).to_payload()
        self.assertEqual([e.uid for e in payload.participants], [1, 3])
        self.assertEqual([e.uid for e in payload.joining], [4, 5])
        self.assertEqual(payload.t, 100)
        self.assertEqual(payload.instance, 2)


class TestSenderIds(unittest.TestCase):

    def test_rank_order(self):
        self.assertEqual(assign_sender_ids([9, 1, 5]), {1: 1, 5: 2, 9: 3})
        self.assertEqual(len(set(assign_sender_ids(range(100, 400)).values())), 300)

    def test_exhausted(self):
        self.assertRaises(SenderIdExhausted, assign_sender_ids, range(MAX_SENDER_ID + 1))


class TestConvergence(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        _, cls.identities = issue_identities(5, GROUP, [CHANNEL])

    def converge(self, count: int, seed: int, loss: float = 0.0):
        net = SimNet(seed=seed, loss=loss, mu_ms=25, sigma_ms=5)
        sessions = sim_sessions(net, self.identities[:count], GROUP, [CHANNEL])
        for s in sessions:
            s.start()
        return net, sessions, run_until_converged(net, sessions, 30000)

    def test_converges(self):
        for count in (2, 4):
            with self.subTest(nodes=count):
                _, sessions, t = self.converge(count, seed=count)
                self.assertIsNotNone(t)
                self.assertTrue(keys_agree(sessions))
                self.assertEqual(sorted(s.sender_id for s in sessions), list(range(1, count + 1)))
                for s in sessions:
                    self.assertIs(s.group_discovery.phase, Phase.COMMITTED)

    def test_converges_with_loss(self):
        _, sessions, t = self.converge(4, seed=11, loss=0.1)
        self.assertIsNotNone(t)
        self.assertTrue(keys_agree(sessions))

    def test_deterministic_per_seed(self):
        _, first, t1 = self.converge(3, seed=5)
        _, second, t2 = self.converge(3, seed=5)
        self.assertEqual(t1, t2)
        scope = first[0].group_scope
        self.assertEqual(first[0].keys.newest(scope).key, second[0].keys.newest(scope).key)
        self.assertEqual(first[0].discovery_stats(), second[0].discovery_stats())

    def test_late_joiner(self):
        net, sessions, t = self.converge(4, seed=3)
        self.assertIsNotNone(t)
        scope = sessions[0].group_scope
        epoch = sessions[0].keys.newest(scope).epoch

        late = sim_sessions(net, self.identities[4:5], GROUP, [CHANNEL])[0]
        late.start()
        everyone = sessions + [late]
        self.assertIsNotNone(run_until_converged(net, everyone, net.now + 30000))
        self.assertGreater(sessions[0].keys.newest(scope).epoch, epoch)
        self.assertEqual(sorted(s.sender_id for s in everyone), [1, 2, 3, 4, 5])
        # a join keeps the incumbents' previous key for stragglers
        self.assertEqual(len(sessions[0].keys.lookup(scope, net.now)), 2)

    def test_timing_is_configurable(self):
        net = SimNet(seed=1)
        timing = TimingConfig(base_offset_ms=200, epsilon_max_ms=10)
        sessions = sim_sessions(net, self.identities[:2], GROUP, [CHANNEL], timing=timing)
        for s in sessions:
            s.start()
        self.assertIsNotNone(run_until_converged(net, sessions, 30000))


REJECTIONS = (exceptions.IdentityException, exceptions.DiscoveryException, exceptions.GkaException,
              exceptions.WireCodecException, exceptions.CryptoSuiteException)


def is_rejection(reason: str) -> bool:
    cls = getattr(exceptions, reason, None)
    return isinstance(cls, type) and issubclass(cls, REJECTIONS)


def flip_bit(rng: random.Random, data: bytes) -> bytes:
    i = rng.randrange(len(data) * 8)
    out = bytearray(data)
    out[i // 8] ^= 1 << (i % 8)
    return bytes(out)


class TestForgedManagement(unittest.TestCase):
    """A and B share a group key, C holds a valid certificate but never joined"""

    @classmethod
    def setUpClass(cls):
        _, (cls.a, cls.b, cls.c) = issue_identities(3, GROUP, [CHANNEL])
        group = GroupOps()
        cls.element = group.serialize(group.generator)

    def setUp(self):
        self.net = SimNet(seed=21)
        sessions = sim_sessions(self.net, [self.a, self.b], GROUP, [CHANNEL])
        for s in sessions:
            s.start()
        self.assertIsNotNone(run_until_converged(self.net, sessions, 30000))
        self.disc = sessions[1].group_discovery
        self.scope = self.disc.scope
        self.a_uid = self.a.permission(self.scope).uid

    def gathering(self) -> int:
        """Move B back to gathering with A in D through a fresh JOIN of A"""
        now = int(self.net.now)
        self.disc.dispatch(self.genuine_join(now), now)
        self.assertEqual(self.disc.stats["reagreement"], 1)
        self.disc.flush_response(now)
        self.assertIs(self.disc.phase, Phase.GATHERING)
        self.assertIn(self.a_uid, self.disc.state.uids)
        return self.disc.state.t

    def genuine_join(self, now: int) -> ManagementEnvelope:
        payload = JoinPayload(now + self.disc.timing.base_offset_ms, self.disc.state.instance,
                              self.a.certificate.to_der())
        return seal_envelope(ManagementKind.JOIN, self.scope, payload.encode(), self.a)

    def genuine_response(self, now: int) -> ManagementEnvelope:
        state = self.disc.state
        c = Member(self.c.permission(self.scope).uid, self.c.certificate)
        bigger = DiscoveryState(state.participants, state.joining + (c,), now + self.disc.timing.base_offset_ms,
                                state.instance)
        return seal_envelope(ManagementKind.JOIN_RESPONSE, self.scope, bigger.to_payload().encode(), self.a)

    def genuine_round(self, round_no: int, instance_id: int) -> ManagementEnvelope:
        kind = ManagementKind.GKA_ROUND1 if round_no == 1 else ManagementKind.GKA_ROUND2
        payload = GkaRoundPayload(self.a_uid, round_no, self.element, instance_id)
        return seal_envelope(kind, self.scope, payload.encode(), self.a)

    def genuine(self, now: int) -> list[ManagementEnvelope]:
        instance = self.disc.state.instance + 1
        envelopes = [self.genuine_join(now), self.genuine_response(now),
                     self.genuine_round(1, instance), self.genuine_round(2, instance)]
        for envelope in envelopes:
            self.assertTrue(envelope_signed_by(envelope, self.a.certificate))
        return envelopes

    def mutate(self, rng: random.Random, envelope: ManagementEnvelope) -> ManagementEnvelope:
        target = rng.choice(["signature", "signer", "payload"])
        if target == "signature":
            return replace(envelope, signature=rng.choice(
                [flip_bit(rng, envelope.signature), envelope.signature[:-1], b"not a signature"]))
        if target == "signer":
            return replace(envelope, signer=rng.choice([flip_bit(rng, envelope.signer), self.c.fingerprint]))
        return replace(envelope, payload=flip_bit(rng, envelope.payload))

    def snapshot(self) -> tuple:
        d = self.disc
        return (d.phase, d.state, d.epoch, d.seed, d.key, d.gka, dict(d.pending), list(d._early),
                d._acknowledged, d._answer_due, d._response_timer, d._deadline_timer, d._retry_timer,
                d._round_timer, d._retransmit_timer, d._missed_timer)

    def assert_forgeries_have_no_effect(self, now: int, seed: int, rounds: int = 300):
        rng = random.Random(seed)
        genuine = self.genuine(now)
        for i in range(rounds):
            forged = self.mutate(rng, rng.choice(genuine))
            before, stats = self.snapshot(), Counter(self.disc.stats)
            self.disc.dispatch(forged, now)
            self.assertEqual(self.snapshot(), before, f"forgery {i} of kind {forged.kind.name}")
            moved = self.disc.stats - stats
            self.assertLessEqual(sum(moved.values()), 1)
            for reason in moved:
                self.assertTrue(is_rejection(reason), f"forgery {i} counted as {reason}")

    def test_forgeries_while_committed(self):
        self.assertIs(self.disc.phase, Phase.COMMITTED)
        now = int(self.net.now)
        self.assert_forgeries_have_no_effect(now, seed=5)
        # the untouched round message does reach the watcher
        self.disc.dispatch(self.genuine_round(1, self.disc.state.instance + 1), now)
        self.assertEqual(self.disc.stats["missed_agreement"], 1)
        self.assertIsNotNone(self.disc._missed_timer)

    def test_forgeries_while_gathering(self):
        now = self.gathering()
        self.assert_forgeries_have_no_effect(now, seed=6)
        self.disc.dispatch(self.genuine_round(1, self.disc.state.instance + 1), now)
        self.assertEqual(self.disc.stats["early_start"], 1)
        self.assertIs(self.disc.phase, Phase.AGREEING)

    def test_unsigned_round_does_not_end_the_epoch(self):
        epoch = self.disc.epoch
        key = self.disc.key
        payload = GkaRoundPayload(self.a_uid, 1, self.element, self.disc.state.instance + 7)
        forged = ManagementEnvelope(ManagementKind.GKA_ROUND1, self.scope, self.a.fingerprint, payload.encode(),
                                    b"not a signature")
        self.disc.dispatch(forged)
        self.assertIsNone(self.disc._missed_timer)
        self.net.run_for(4 * self.disc.timing.round_deadline_ms)
        self.assertEqual(self.disc.epoch, epoch)
        self.assertEqual(self.disc.key, key)
        self.assertIs(self.disc.phase, Phase.COMMITTED)
        self.assertEqual(self.disc.stats["missed_agreement"], 0)
        self.assertEqual(self.disc.stats["reagreement"], 0)
        self.assertEqual(self.disc.stats["BadSignature"], 1)

    def test_round_for_another_uid_is_refused(self):
        payload = GkaRoundPayload(self.a_uid, 1, self.element, self.disc.state.instance + 1)
        envelope = seal_envelope(ManagementKind.GKA_ROUND1, self.scope, payload.encode(), self.c)
        self.disc.dispatch(envelope)
        self.assertIsNone(self.disc._missed_timer)
        self.assertEqual(self.disc.stats["NotAuthorized"], 1)

    def test_unsigned_round_is_not_buffered_while_gathering(self):
        now = self.gathering()
        payload = GkaRoundPayload(self.a_uid, 1, self.element, self.disc.state.instance + 1)
        forged = ManagementEnvelope(ManagementKind.GKA_ROUND1, self.scope, self.a.fingerprint, payload.encode(),
                                    b"not a signature")
        self.disc.dispatch(forged, now)
        self.assertEqual(list(self.disc._early), [])
        self.assertIs(self.disc.phase, Phase.GATHERING)
        self.assertEqual(self.disc.stats["early_start"], 0)
        self.assertEqual(self.disc.stats["BadSignature"], 1)

    def test_stale_round_is_not_buffered_while_gathering(self):
        now = self.gathering()
        self.disc.dispatch(self.genuine_round(1, self.disc.state.instance), now)
        self.assertEqual(list(self.disc._early), [])
        self.assertEqual(self.disc.stats["gka_ignored"], 1)
        self.assertIs(self.disc.phase, Phase.GATHERING)
