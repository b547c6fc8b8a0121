"""
Leaderless group discovery for one scope (group-level or one channel).

Nodes announce themselves with a signed JOIN = (t, instance hint, cert) and
gossip their DiscoveryState D = (P, J, t, instance) in JOIN_RESPONSEs. States
are ordered by (|P|, |J|, -t) and merged by taking the maximum, so every node
that sees the same messages holds the same D. When the local clock reaches
D.t the state is frozen and the key agreement runs over P and J; success
moves J into P, failure empties both sets and restarts discovery.

Usage:
    disc = GroupDiscovery(scope, identity, endpoint, ledger, TimingConfig(), on_commit=install)
    disc.initiate_join()
    # hand every management envelope of the scope to disc.dispatch(envelope)
"""

import logging
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Iterable, Optional

from lcmsec.core.configstore import TimingConfig
from lcmsec.core.const import DEFAULT_CURVE, GKA_LINGER_RETRANSMITS, MAX_SENDER_ID, T_INFINITY
from lcmsec.core.crypto_suite import KeyMaterial, kdf_context, kdf_expand
from lcmsec.core.dbgka import (
    GkaMode,
    GroupKeyAgreement,
    InstanceLedger,
    RingConfig,
    RingMember,
    RoundPhase,
    envelope_signed_by,
    seal_envelope,
)
from lcmsec.core.exceptions import (
    BadSignature,
    CryptoSuiteException,
    DiscoveryException,
    GkaException,
    IdentityException,
    InvalidPhase,
    NotAuthorized,
    SenderIdExhausted,
    WireCodecException,
)
from lcmsec.core.identity import LcmDomain, LocalIdentity, PeerCertificate, authorize
from lcmsec.core.transport import Endpoint, Timer
from lcmsec.core.wire_codec import (
    GkaRoundPayload,
    JoinPayload,
    JoinResponsePayload,
    ManagementEnvelope,
    ManagementKind,
    MemberEntry,
    encode_management,
)

logger = logging.getLogger(__name__)

EARLY_ROUND_BUFFER = 1024


class Phase(Enum):
    IDLE = "idle"
    GATHERING = "gathering"
    AGREEING = "agreeing"
    COMMITTED = "committed"


@dataclass(frozen=True, order=True)
class Member:
    uid: int
    certificate: PeerCertificate = field(compare=False)

    def entry(self) -> MemberEntry:
        return MemberEntry(self.uid, self.certificate.to_der())


@dataclass(frozen=True)
class DiscoveryState:
    """D = (P, J, t) plus the highest instance id known to its members"""

    participants: tuple[Member, ...] = ()
    joining: tuple[Member, ...] = ()
    t: int = T_INFINITY
    instance: int = 0

    def __post_init__(self):
        object.__setattr__(self, "participants", tuple(sorted(self.participants)))
        object.__setattr__(self, "joining", tuple(sorted(self.joining)))
        p = {m.uid for m in self.participants}
        j = {m.uid for m in self.joining}
        if len(p) != len(self.participants) or len(j) != len(self.joining):
            raise DiscoveryException("duplicate uid in discovery state")
        if p & j:
            raise DiscoveryException(f"uids {sorted(p & j)} are both participating and joining")

    @property
    def members(self) -> tuple[Member, ...]:
        return tuple(sorted(self.participants + self.joining))

    @property
    def participant_uids(self) -> frozenset[int]:
        return frozenset(m.uid for m in self.participants)

    @property
    def uids(self) -> frozenset[int]:
        return frozenset(m.uid for m in self.members)

    def to_payload(self) -> JoinResponsePayload:
        return JoinResponsePayload(self.t, self.instance,
                                   tuple(m.entry() for m in self.participants),
                                   tuple(m.entry() for m in self.joining))

    @cached_property
    def canonical_bytes(self) -> bytes:
        return self.to_payload().encode()

    def sort_key(self) -> tuple:
        # exact ties: instance, then member uids, then the encoded certificates
        return (len(self.participants), len(self.joining), -self.t, self.instance,
                tuple(m.uid for m in self.participants), tuple(m.uid for m in self.joining), self.canonical_bytes)


def compare(d1: DiscoveryState, d2: DiscoveryState) -> int:
    """
    Total order on states: more participants, then more joiners, then the
    earlier start time wins; exact ties fall back to the canonical encoding.

    Returns -1, 0 or 1 like a classic cmp.
    """
    k1, k2 = d1.sort_key(), d2.sort_key()
    return (k1 > k2) - (k1 < k2)


def merge(d1: DiscoveryState, d2: DiscoveryState) -> DiscoveryState:
    return d1 if compare(d1, d2) >= 0 else d2


def assign_sender_ids(uids: Iterable[int]) -> dict[int, int]:
    """
    Map ring members to 16-bit sender ids by rank in ascending uid order.

    Raises:
        SenderIdExhausted: more members than sender ids
    """
    ordered = sorted(set(uids))
    if len(ordered) > MAX_SENDER_ID:
        raise SenderIdExhausted(f"{len(ordered)} members do not fit into 16-bit sender ids")
    return {uid: rank + 1 for rank, uid in enumerate(ordered)}


@dataclass(frozen=True)
class PendingJoin:
    member: Member
    t: int
    instance: int


@dataclass(frozen=True)
class Commit:
    """Outcome of a successful agreement, handed to the on_commit callback"""

    scope: LcmDomain
    key: KeyMaterial
    instance_id: int
    members: tuple[Member, ...]
    my_uid: int
    sender_ids: dict[int, int] = field(default_factory=dict)


CommitCallback = Callable[[Commit], None]


class GroupDiscovery:
    """
    Discovery and key agreement driver for one scope.

    All handlers run on the endpoint's event loop. dispatch() is the entry
    point for hostile input and never raises.
    """

    def __init__(self, scope: LcmDomain, identity: LocalIdentity, endpoint: Endpoint, ledger: InstanceLedger,
                 timing: Optional[TimingConfig] = None, rng: Optional[random.Random] = None,
                 curve: str = DEFAULT_CURVE, on_commit: Optional[CommitCallback] = None):
        self.scope = scope
        self.identity = identity
        self.endpoint = endpoint
        self.ledger = ledger
        self.timing = timing or TimingConfig()
        self.rng = rng or random.Random()
        self.curve = curve
        self.on_commit = on_commit
        # raises NotAuthorized for a scope the certificate does not cover
        self.me = Member(identity.permission(scope).uid, identity.certificate)

        self.phase = Phase.IDLE
        self.state = DiscoveryState()
        self.pending: dict[int, PendingJoin] = {}
        self.stats: Counter = Counter()
        self.gka: Optional[GroupKeyAgreement] = None
        self.group_epoch = 0
        self.epoch = 0
        self.seed: Optional[bytes] = None
        self.key: Optional[KeyMaterial] = None
        self.sender_ids: dict[int, int] = {}
        self.committed_uids: frozenset[int] = frozenset()
        self.last_commit: Optional[float] = None

        self._my_join: Optional[JoinPayload] = None
        self._acknowledged = False
        self._answer_due = False
        self._early: deque = deque(maxlen=EARLY_ROUND_BUFFER)
        self._known: dict[bytes, Member] = {self.me.certificate.fingerprint: self.me}
        self._by_der: dict[bytes, Member] = {self.me.certificate.to_der(): self.me}
        self._linger = 0
        self._run_group_epoch = 0
        self._round_phase: Optional[RoundPhase] = None

        self._response_timer: Optional[Timer] = None
        self._deadline_timer: Optional[Timer] = None
        self._retry_timer: Optional[Timer] = None
        self._round_timer: Optional[Timer] = None
        self._retransmit_timer: Optional[Timer] = None
        self._missed_timer: Optional[Timer] = None

    def __repr__(self) -> str:
        return f"GroupDiscovery({self.scope}, uid={self.me.uid}, phase={self.phase.value})"

    # plumbing

    def _now(self) -> int:
        return int(self.endpoint.now_ms())

    def _set_phase(self, phase: Phase):
        if phase is not self.phase:
            logger.info(f"{self.scope} uid {self.me.uid}: {self.phase.value} -> {phase.value}")
            self.phase = phase

    def _send(self, kind: ManagementKind, payload: bytes) -> bytes:
        datagram = encode_management(seal_envelope(kind, self.scope, payload, self.identity))
        self.endpoint.send(datagram)
        return datagram

    @staticmethod
    def _cancel(timer: Optional[Timer]):
        if timer is not None:
            timer.cancel()

    def close(self):
        for timer in (self._response_timer, self._deadline_timer, self._retry_timer,
                      self._round_timer, self._retransmit_timer, self._missed_timer):
            self._cancel(timer)
        self._response_timer = self._deadline_timer = self._retry_timer = None
        self._round_timer = self._retransmit_timer = self._missed_timer = None

    def _resolve(self, der: bytes) -> Member:
        """
        Verify a certificate against the trust store and the scope.

        Raises:
            InvalidCertificate, NotAuthorized, Expired
        """
        member = self._by_der.get(der)
        if member is not None:
            return member
        cert = PeerCertificate.from_der(der)
        verdict = self.identity.trust.verify(cert)
        if not verdict:
            raise NotAuthorized(f"certificate {cert!r} does not chain to a trusted root: {verdict.reason}")
        member = Member(authorize(cert, self.scope).uid, cert)
        self._by_der[der] = member
        self._known[cert.fingerprint] = member
        return member

    def _includes_me(self, state: DiscoveryState) -> bool:
        if any(m.uid == self.me.uid for m in state.joining):
            return True
        if any(m.uid == self.me.uid for m in state.participants):
            return self.seed is not None and state.participant_uids == self.committed_uids
        return False

    # joining

    def initiate_join(self, now: Optional[int] = None) -> bytes:
        """
        Start discovering: D := (∅, {self}, now + offset + ε) and broadcast JOIN.

        Pending JOINs seen while idle are folded in by the next response.

        Raises:
            InvalidPhase: an agreement is running
            NotAuthorized: the own certificate does not cover the scope
        """
        if self.phase is Phase.AGREEING:
            raise InvalidPhase(f"cannot join {self.scope} while an agreement is running")
        authorize(self.identity.certificate, self.scope)
        now = self._now() if now is None else now
        instance = self.ledger.highest(self.scope)
        t_a = int(now + self.timing.base_offset_ms + self.rng.uniform(0, self.timing.epsilon_max_ms))
        self._my_join = JoinPayload(t_a, instance, self.me.certificate.to_der())
        self.state = DiscoveryState((), (self.me,), t_a, instance)
        self._acknowledged = False
        self._answer_due = False
        self._set_phase(Phase.GATHERING)
        if self.pending:
            self._arm_response()
        self._arm_deadline()
        return self._send_join()

    def _send_join(self) -> bytes:
        self.stats["join_sent"] += 1
        datagram = self._send(ManagementKind.JOIN, self._my_join.encode())
        self._arm_retry()
        return datagram

    def _refresh_join(self, now: int):
        """Re-announce with a fresh t once the previous JOIN went stale"""
        if self._my_join is None or self._my_join.t <= now:
            t_a = int(now + self.timing.base_offset_ms + self.rng.uniform(0, self.timing.epsilon_max_ms))
            self._my_join = JoinPayload(t_a, self.ledger.highest(self.scope), self.me.certificate.to_der())
        self._send_join()

    def _arm_retry(self):
        self._cancel(self._retry_timer)
        self._retry_timer = self.endpoint.call_later(self.timing.join_retry_ms, self._on_retry)

    def _on_retry(self):
        self._retry_timer = None
        if self.phase is not Phase.GATHERING or self._acknowledged or self._my_join is None:
            return
        if self._my_join.t <= self._now():
            return
        self.stats["join_retry"] += 1
        self._send_join()

    def handle_join(self, envelope: ManagementEnvelope, now: Optional[int] = None):
        """
        Record a verified JOIN and arm the randomized response.

        Raises:
            BadSignature, NotAuthorized, InvalidCertificate
        """
        now = self._now() if now is None else now
        payload = JoinPayload.decode(envelope.payload)
        member = self._resolve(payload.certificate)
        if not envelope_signed_by(envelope, member.certificate):
            raise BadSignature(f"JOIN of uid {member.uid} does not verify")
        if member.uid == self.me.uid:
            return
        join = PendingJoin(member, payload.t, payload.instance)

        if self.phase in (Phase.COMMITTED, Phase.GATHERING) and member.uid in self.state.participant_uids:
            if self._is_reagreement_request(join):
                logger.info(f"{self.scope} uid {self.me.uid}: uid {member.uid} requests a fresh agreement")
                self.stats["reagreement"] += 1
                self.pending[member.uid] = join
                self.restart(now)
            else:
                self.stats["stale_join"] += 1
            return

        if self.pending.get(member.uid) == join:
            return
        self.pending[member.uid] = join
        if self.phase in (Phase.GATHERING, Phase.COMMITTED):
            self._arm_response()

    def _is_reagreement_request(self, join: PendingJoin) -> bool:
        if self.last_commit is None:
            return False
        return join.t >= self.last_commit + self.timing.base_offset_ms - self.timing.clock_skew_ms

    # responding

    def _arm_response(self):
        if self._response_timer is not None:
            return
        delay = self.rng.uniform(self.timing.response_delay_min_ms, self.timing.response_delay_max_ms)
        self._response_timer = self.endpoint.call_later(delay, self.flush_response)

    def flush_response(self, now: Optional[int] = None) -> Optional[bytes]:
        """
        Fold new joiners into D and broadcast it.

        Nothing is sent when no new joiner arrived and no peer needs our
        larger state.
        """
        self._response_timer = None
        if self.phase not in (Phase.GATHERING, Phase.COMMITTED):
            return None
        now = self._now() if now is None else now
        present = self.state.uids
        fresh = []
        for join in self.pending.values():
            if join.member.uid in present:
                continue
            if join.t + self.timing.clock_skew_ms < now:
                self.stats["stale_join"] += 1
                continue
            fresh.append(join)
        self.pending.clear()

        if fresh:
            state = self.state
            self.state = DiscoveryState(
                state.participants,
                state.joining + tuple(j.member for j in fresh),
                min([state.t] + [j.t for j in fresh]),
                max([state.instance] + [j.instance for j in fresh]),
            )
            self._set_phase(Phase.GATHERING)
            self._arm_deadline()
        elif not self._answer_due:
            return None
        self._answer_due = False
        self.stats["join_response_sent"] += 1
        return self._send(ManagementKind.JOIN_RESPONSE, self.state.to_payload().encode())

    def handle_join_response(self, envelope: ManagementEnvelope, now: Optional[int] = None):
        """
        Merge a gossiped state: D := max(D, D_msg).

        Raises:
            BadSignature, NotAuthorized, DiscoveryException
        """
        if self.phase not in (Phase.GATHERING, Phase.COMMITTED):
            self.stats["response_ignored"] += 1
            return
        now = self._now() if now is None else now
        payload = JoinResponsePayload.decode(envelope.payload)
        signer = self._response_signer(envelope, payload)
        if not envelope_signed_by(envelope, signer.certificate):
            raise BadSignature(f"JOIN_RESPONSE of uid {signer.uid} does not verify")
        participants = tuple(self._resolve_entry(e) for e in payload.participants)
        joining = tuple(self._resolve_entry(e) for e in payload.joining)
        received = DiscoveryState(participants, joining, payload.t, payload.instance)

        if self._includes_me(received):
            self._acknowledged = True
        order = compare(received, self.state)
        if order > 0:
            self._adopt(received, now)
        elif order < 0:
            self._answer_due = True
            self._arm_response()
        else:
            # someone already broadcast our state
            self._answer_due = False

    def _response_signer(self, envelope: ManagementEnvelope, payload: JoinResponsePayload) -> Member:
        """The signer is either known already or listed in the gossiped state"""
        signer = self._known.get(envelope.signer)
        if signer is not None:
            return signer
        for entry in payload.participants + payload.joining:
            if PeerCertificate.from_der(entry.certificate).fingerprint == envelope.signer:
                return self._resolve_entry(entry)
        raise NotAuthorized("JOIN_RESPONSE from an unknown signer")

    def _resolve_entry(self, entry: MemberEntry) -> Member:
        member = self._resolve(entry.certificate)
        if member.uid != entry.uid:
            raise NotAuthorized(f"entry uid {entry.uid} does not match certificate uid {member.uid}")
        return member

    def _adopt(self, state: DiscoveryState, now: int):
        self.state = state
        self._set_phase(Phase.GATHERING)
        self._arm_deadline()
        if not self._includes_me(state):
            self._acknowledged = False
            self._refresh_join(now)

    # agreement

    def _arm_deadline(self):
        self._cancel(self._deadline_timer)
        self._deadline_timer = None
        if self.phase is Phase.GATHERING and self.state.t != T_INFINITY:
            delay = max(0, self.state.t - self.endpoint.now_ms())
            self._deadline_timer = self.endpoint.call_later(delay, self._on_deadline_timer)

    def _on_deadline_timer(self):
        self._deadline_timer = None
        self.on_deadline()

    def on_deadline(self, now: Optional[int] = None) -> Optional[RingConfig]:
        """
        Freeze D at its start time and launch the key agreement.

        Returns the ring configuration of the run, or None when no run started.
        """
        if self.phase is not Phase.GATHERING:
            return None
        now = self._now() if now is None else now
        if now < self.state.t:
            self._arm_deadline()
            return None
        return self._begin_agreement(now)

    def _begin_agreement(self, now: int) -> Optional[RingConfig]:
        state = self.state
        if not self._includes_me(state):
            logger.debug(f"{self.scope} uid {self.me.uid}: not part of the frozen state, announcing again")
            self._refresh_join(now)
            return None
        if len(state.members) < 2:
            logger.info(f"{self.scope} uid {self.me.uid}: alone at the deadline, extending discovery")
            self.stats["TooFew"] += 1
            self.initiate_join(now)
            return None
        if not state.joining:
            self.state = DiscoveryState(state.participants, (), T_INFINITY, state.instance)
            self._set_phase(Phase.COMMITTED)
            return None

        instance_id = state.instance + 1
        mode = GkaMode.JOIN if state.participants else GkaMode.KEYAGREE
        try:
            sender_ids = assign_sender_ids(state.uids) if self.scope.is_group_scope else {}
            config = RingConfig(
                self.scope,
                tuple(RingMember(m.uid, m.certificate) for m in state.members),
                self.me.uid,
                instance_id,
                mode,
                state.participant_uids if mode is GkaMode.JOIN else frozenset(),
                self.seed if mode is GkaMode.JOIN else None,
            )
            gka = GroupKeyAgreement(config, self.ledger, self.identity, self.rng, self.curve)
            datagram = gka.start()
        except (GkaException, DiscoveryException) as e:
            logger.warning(f"{self.scope} uid {self.me.uid}: cannot start agreement {instance_id}: {e}")
            self.stats[type(e).__name__] += 1
            self._fail(instance_id, now)
            return None

        self.gka = gka
        self.sender_ids = sender_ids
        self._run_group_epoch = self.group_epoch
        self._cancel(self._retry_timer)
        self._retry_timer = None
        self._cancel(self._deadline_timer)
        self._deadline_timer = None
        self._set_phase(Phase.AGREEING)
        self.stats["agreements"] += 1
        if gka.phase is RoundPhase.FAILED:
            self._fail(instance_id, now)
            return None
        if datagram is not None:
            self.endpoint.send(datagram)
        self._arm_round_deadline()
        self._arm_retransmit()

        early = list(self._early)
        self._early.clear()
        for envelope in early:
            if self.phase is not Phase.AGREEING or self.gka is not gka:
                break
            self._feed(envelope, now)
        return config

    def _arm_round_deadline(self):
        self._cancel(self._round_timer)
        self._round_phase = self.gka.phase
        self._round_timer = self.endpoint.call_later(self.timing.round_deadline_ms, self._on_round_deadline)

    def _on_round_deadline(self):
        self._round_timer = None
        gka = self.gka
        if self.phase is not Phase.AGREEING or gka is None:
            return
        if gka.phase is not self._round_phase:
            self._arm_round_deadline()
            return
        if gka.expire():
            self._fail(gka.config.instance_id, self._now())

    def _arm_retransmit(self):
        self._cancel(self._retransmit_timer)
        self._retransmit_timer = self.endpoint.call_later(self.timing.retransmit_ms, self._on_retransmit)

    def _on_retransmit(self):
        self._retransmit_timer = None
        gka = self.gka
        if gka is None or gka.phase is RoundPhase.FAILED:
            return
        if gka.phase is RoundPhase.DONE:
            if self._linger <= 0:
                return
            self._linger -= 1
        for datagram in gka.sent:
            self.stats["gka_retransmit"] += 1
            self.endpoint.send(datagram)
        self._arm_retransmit()

    def handle_gka(self, envelope: ManagementEnvelope, now: Optional[int] = None):
        """
        Route a round message by phase. While gathering, only verified
        messages of members in D are buffered or start the run early.

        Raises:
            BadSignature, NotAuthorized, WireCodecException
        """
        now = self._now() if now is None else now
        if self.phase is Phase.GATHERING:
            payload = GkaRoundPayload.decode(envelope.payload)
            signer = self._verify_round(envelope, payload)
            if signer.uid not in self.state.uids or payload.instance_id <= self.state.instance:
                self.stats["gka_ignored"] += 1
                return
            self._early.append(envelope)
            if (payload.instance_id == self.state.instance + 1
                    and now >= self.state.t - self.timing.clock_skew_ms
                    and self._includes_me(self.state)):
                self.stats["early_start"] += 1
                self._begin_agreement(now)
        elif self.phase is Phase.AGREEING:
            self._feed(envelope, now)
        elif self.phase is Phase.COMMITTED:
            self._watch_committed(envelope)
        else:
            self.stats["gka_ignored"] += 1

    def _feed(self, envelope: ManagementEnvelope, now: int):
        gka = self.gka
        if self._is_foreign_round(envelope):
            logger.info(f"{self.scope} uid {self.me.uid}: a member outside our ring runs the same agreement")
            self.stats["foreign_round"] += 1
            gka.expire()
            self._fail(gka.config.instance_id, now)
            return
        datagram = gka.receive(envelope)
        if datagram is not None:
            self.endpoint.send(datagram)
        if gka.phase is RoundPhase.DONE:
            self._commit(now)
        elif gka.phase is RoundPhase.FAILED:
            self._fail(gka.config.instance_id, now)

    def _is_foreign_round(self, envelope: ManagementEnvelope) -> bool:
        """A verified round message for our instance from an authorized member outside the ring"""
        cfg = self.gka.config
        try:
            payload = GkaRoundPayload.decode(envelope.payload)
        except WireCodecException:
            return False
        if payload.instance_id != cfg.instance_id or cfg.ring_index(payload.uid) is not None:
            return False
        try:
            self._verify_round(envelope, payload)
        except (NotAuthorized, BadSignature):
            return False
        return True

    def _verify_round(self, envelope: ManagementEnvelope, payload: GkaRoundPayload) -> Member:
        """
        Return the known member that signed a round message for its own uid.

        Raises:
            NotAuthorized: unknown signer, or a signer speaking for another uid
            BadSignature
        """
        signer = self._known.get(envelope.signer)
        if signer is None:
            raise NotAuthorized(f"round message of uid {payload.uid} from an unknown signer")
        if signer.uid != payload.uid:
            raise NotAuthorized(f"uid {signer.uid} signed a round message of uid {payload.uid}")
        if not envelope_signed_by(envelope, signer.certificate):
            raise BadSignature(f"round message of uid {payload.uid} does not verify")
        return signer

    def _watch_committed(self, envelope: ManagementEnvelope):
        payload = GkaRoundPayload.decode(envelope.payload)
        if payload.instance_id <= self.state.instance:
            return
        signer = self._verify_round(envelope, payload)
        if signer.uid not in self.committed_uids:
            return
        if self._missed_timer is not None:
            return
        logger.info(f"{self.scope} uid {self.me.uid}: members run agreement {payload.instance_id} without us")
        self.stats["missed_agreement"] += 1
        epoch = self.epoch
        self._missed_timer = self.endpoint.call_later(2 * self.timing.round_deadline_ms,
                                                      lambda: self._on_missed(epoch))

    def _on_missed(self, epoch: int):
        self._missed_timer = None
        if self.phase is Phase.COMMITTED and self.epoch == epoch:
            self.restart()

    def _commit(self, now: int):
        gka = self.gka
        cfg = gka.config
        members = self.state.members
        self.state = DiscoveryState(members, (), T_INFINITY, cfg.instance_id)
        self.seed = gka.seed
        self.epoch = cfg.instance_id
        self.committed_uids = self.state.participant_uids
        self.last_commit = now
        self.key = kdf_expand(self.seed, kdf_context(self.scope, cfg.instance_id, self._run_group_epoch),
                              cfg.instance_id, self.scope, self._run_group_epoch)
        self._cancel(self._round_timer)
        self._round_timer = None
        self._linger = GKA_LINGER_RETRANSMITS
        self._set_phase(Phase.COMMITTED)
        self.stats["commits"] += 1
        logger.info(f"{self.scope} uid {self.me.uid}: committed epoch {self.epoch} with {len(members)} members")
        if self.on_commit is not None:
            self.on_commit(Commit(self.scope, self.key, self.epoch, members, self.me.uid, dict(self.sender_ids)))
        if self.pending and self.phase is Phase.COMMITTED:
            self._arm_response()

    def _fail(self, instance_id: int, now: int):
        self.ledger.note_attempt(self.scope, instance_id)
        self.stats["restarts"] += 1
        logger.info(f"{self.scope} uid {self.me.uid}: agreement {instance_id} failed, restarting discovery")
        self._cancel(self._round_timer)
        self._round_timer = None
        self._cancel(self._retransmit_timer)
        self._retransmit_timer = None
        self._reset()
        self.initiate_join(now)

    def _reset(self):
        self._cancel(self._response_timer)
        self._response_timer = None
        self._cancel(self._deadline_timer)
        self._deadline_timer = None
        self.state = DiscoveryState()
        self._early.clear()
        self._set_phase(Phase.IDLE)

    def restart(self, now: Optional[int] = None) -> bytes:
        """
        Drop P and J and announce again; peers that see the fresh JOIN of a
        participant do the same, so the next run is a full KeyAgree.

        Raises:
            InvalidPhase: an agreement is running
        """
        if self.phase is Phase.AGREEING:
            raise InvalidPhase(f"cannot restart {self.scope} while an agreement is running")
        self._reset()
        return self.initiate_join(now)

    def dispatch(self, envelope: ManagementEnvelope, now: Optional[int] = None):
        """Route a management envelope of this scope; malformed or unauthorized input is counted and dropped"""
        if envelope.scope != self.scope:
            self.stats["wrong_scope"] += 1
            return
        if envelope.signer == self.me.certificate.fingerprint:
            return
        try:
            if envelope.kind is ManagementKind.JOIN:
                self.handle_join(envelope, now)
            elif envelope.kind is ManagementKind.JOIN_RESPONSE:
                self.handle_join_response(envelope, now)
            else:
                self.handle_gka(envelope, now)
        except (IdentityException, DiscoveryException, GkaException, WireCodecException, CryptoSuiteException) as e:
            self.stats[type(e).__name__] += 1
            logger.debug(f"{self.scope} uid {self.me.uid}: dropped {envelope.kind.name}: {e}")
