"""
Two-round ring group key agreement with a dynamic Join.

Round 1: every active ring member i broadcasts X_i = x_i*G.
Round 2: with both neighbours' elements, i computes K^L = x_i*X_{i-1},
K^R = x_i*X_{i+1} and broadcasts Y_i = K^R - K^L.
Once all Y_j are known, i walks the ring K^R_{j+1} = Y_{j+1} + K^R_j, checks
that the walk closes on its own K^L and folds every K^R into the session seed.

A Join reuses the same rounds over a smaller ring: the first, second and last
incumbent (by uid) followed by the joiners. The first incumbent derives its
scalar from the previous session seed, so every other incumbent can replay its
view from broadcast traffic alone and reach the same seed without sending.

The classes here are transport agnostic: they consume decoded envelopes and
return encoded datagrams; lcmsec.core.discovery owns timers and resends.
"""

import logging
import random
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Union

from cryptography.hazmat.primitives.asymmetric import ec

from lcmsec.core.const import DEFAULT_CURVE, JOIN_REPRESENTATIVE_LABEL, MAX_INSTANCE_ID
from lcmsec.core.crypto_suite import GroupElement, GroupOps, kdf_context, verify
from lcmsec.core.exceptions import (
    BadSignature,
    ConsistencyFailure,
    CryptoSuiteException,
    GkaException,
    StaleInstance,
    UnknownSender,
    WireCodecException,
    WrongInstance,
)
from lcmsec.core.identity import LcmDomain, LocalIdentity, PeerCertificate
from lcmsec.core.wire_codec import (
    GkaRoundPayload,
    ManagementEnvelope,
    ManagementKind,
    decode_management,
    encode_management,
)

logger = logging.getLogger(__name__)

ROUND_KINDS = {1: ManagementKind.GKA_ROUND1, 2: ManagementKind.GKA_ROUND2}


def seal_envelope(kind: ManagementKind, scope: LcmDomain, payload: bytes, identity: LocalIdentity) -> ManagementEnvelope:
    """Build a management envelope signed with the local identity"""
    unsigned = ManagementEnvelope(kind, scope, identity.fingerprint, payload)
    return replace(unsigned, signature=identity.sign(unsigned.signed_bytes()))


def envelope_signed_by(envelope: ManagementEnvelope, certificate: PeerCertificate) -> bool:
    if envelope.signer != certificate.fingerprint:
        return False
    return verify(envelope.signed_bytes(), envelope.signature, certificate.public_key)


class GkaMode(Enum):
    KEYAGREE = "keyagree"
    JOIN = "join"


class RoundPhase(Enum):
    IDLE = "idle"
    R1_SENT = "r1_sent"
    R2_SENT = "r2_sent"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True, order=True)
class RingMember:
    uid: int
    certificate: PeerCertificate = field(compare=False)

    @property
    def fingerprint(self) -> bytes:
        return self.certificate.fingerprint

    @property
    def public_key(self) -> ec.EllipticCurvePublicKey:
        return self.certificate.public_key


@dataclass(frozen=True)
class RingConfig:
    """
    One key agreement run.

    participants holds every member of P and J sorted by uid; the ring that
    actually exchanges messages is derived from it and the mode.
    """

    scope: LcmDomain
    participants: tuple[RingMember, ...]
    my_uid: int
    instance_id: int
    mode: GkaMode = GkaMode.KEYAGREE
    incumbents: frozenset[int] = frozenset()
    previous_seed: Optional[bytes] = field(default=None, repr=False)

    def __post_init__(self):
        members = tuple(sorted(self.participants))
        object.__setattr__(self, "participants", members)
        uids = [m.uid for m in members]
        if len(set(uids)) != len(uids):
            raise GkaException(f"duplicate uid in ring for {self.scope}")
        if self.my_uid not in uids:
            raise GkaException(f"uid {self.my_uid} is not a participant of {self.scope}")
        if not 1 <= self.instance_id <= MAX_INSTANCE_ID:
            raise GkaException(f"instance id {self.instance_id} out of range")
        if self.mode is GkaMode.JOIN:
            if not self.incumbents or not self.incumbents < set(uids):
                raise GkaException("a join needs incumbents and at least one joiner among the participants")
        elif self.incumbents:
            raise GkaException("incumbents are only meaningful for a join")
        if len(self.ring) < 2:
            raise GkaException("a key agreement needs at least two ring members")

    @property
    def representatives(self) -> tuple[int, ...]:
        """First, second and last incumbent uid, without repeats"""
        if self.mode is not GkaMode.JOIN:
            return ()
        ordered = sorted(self.incumbents)
        reps = []
        for uid in (ordered[0], ordered[1 % len(ordered)], ordered[-1]):
            if uid not in reps:
                reps.append(uid)
        return tuple(reps)

    @property
    def ring(self) -> tuple[RingMember, ...]:
        if self.mode is GkaMode.KEYAGREE:
            return self.participants
        by_uid = {m.uid: m for m in self.participants}
        joiners = tuple(m for m in self.participants if m.uid not in self.incumbents)
        return tuple(by_uid[uid] for uid in self.representatives) + joiners

    @property
    def n(self) -> int:
        return len(self.ring)

    def ring_index(self, uid: int) -> Optional[int]:
        for i, m in enumerate(self.ring):
            if m.uid == uid:
                return i
        return None

    def ring_member(self, uid: int) -> Optional[RingMember]:
        i = self.ring_index(uid)
        return None if i is None else self.ring[i]

    @property
    def active(self) -> bool:
        return self.ring_index(self.my_uid) is not None

    @property
    def view_index(self) -> int:
        """Ring position whose computation this node performs; passive incumbents follow position 0"""
        i = self.ring_index(self.my_uid)
        return 0 if i is None else i

    @property
    def derives_scalar(self) -> bool:
        return self.mode is GkaMode.JOIN and self.view_index == 0


class InstanceLedger:
    """
    Highest instance ids per scope: completed per (scope, uid), attempted per scope.

    Values only grow. One ledger is shared by every agreement of a node.
    """

    def __init__(self):
        self._completed: dict[tuple[LcmDomain, int], int] = {}
        self._attempted: dict[LcmDomain, int] = {}
        self._lock = threading.Lock()

    def completed(self, scope: LcmDomain, uid: int) -> int:
        with self._lock:
            return self._completed.get((scope, uid), 0)

    def highest(self, scope: LcmDomain) -> int:
        with self._lock:
            done = [d for (s, _), d in self._completed.items() if s == scope]
            return max([self._attempted.get(scope, 0)] + done)

    def note_attempt(self, scope: LcmDomain, instance_id: int):
        with self._lock:
            self._attempted[scope] = max(self._attempted.get(scope, 0), instance_id)

    def record_completion(self, scope: LcmDomain, uids: Iterable[int], instance_id: int):
        with self._lock:
            for uid in uids:
                key = (scope, uid)
                self._completed[key] = max(self._completed.get(key, 0), instance_id)
            self._attempted[scope] = max(self._attempted.get(scope, 0), instance_id)

    def is_stale(self, scope: LcmDomain, uid: int, instance_id: int) -> bool:
        return instance_id <= self.completed(scope, uid)


@dataclass
class RoundState:
    x: Optional[int] = field(default=None, repr=False)
    round1: dict[int, GroupElement] = field(default_factory=dict)
    round2: dict[int, GroupElement] = field(default_factory=dict)
    k_left: GroupElement = field(default=None, repr=False)
    k_right: GroupElement = field(default=None, repr=False)
    phase: RoundPhase = RoundPhase.IDLE
    seed: Optional[bytes] = field(default=None, repr=False)


def _same(a: GroupElement, b: GroupElement) -> bool:
    if a is None or b is None:
        return a is b
    return a.x == b.x and a.y == b.y


class GroupKeyAgreement:
    """
    One key agreement run, active or passive.

    Messages are handed in sequentially. handle_round1/handle_round2 raise on
    rejected input; receive() is the hostile-input entry point that counts the
    drop in stats instead.
    """

    def __init__(self, config: RingConfig, ledger: InstanceLedger, identity: Optional[LocalIdentity] = None,
                 rng: Optional[random.Random] = None, curve: str = DEFAULT_CURVE):
        if config.active and identity is None:
            raise GkaException("an active ring member needs a signing identity")
        self.config = config
        self.ledger = ledger
        self.identity = identity
        self.rng = rng
        self.group = GroupOps(curve)
        self.state = RoundState()
        self.stats: Counter = Counter()
        self.sent: list[bytes] = []
        self._accepted: dict[tuple[int, int], ManagementEnvelope] = {}

    @property
    def phase(self) -> RoundPhase:
        return self.state.phase

    @property
    def seed(self) -> Optional[bytes]:
        return self.state.seed

    @property
    def finished(self) -> bool:
        return self.state.phase in (RoundPhase.DONE, RoundPhase.FAILED)

    def _emit(self, round_no: int, element: GroupElement) -> bytes:
        cfg = self.config
        payload = GkaRoundPayload(cfg.my_uid, round_no, self.group.serialize(element), cfg.instance_id)
        envelope = seal_envelope(ROUND_KINDS[round_no], cfg.scope, payload.encode(), self.identity)
        datagram = encode_management(envelope)
        self.sent.append(datagram)
        return datagram

    def start(self) -> Optional[bytes]:
        """
        Pick the ephemeral scalar and produce the round-1 datagram.

        Returns None for a passive incumbent, which never transmits.

        Raises:
            StaleInstance: the instance id was already used for this scope
        """
        cfg = self.config
        if self.state.phase is not RoundPhase.IDLE:
            raise GkaException(f"agreement {cfg.instance_id} for {cfg.scope} already started")
        highest = self.ledger.highest(cfg.scope)
        if cfg.instance_id <= highest:
            raise StaleInstance(f"instance {cfg.instance_id} for {cfg.scope} not above {highest}")
        self.ledger.note_attempt(cfg.scope, cfg.instance_id)

        if cfg.derives_scalar:
            if cfg.previous_seed is None:
                logger.warning(f"no previous seed for {cfg.scope}, cannot follow join {cfg.instance_id}")
                self.stats["no_previous_seed"] += 1
                self.state.phase = RoundPhase.FAILED
                return None
            context = JOIN_REPRESENTATIVE_LABEL + kdf_context(cfg.scope, cfg.instance_id)
            self.state.x = self.group.scalar_from(cfg.previous_seed, context)
        else:
            self.state.x = self.group.random_scalar(self.rng)
        self.state.phase = RoundPhase.R1_SENT
        logger.debug(f"{cfg.mode.value} {cfg.instance_id} for {cfg.scope}: uid {cfg.my_uid} "
                     f"{'active' if cfg.active else 'passive'} in ring of {cfg.n}")
        if not cfg.active:
            return None
        element = self.group.exp(self.group.generator, self.state.x)
        self.state.round1[cfg.my_uid] = element
        return self._emit(1, element)

    def _reject(self, exc: GkaException) -> GkaException:
        self.stats[type(exc).__name__] += 1
        return exc

    def _accept(self, envelope: ManagementEnvelope, round_no: int) -> Optional[GkaRoundPayload]:
        cfg = self.config
        if envelope.kind is not ROUND_KINDS[round_no]:
            raise self._reject(GkaException(f"{envelope.kind.name} is not a round-{round_no} message"))
        if envelope.scope != cfg.scope:
            raise self._reject(WrongInstance(f"message for {envelope.scope} in agreement for {cfg.scope}"))
        payload = GkaRoundPayload.decode(envelope.payload)
        if payload.round_no != round_no:
            raise self._reject(GkaException(f"payload round {payload.round_no} under {envelope.kind.name}"))
        member = cfg.ring_member(payload.uid)
        if member is None:
            raise self._reject(UnknownSender(f"uid {payload.uid} is not in the ring"))
        if self.ledger.is_stale(cfg.scope, payload.uid, payload.instance_id):
            raise self._reject(StaleInstance(f"instance {payload.instance_id} of uid {payload.uid} already completed"))
        if payload.instance_id != cfg.instance_id:
            raise self._reject(WrongInstance(f"instance {payload.instance_id}, expected {cfg.instance_id}"))
        if self.finished:
            self.stats["late"] += 1
            return None

        known = self._accepted.get((payload.uid, round_no))
        if known == envelope:
            self.stats["duplicate"] += 1
            return None
        if not envelope_signed_by(envelope, member.certificate):
            raise self._reject(BadSignature(f"round-{round_no} signature of uid {payload.uid} does not verify"))
        if known is not None:
            logger.warning(f"uid {payload.uid} sent two different round-{round_no} messages for {cfg.instance_id}")
            self.stats["conflict"] += 1
            return None
        return payload

    def handle_round1(self, envelope: ManagementEnvelope) -> Optional[bytes]:
        """Store a neighbour's element; returns the round-2 datagram once it can be computed"""
        payload = self._accept(envelope, 1)
        if payload is None:
            return None
        self.state.round1[payload.uid] = self.group.deserialize(payload.element)
        self._accepted[(payload.uid, 1)] = envelope
        return self._advance()

    def handle_round2(self, envelope: ManagementEnvelope) -> Optional[bytes]:
        """
        Store a Y value; returns the session seed when the ring closes.

        Raises:
            ConsistencyFailure: the recovered keys do not match
        """
        payload = self._accept(envelope, 2)
        if payload is None:
            return None
        self.state.round2[payload.uid] = self.group.deserialize(payload.element, allow_identity=True)
        self._accepted[(payload.uid, 2)] = envelope
        self._advance()
        return self.state.seed

    def receive(self, envelope: Union[ManagementEnvelope, bytes]) -> Optional[bytes]:
        """
        Hand in any round message; returns a datagram to broadcast, if any.

        Rejected messages are counted in stats and never raise.
        """
        try:
            if isinstance(envelope, bytes):
                envelope = decode_management(envelope)
            if envelope.kind is ManagementKind.GKA_ROUND1:
                return self.handle_round1(envelope)
            if envelope.kind is ManagementKind.GKA_ROUND2:
                self.handle_round2(envelope)
                return None
            self.stats["not_a_round_message"] += 1
        except ConsistencyFailure:
            pass
        except GkaException as e:
            logger.debug(f"dropped round message for {self.config.scope}: {e}")
        except (WireCodecException, CryptoSuiteException) as e:
            self.stats[type(e).__name__] += 1
            logger.debug(f"dropped malformed round message for {self.config.scope}: {e}")
        return None

    def _advance(self) -> Optional[bytes]:
        cfg, st = self.config, self.state
        out = None
        if st.phase is RoundPhase.R1_SENT:
            ring, i = cfg.ring, cfg.view_index
            left, right = ring[(i - 1) % cfg.n].uid, ring[(i + 1) % cfg.n].uid
            if left in st.round1 and right in st.round1:
                st.k_left = self.group.exp(st.round1[left], st.x)
                st.k_right = self.group.exp(st.round1[right], st.x)
                y = self.group.op(st.k_right, self.group.inv(st.k_left))
                st.phase = RoundPhase.R2_SENT
                if cfg.active:
                    st.round2[cfg.my_uid] = y
                    out = self._emit(2, y)
        if st.phase is RoundPhase.R2_SENT:
            self._try_finish()
        return out

    def _try_finish(self):
        cfg, st = self.config, self.state
        ring, i, n = cfg.ring, cfg.view_index, cfg.n
        if any(ring[(i + k) % n].uid not in st.round2 for k in range(1, n)):
            return
        right_keys = [st.k_right]
        current = st.k_right
        for k in range(1, n):
            current = self.group.op(st.round2[ring[(i + k) % n].uid], current)
            right_keys.append(current)
        # the walk ends on K^R of the left neighbour, which is our K^L
        if not _same(current, st.k_left):
            st.phase = RoundPhase.FAILED
            raise self._reject(ConsistencyFailure(f"ring for {cfg.scope} instance {cfg.instance_id} does not close"))
        st.seed = self.group.serialize(self.group.fold(right_keys))
        st.phase = RoundPhase.DONE
        self.ledger.record_completion(cfg.scope, [m.uid for m in ring], cfg.instance_id)
        logger.info(f"{cfg.mode.value} {cfg.instance_id} for {cfg.scope} completed with {n} ring members")

    def expire(self) -> bool:
        """Fail a run that missed its round deadline; returns True if it was still pending"""
        if self.finished:
            return False
        self.state.phase = RoundPhase.FAILED
        self.stats["GkaTimeout"] += 1
        logger.info(f"agreement {self.config.instance_id} for {self.config.scope} timed out")
        return True


def join_passive(previous_seed: Optional[bytes], observed: Iterable[Union[ManagementEnvelope, bytes]],
                 config: RingConfig, ledger: Optional[InstanceLedger] = None,
                 curve: str = DEFAULT_CURVE) -> Optional[bytes]:
    """
    Follow a Join as a non-representative incumbent.

    Replays the first representative's view from the broadcast round messages
    and returns the new session seed, or None when it cannot be derived.
    """
    config = replace(config, previous_seed=previous_seed)
    if config.mode is not GkaMode.JOIN or config.active:
        raise GkaException("join_passive is for incumbents outside the join ring")
    gka = GroupKeyAgreement(config, ledger or InstanceLedger(), curve=curve)
    gka.start()
    for envelope in observed:
        if gka.finished:
            break
        gka.receive(envelope)
    return gka.seed
