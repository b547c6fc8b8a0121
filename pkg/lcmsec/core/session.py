"""
Per-node runtime: discovery for the group and every configured channel, the
publish and receive pipelines of the two-key scheme, and replay protection.

Publishing a message:

    enc_name = AES-CTR(k_g,  iv(salt_g,  sender_id, seqno), channel ‖ NUL)
    body     = AES-GCM(k_ch, iv(salt_ch, sender_id, seqno), payload, aad=channel ‖ NUL)

Receivers decrypt the name with k_g, drop channels they do not take part in,
open the body with that channel's k_ch and run the replay window only after
the tag verified.

Usage:
    session = Session(config, identity, endpoint)
    session.subscribe("chatter", lambda channel, payload: print(payload))
    session.start()
    ...
    session.publish("chatter", b"hello")
"""

import asyncio
import heapq
import logging
import random
import threading
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

from lcmsec.core.configstore import SessionConfig
from lcmsec.core.const import (
    AEAD_TAG_SIZE,
    DROP_AUTH_FAILURE,
    DROP_BAD_MAGIC,
    DROP_FRAGMENT,
    DROP_MANAGEMENT,
    DROP_NO_GROUP_KEY,
    DROP_NO_TERMINATOR,
    DROP_REORDER_LATE,
    DROP_REPLAYED,
    DROP_TRUNCATED,
    DROP_UNKNOWN_CHANNEL_KEY,
    DROP_UNKNOWN_SCOPE,
    DROP_UNSUBSCRIBED,
    MAX_CHANNELNAME_SIZE,
    MAX_SEQNO,
)
from lcmsec.core.crypto_suite import (
    CtrStream,
    KeyMaterial,
    aead_open,
    aead_seal,
    build_iv,
    ctr_crypt,
)
from lcmsec.core.dbgka import InstanceLedger
from lcmsec.core.discovery import Commit, GroupDiscovery, Phase
from lcmsec.core.exceptions import (
    AuthFailure,
    BadMagic,
    CounterExhausted,
    InconsistentFragment,
    InvalidPhase,
    NoKey,
    RekeyFailed,
    SessionException,
    TooShort,
    Truncated,
    WireCodecException,
)
from lcmsec.core.identity import LcmDomain, LocalIdentity
from lcmsec.core.transport import Endpoint
from lcmsec.core.wire_codec import (
    FragmentBuffer,
    FragmentPacket,
    ManagementEnvelope,
    RawSecurePacket,
    decode_datagram,
    encode_channelname,
    encode_packet,
    fragment,
)

logger = logging.getLogger(__name__)

Handler = Callable[[str, bytes], None]

# when several keys fail, report the most specific reason
_DROP_PRIORITY = {
    DROP_NO_TERMINATOR: 0,
    DROP_UNSUBSCRIBED: 1,
    DROP_UNKNOWN_CHANNEL_KEY: 2,
    DROP_AUTH_FAILURE: 3,
}


@dataclass(frozen=True)
class Delivery:
    channel: str
    payload: bytes
    sender_id: int
    seqno: int
    epoch: int


class SendCounter:
    """32-bit message counter shared by every channel of one multicast group"""

    def __init__(self, start: int = 0):
        self._next = start
        self._lock = threading.Lock()

    @property
    def value(self) -> int:
        return self._next

    def next(self) -> int:
        """
        Raises:
            CounterExhausted: the counter would wrap
        """
        with self._lock:
            if self._next >= MAX_SEQNO:
                raise CounterExhausted("message counter exhausted, a new epoch is required")
            seqno = self._next
            self._next += 1
            return seqno

    def reset(self, start: int = 0):
        with self._lock:
            self._next = start


class ReplayWindow:
    """
    RFC 6479 anti-replay window of `size` bits kept in 32-bit blocks.

    The bitmap has one spare block so advancing the window only clears whole
    blocks. A seqno is rejected when it was seen or when seqno + size < last.
    """

    BLOCK_BITS = 32

    def __init__(self, size: int = 1024):
        if size <= 0 or size % self.BLOCK_BITS:
            raise SessionException(f"replay window {size} is not a positive multiple of {self.BLOCK_BITS}")
        self.size = size
        self._blocks = size // self.BLOCK_BITS + 1
        self._bitmap = [0] * self._blocks
        self.last: Optional[int] = None

    def check(self, seqno: int) -> bool:
        """Would seqno be accepted; does not update the window"""
        if self.last is None:
            return True
        if seqno + self.size < self.last:
            return False
        if seqno > self.last:
            return True
        block = (seqno // self.BLOCK_BITS) % self._blocks
        return not self._bitmap[block] & (1 << (seqno % self.BLOCK_BITS))

    def update(self, seqno: int) -> bool:
        """Accept seqno at most once; returns False for a replay or stale seqno"""
        if self.last is None:
            self.last = seqno
        elif seqno + self.size < self.last:
            return False
        index = seqno // self.BLOCK_BITS
        if seqno > self.last:
            current = self.last // self.BLOCK_BITS
            diff = min(index - current, self._blocks)
            for i in range(1, diff + 1):
                self._bitmap[(current + i) % self._blocks] = 0
            self.last = seqno
        block = index % self._blocks
        bit = 1 << (seqno % self.BLOCK_BITS)
        if self._bitmap[block] & bit:
            return False
        self._bitmap[block] |= bit
        return True


@dataclass
class _KeySlot:
    material: KeyMaterial
    expires: Optional[float] = None


class KeyStore:
    """
    The two most recent KeyMaterial per scope, newest first.

    Installing a new epoch keeps the previous one for grace_ms so stragglers
    still decrypt.
    """

    DEPTH = 2

    def __init__(self, grace_ms: float = 10000):
        self.grace_ms = grace_ms
        self._slots: dict[LcmDomain, list[_KeySlot]] = {}
        self._lock = threading.Lock()

    def install(self, material: KeyMaterial, now: float):
        with self._lock:
            slots = self._slots.get(material.scope, [])
            if slots and slots[0].material.epoch == material.epoch and slots[0].material.key == material.key:
                return
            previous = [_KeySlot(s.material, s.expires if s.expires is not None else now + self.grace_ms)
                        for s in slots]
            self._slots[material.scope] = ([_KeySlot(material)] + previous)[:self.DEPTH]

    def lookup(self, scope: LcmDomain, now: float) -> list[KeyMaterial]:
        with self._lock:
            return [s.material for s in self._slots.get(scope, []) if s.expires is None or now < s.expires]

    def newest(self, scope: LcmDomain) -> Optional[KeyMaterial]:
        with self._lock:
            slots = self._slots.get(scope)
            return slots[0].material if slots else None

    def epochs(self, scope: LcmDomain) -> set[int]:
        with self._lock:
            return {s.material.epoch for s in self._slots.get(scope, [])}


@dataclass(order=True)
class _Held:
    seqno: int
    arrival: float = field(compare=False)
    delivery: Delivery = field(compare=False)


class ReorderBuffer:
    """
    Jitter buffer releasing authenticated messages per stream in seqno order.

    Every message is held for hold_ms. When the oldest held message expires,
    it is released together with every held message of a smaller seqno.
    Seqnos at or below the last released one are late.
    """

    def __init__(self, hold_ms: float):
        self.hold_ms = hold_ms
        self._held: dict[tuple, list[_Held]] = defaultdict(list)
        self._released: dict[tuple, int] = {}

    def __len__(self) -> int:
        return sum(len(h) for h in self._held.values())

    def push(self, stream: tuple, delivery: Delivery, now: float) -> bool:
        if delivery.seqno <= self._released.get(stream, -1):
            return False
        heapq.heappush(self._held[stream], _Held(delivery.seqno, now, delivery))
        return True

    def release(self, now: float) -> list[Delivery]:
        out = []
        for stream in list(self._held):
            held = self._held[stream]
            expired = [h.seqno for h in held if h.arrival + self.hold_ms <= now]
            if not expired:
                continue
            cutoff = max(expired)
            while held and held[0].seqno <= cutoff:
                out.append(heapq.heappop(held).delivery)
            self._released[stream] = cutoff
            if not held:
                del self._held[stream]
        return out


class Session:
    """
    One node in one multicast group.

    receive() is safe against arbitrary input: every rejected datagram is
    counted in stats by reason and never raises.
    """

    def __init__(self, config: SessionConfig, identity: LocalIdentity, endpoint: Endpoint,
                 ledger: Optional[InstanceLedger] = None, rng: Optional[random.Random] = None):
        self.config = config
        self.identity = identity
        self.endpoint = endpoint
        self.ledger = ledger or InstanceLedger()
        self.group_scope = LcmDomain(config.group)
        self.keys = KeyStore(config.timing.key_grace_ms)
        self.counter = SendCounter()
        self.fragments = FragmentBuffer(timeout_ms=config.timing.reassembly_timeout_ms)
        self.reorder = ReorderBuffer(config.timing.reorder_hold_ms) if config.reorder else None
        self.stats: Counter = Counter()
        self.handlers: dict[str, list[Handler]] = defaultdict(list)
        self.sender_id: Optional[int] = None
        self.group_epoch = 0
        self._windows: dict[tuple[str, int, int], ReplayWindow] = {}
        self._suspended = False

        rng = rng or random.Random()
        self.discovery: dict[LcmDomain, GroupDiscovery] = {
            self.group_scope: GroupDiscovery(self.group_scope, identity, endpoint, self.ledger, config.timing,
                                             random.Random(rng.getrandbits(64)), config.curve,
                                             on_commit=self._on_group_commit),
        }
        for channel in config.channels:
            scope = LcmDomain(config.group, channel)
            self.discovery[scope] = GroupDiscovery(scope, identity, endpoint, self.ledger, config.timing,
                                                   random.Random(rng.getrandbits(64)), config.curve,
                                                   on_commit=self._on_channel_commit)
        endpoint.set_receiver(self.receive)

    def __repr__(self) -> str:
        return f"Session({self.config.group}, channels={list(self.config.channels)})"

    @property
    def group_discovery(self) -> GroupDiscovery:
        return self.discovery[self.group_scope]

    def channel_scope(self, channel: str) -> LcmDomain:
        return LcmDomain(self.config.group, channel)

    def start(self):
        """Begin group-level discovery; channel discovery follows each group commit"""
        logger.info(f"starting session for {self.config.group} on channels {list(self.config.channels)}")
        self.group_discovery.initiate_join()

    def close(self):
        for disc in self.discovery.values():
            disc.close()

    def is_ready(self, channel: Optional[str] = None) -> bool:
        """Keys for the group and for channel (or every configured channel) are current"""
        k_g = self.keys.newest(self.group_scope)
        if k_g is None or self.sender_id is None or self._suspended:
            return False
        channels = [channel] if channel is not None else list(self.config.channels)
        for ch in channels:
            k_ch = self.keys.newest(self.channel_scope(ch))
            if k_ch is None or k_ch.group_epoch != self.group_epoch:
                return False
        return True

    def subscribe(self, channel: str, handler: Handler):
        if channel not in self.config.channels:
            raise SessionException(f"channel {channel} is not configured for this session")
        self.handlers[channel].append(handler)

    def unsubscribe(self, channel: str, handler: Handler):
        if handler in self.handlers.get(channel, []):
            self.handlers[channel].remove(handler)

    def discovery_stats(self) -> Counter:
        total = Counter()
        for disc in self.discovery.values():
            total.update(disc.stats)
        return total

    # key installation

    def _on_group_commit(self, commit: Commit):
        now = self.endpoint.now_ms()
        self.keys.install(commit.key, now)
        self.sender_id = commit.sender_ids[commit.my_uid]
        self.group_epoch = commit.instance_id
        self.counter.reset()
        self._suspended = False
        logger.info(f"group epoch {self.group_epoch}: sender id {self.sender_id} of {len(commit.members)}")
        for scope, disc in self.discovery.items():
            if scope == self.group_scope:
                continue
            disc.group_epoch = self.group_epoch
            if disc.phase is Phase.AGREEING:
                # the running agreement commits under the old group epoch and restarts then
                continue
            if disc.phase is Phase.IDLE:
                disc.initiate_join()
            else:
                disc.restart()

    def _on_channel_commit(self, commit: Commit):
        now = self.endpoint.now_ms()
        self.keys.install(commit.key, now)
        self._prune_windows(commit.scope)
        if commit.key.group_epoch != self.group_epoch:
            logger.info(f"{commit.scope} agreed under group epoch {commit.key.group_epoch}, agreeing again")
            self.discovery[commit.scope].restart()

    def _prune_windows(self, scope: LcmDomain):
        live = self.keys.epochs(scope)
        for key in [k for k in self._windows if k[0] == scope.channel and k[2] not in live]:
            del self._windows[key]

    # publishing

    def seal(self, channel: str, payload: bytes) -> list[bytes]:
        """
        Encrypt and frame one message without sending it.

        Raises:
            NoKey: keys for the group or channel are not established
            CounterExhausted: the send counter is used up; a rekey was requested
            NotAuthorized: the certificate does not cover the channel
        """
        scope = self.channel_scope(channel)
        self.identity.permission(scope)
        if channel not in self.config.channels:
            raise NoKey(f"no key agreement is configured for channel {channel}")
        if self._suspended:
            raise NoKey(f"publishing on {self.config.group} is suspended until the rekey completes")
        k_g = self.keys.newest(self.group_scope)
        k_ch = self.keys.newest(scope)
        if k_g is None or self.sender_id is None:
            raise NoKey(f"no group key for {self.config.group}")
        if k_ch is None or k_ch.group_epoch != self.group_epoch:
            raise NoKey(f"no channel key for {channel} in group epoch {self.group_epoch}")
        try:
            seqno = self.counter.next()
        except CounterExhausted:
            self.stats["counter_exhausted"] += 1
            try:
                self.rekey()
            except RekeyFailed as e:
                logger.warning(f"rekey after counter exhaustion deferred: {e}")
            raise
        name = encode_channelname(channel)
        enc_name = ctr_crypt(k_g, build_iv(k_g.salt, self.sender_id, seqno), name)
        body = aead_seal(k_ch, build_iv(k_ch.salt, self.sender_id, seqno), payload, name)
        return [encode_packet(p) for p in fragment(body, enc_name, seqno, self.sender_id, self.config.mtu)]

    def publish(self, channel: str, payload: bytes) -> list[bytes]:
        datagrams = self.seal(channel, payload)
        for datagram in datagrams:
            self.endpoint.send(datagram)
        self.stats["published"] += 1
        return datagrams

    def rekey(self, scope: Optional[LcmDomain] = None):
        """
        Ask the members of scope (default: the group) for a fresh agreement.

        Publishing on the group stays suspended until the new group key is in.

        Raises:
            RekeyFailed: an agreement is running; discovery retries on its own
        """
        scope = scope or self.group_scope
        disc = self.discovery.get(scope)
        if disc is None:
            raise SessionException(f"scope {scope} is not part of this session")
        if scope == self.group_scope:
            self._suspended = True
        try:
            disc.restart()
        except InvalidPhase as e:
            raise RekeyFailed(f"cannot rekey {scope} now: {e}") from e
        logger.info(f"rekey requested for {scope}")

    # receiving

    def _drop(self, reason: str, detail: str = ""):
        self.stats[reason] += 1
        logger.debug(f"dropped datagram: {reason} {detail}")
        return None

    def receive(self, datagram: bytes) -> Optional[Delivery]:
        """
        Run one datagram through the receive pipeline.

        Returns the delivery when the message is accepted and no reorder
        buffer holds it back; subscribed handlers are called either way.
        """
        try:
            packet = decode_datagram(datagram)
        except BadMagic as e:
            return self._drop(DROP_BAD_MAGIC, str(e))
        except Truncated as e:
            return self._drop(DROP_TRUNCATED, str(e))
        except InconsistentFragment as e:
            return self._drop(DROP_FRAGMENT, str(e))
        except WireCodecException as e:
            return self._drop(DROP_MANAGEMENT, str(e))

        if isinstance(packet, ManagementEnvelope):
            disc = self.discovery.get(packet.scope)
            if disc is None:
                return self._drop(DROP_UNKNOWN_SCOPE, str(packet.scope))
            disc.dispatch(packet)
            return None

        now = self.endpoint.now_ms()
        if isinstance(packet, FragmentPacket):
            try:
                message = self.fragments.reassemble(packet, now)
            except InconsistentFragment as e:
                return self._drop(DROP_FRAGMENT, str(e))
            if message is None:
                return None
            packet = message.to_raw()
        return self._open(packet, now)

    def _decrypt_name(self, k_g: KeyMaterial, raw: RawSecurePacket) -> Optional[str]:
        """Decrypt the tail block by block until the NUL terminator shows up"""
        stream = CtrStream(k_g, build_iv(k_g.salt, raw.sender_id, raw.msg_seqno))
        limit = min(len(raw.tail) - AEAD_TAG_SIZE, MAX_CHANNELNAME_SIZE)
        name = b""
        for offset in range(0, limit, 16):
            block = stream.update(raw.tail[offset:min(offset + 16, limit)])
            end = block.find(b"\x00")
            if end >= 0:
                name += block[:end]
                return name.decode("ascii") if name.isascii() else None
            name += block
        return None

    def _open(self, raw: RawSecurePacket, now: float) -> Optional[Delivery]:
        group_keys = self.keys.lookup(self.group_scope, now)
        if not group_keys:
            return self._drop(DROP_NO_GROUP_KEY)
        reason = DROP_NO_TERMINATOR

        def worse(candidate):
            return candidate if _DROP_PRIORITY[candidate] > _DROP_PRIORITY[reason] else reason

        for k_g in group_keys:
            channel = self._decrypt_name(k_g, raw)
            if channel is None:
                continue
            if channel not in self.config.channels:
                reason = worse(DROP_UNSUBSCRIBED)
                continue
            channel_keys = self.keys.lookup(self.channel_scope(channel), now)
            if not channel_keys:
                reason = worse(DROP_UNKNOWN_CHANNEL_KEY)
                continue
            aad = encode_channelname(channel)
            body = raw.split(len(aad)).body
            for k_ch in channel_keys:
                try:
                    payload = aead_open(k_ch, build_iv(k_ch.salt, raw.sender_id, raw.msg_seqno), body, aad)
                except (AuthFailure, TooShort):
                    reason = worse(DROP_AUTH_FAILURE)
                    continue
                if not self.replay_check(channel, raw.sender_id, raw.msg_seqno, k_ch.epoch):
                    return self._drop(DROP_REPLAYED, f"{channel} sender {raw.sender_id} seqno {raw.msg_seqno}")
                return self._deliver(Delivery(channel, payload, raw.sender_id, raw.msg_seqno, k_ch.epoch), now)
        return self._drop(reason)

    def replay_check(self, channel: str, sender_id: int, seqno: int, epoch: Optional[int] = None) -> bool:
        """
        Accept (channel, sender_id, seqno) at most once per channel epoch.

        Only call this for authenticated packets.
        """
        if epoch is None:
            newest = self.keys.newest(self.channel_scope(channel))
            epoch = newest.epoch if newest is not None else 0
        key = (channel, sender_id, epoch)
        window = self._windows.get(key)
        if window is None:
            window = self._windows[key] = ReplayWindow(self.config.replay_window)
        return window.update(seqno)

    def _deliver(self, delivery: Delivery, now: float) -> Optional[Delivery]:
        if self.reorder is not None:
            stream = (delivery.channel, delivery.sender_id, delivery.epoch)
            if not self.reorder.push(stream, delivery, now):
                return self._drop(DROP_REORDER_LATE, f"{delivery.channel} seqno {delivery.seqno}")
            self.endpoint.call_later(self.reorder.hold_ms, self._release_reordered)
            return None
        self._dispatch(delivery)
        return delivery

    def _release_reordered(self):
        for delivery in self.reorder.release(self.endpoint.now_ms()):
            self._dispatch(delivery)

    def _dispatch(self, delivery: Delivery):
        self.stats["delivered"] += 1
        for handler in list(self.handlers.get(delivery.channel, [])):
            try:
                handler(delivery.channel, delivery.payload)
            except Exception as e:
                logger.error(f"handler for {delivery.channel} failed: {e}")


async def wait_ready(session: Session, timeout_ms: float, poll_ms: float = 50.0):
    """
    Wait on the running loop until the session holds keys for every channel.

    Raises:
        NoKey: discovery did not finish within timeout_ms
    """
    deadline = asyncio.get_running_loop().time() + timeout_ms / 1000.0
    while not session.is_ready():
        if asyncio.get_running_loop().time() >= deadline:
            raise NoKey(f"no keys for {session.config.group} after {timeout_ms} ms of discovery")
        await asyncio.sleep(poll_ms / 1000.0)
    logger.info(f"keys established for {session.config.group}")
