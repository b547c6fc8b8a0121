"""
Bit-exact wire formats.

Data packets (all integers big-endian):

    SecurePacket    magic:u32 seqno:u32 sender_id:u16 enc_channelname body
    FragmentPacket  magic:u32 seqno:u32 sender_id:u16 full_body_length:u32
                    fragment_offset:u32 fragment_no:u16 fragments_total:u16 data
    plain LCM       magic:u32 seqno:u32 channelname NUL payload

`body` is the AEAD ciphertext followed by its 16-byte tag. Fragment 0 carries
the encrypted channelname in front of its chunk; later fragments carry chunks
only.

Management envelopes are signed, never encrypted:

    magic:u32 kind:u8 group:bytes channel:bytes signer:32 payload:bytes signature:bytes

where `bytes` fields are 32-bit length prefixed and the signature covers every
byte between the magic and the signature length prefix.
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Union

from lcmsec.core.const import (
    AEAD_TAG_SIZE,
    FRAGMENT_HEADER_SIZE,
    MAGIC_FRAGMENT,
    MAGIC_MANAGEMENT,
    MAGIC_PLAIN_LCM,
    MAGIC_SECURE,
    MAX_BODY_SIZE,
    MAX_CHANNELNAME_SIZE,
    MAX_FRAGMENTS,
    PLAIN_HEADER_SIZE,
    REASSEMBLY_MAX_PER_SENDER,
    REASSEMBLY_TIMEOUT_MS,
    SECURE_HEADER_SIZE,
    SIGNER_FINGERPRINT_SIZE,
)
from lcmsec.core.exceptions import (
    BadMagic,
    BadName,
    InconsistentFragment,
    NonCanonical,
    OversizeMessage,
    Truncated,
    WireCodecException,
)
from lcmsec.core.identity import LcmDomain
from lcmsec.core.util import pack_bytes, unpack_bytes

_SECURE_HEADER = struct.Struct(">IIH")
_FRAGMENT_HEADER = struct.Struct(">IIHIIHH")
_PLAIN_HEADER = struct.Struct(">II")

# smallest tail: NUL of an empty name plus the tag
MIN_SECURE_TAIL = 1 + AEAD_TAG_SIZE


def peek_magic(b: bytes) -> int:
    if len(b) < 4:
        raise Truncated("datagram shorter than a magic number")
    return struct.unpack_from(">I", b)[0]


def encode_channelname(name: str) -> bytes:
    """ASCII name plus NUL terminator"""
    if not isinstance(name, str) or not name.isascii() or "\x00" in name:
        raise BadName(f"channelname {name!r} must be ASCII without NUL")
    encoded = name.encode("ascii") + b"\x00"
    if len(encoded) > MAX_CHANNELNAME_SIZE:
        raise BadName(f"channelname longer than {MAX_CHANNELNAME_SIZE - 1} bytes")
    return encoded


@dataclass(frozen=True)
class SecurePacket:
    msg_seqno: int
    sender_id: int
    enc_channelname: bytes = b""
    body: bytes = b""

    @property
    def tail(self) -> bytes:
        return self.enc_channelname + self.body


@dataclass(frozen=True)
class RawSecurePacket:
    """Decoded header plus the undifferentiated tail; the session splits the tail"""

    msg_seqno: int
    sender_id: int
    tail: bytes

    def split(self, name_length: int) -> SecurePacket:
        return SecurePacket(self.msg_seqno, self.sender_id, self.tail[:name_length], self.tail[name_length:])


def encode_secure(p: SecurePacket) -> bytes:
    return _SECURE_HEADER.pack(MAGIC_SECURE, p.msg_seqno, p.sender_id) + p.enc_channelname + p.body


def decode_secure(b: bytes) -> RawSecurePacket:
    if peek_magic(b) != MAGIC_SECURE:
        raise BadMagic(f"magic {peek_magic(b):#010x} is not a secure packet")
    if len(b) < SECURE_HEADER_SIZE + MIN_SECURE_TAIL:
        raise Truncated(f"secure packet of {len(b)} bytes is truncated")
    _, seqno, sender_id = _SECURE_HEADER.unpack_from(b)
    return RawSecurePacket(seqno, sender_id, bytes(b[SECURE_HEADER_SIZE:]))


def encode_plain_lcm(name: str, seqno: int, payload: bytes) -> bytes:
    return _PLAIN_HEADER.pack(MAGIC_PLAIN_LCM, seqno) + encode_channelname(name) + payload


def decode_plain_lcm(b: bytes) -> tuple[str, int, bytes]:
    """Returns (name, seqno, payload)"""
    if peek_magic(b) != MAGIC_PLAIN_LCM:
        raise BadMagic(f"magic {peek_magic(b):#010x} is not plain LCM")
    if len(b) < PLAIN_HEADER_SIZE + 1:
        raise Truncated("plain LCM packet is truncated")
    _, seqno = _PLAIN_HEADER.unpack_from(b)
    end = b.find(b"\x00", PLAIN_HEADER_SIZE, PLAIN_HEADER_SIZE + MAX_CHANNELNAME_SIZE)
    if end < 0:
        raise BadName("channelname terminator not found")
    name = b[PLAIN_HEADER_SIZE:end]
    if not name.isascii():
        raise BadName("channelname is not ASCII")
    return name.decode("ascii"), seqno, bytes(b[end + 1:])


@dataclass(frozen=True)
class FragmentPacket:
    msg_seqno: int
    sender_id: int
    full_body_length: int
    fragment_offset: int
    fragment_no: int
    fragments_total: int
    data: bytes  # enc_channelname ‖ chunk for fragment 0, chunk otherwise


def encode_fragment(f: FragmentPacket) -> bytes:
    return _FRAGMENT_HEADER.pack(
        MAGIC_FRAGMENT, f.msg_seqno, f.sender_id, f.full_body_length,
        f.fragment_offset, f.fragment_no, f.fragments_total,
    ) + f.data


def decode_fragment(b: bytes) -> FragmentPacket:
    if peek_magic(b) != MAGIC_FRAGMENT:
        raise BadMagic(f"magic {peek_magic(b):#010x} is not a fragment")
    if len(b) <= FRAGMENT_HEADER_SIZE:
        raise Truncated(f"fragment of {len(b)} bytes is truncated")
    _, seqno, sender_id, full_length, offset, no, total = _FRAGMENT_HEADER.unpack_from(b)
    if total < 2 or no >= total or offset >= full_length:
        raise InconsistentFragment(f"fragment {no}/{total} at offset {offset} of {full_length} is malformed")
    return FragmentPacket(seqno, sender_id, full_length, offset, no, total, bytes(b[FRAGMENT_HEADER_SIZE:]))


def fragment(body: bytes, enc_channelname: bytes, seqno: int, sender_id: int,
             mtu: int) -> list[Union[SecurePacket, FragmentPacket]]:
    """
    Split a sealed message into datagram-sized packets.

    Returns a single SecurePacket when header, name and body fit in mtu;
    otherwise fragments whose chunks fill each datagram completely.
    """
    if mtu <= FRAGMENT_HEADER_SIZE + len(enc_channelname) + 1:
        raise WireCodecException(f"mtu {mtu} leaves no room for fragment data")
    if len(body) > MAX_BODY_SIZE:
        raise OversizeMessage(f"body of {len(body)} bytes exceeds 32-bit length")
    if SECURE_HEADER_SIZE + len(enc_channelname) + len(body) <= mtu:
        return [SecurePacket(seqno, sender_id, enc_channelname, body)]

    capacity = mtu - FRAGMENT_HEADER_SIZE
    first = capacity - len(enc_channelname)
    total = 1 + -(-(len(body) - first) // capacity)
    if total > MAX_FRAGMENTS:
        raise OversizeMessage(f"body of {len(body)} bytes needs {total} fragments")
    packets = [FragmentPacket(seqno, sender_id, len(body), 0, 0, total, enc_channelname + body[:first])]
    offset = first
    for no in range(1, total):
        chunk = body[offset:offset + capacity]
        packets.append(FragmentPacket(seqno, sender_id, len(body), offset, no, total, chunk))
        offset += len(chunk)
    return packets


def encode_packet(p: Union[SecurePacket, FragmentPacket]) -> bytes:
    if isinstance(p, SecurePacket):
        return encode_secure(p)
    return encode_fragment(p)


@dataclass(frozen=True)
class ReassembledMessage:
    msg_seqno: int
    sender_id: int
    enc_channelname: bytes
    body: bytes

    def to_raw(self) -> RawSecurePacket:
        return RawSecurePacket(self.msg_seqno, self.sender_id, self.enc_channelname + self.body)


@dataclass
class _PartialMessage:
    full_body_length: int
    fragments_total: int
    first_seen: float
    fragments: dict[int, FragmentPacket] = field(default_factory=dict)


class FragmentBuffer:
    """
    Reassembly store for one session.

    Holds at most max_per_sender incomplete messages per sender and evicts any
    message that stayed incomplete for timeout_ms.
    """

    def __init__(self, max_per_sender: int = REASSEMBLY_MAX_PER_SENDER, timeout_ms: float = REASSEMBLY_TIMEOUT_MS):
        self.max_per_sender = max_per_sender
        self.timeout_ms = timeout_ms
        self._pending: dict[tuple[int, int], _PartialMessage] = {}
        self.evicted = 0

    def __len__(self) -> int:
        return len(self._pending)

    def expire(self, now: float):
        stale = [k for k, m in self._pending.items() if now - m.first_seen >= self.timeout_ms]
        for k in stale:
            del self._pending[k]
        self.evicted += len(stale)

    def _bound_sender(self, sender_id: int):
        keys = [k for k in self._pending if k[0] == sender_id]
        while len(keys) >= self.max_per_sender:
            oldest = min(keys, key=lambda k: self._pending[k].first_seen)
            del self._pending[oldest]
            keys.remove(oldest)
            self.evicted += 1

    def reassemble(self, f: FragmentPacket, now: float) -> Optional[ReassembledMessage]:
        """
        Add a fragment; return the message once all fragments are present.

        Raises:
            InconsistentFragment: totals, lengths or offsets disagree
        """
        self.expire(now)
        key = (f.sender_id, f.msg_seqno)
        partial = self._pending.get(key)
        if partial is None:
            self._bound_sender(f.sender_id)
            partial = _PartialMessage(f.full_body_length, f.fragments_total, now)
            self._pending[key] = partial
        elif (partial.full_body_length, partial.fragments_total) != (f.full_body_length, f.fragments_total):
            del self._pending[key]
            raise InconsistentFragment(f"fragment totals disagree for sender {f.sender_id} seqno {f.msg_seqno}")
        known = partial.fragments.get(f.fragment_no)
        if known is not None:
            if known != f:
                del self._pending[key]
                raise InconsistentFragment(f"conflicting duplicate of fragment {f.fragment_no}")
            return None
        partial.fragments[f.fragment_no] = f
        if len(partial.fragments) < partial.fragments_total:
            return None
        del self._pending[key]
        return self._join(partial)

    @staticmethod
    def _join(partial: _PartialMessage) -> ReassembledMessage:
        frags = [partial.fragments[i] for i in range(partial.fragments_total)]
        first_chunk = frags[1].fragment_offset
        name_length = len(frags[0].data) - first_chunk
        if first_chunk <= 0 or name_length < 1:
            raise InconsistentFragment("first fragment does not hold the channelname and a chunk")
        chunks = [frags[0].data[name_length:]]
        end = first_chunk
        for f in frags[1:]:
            if f.fragment_offset != end:
                raise InconsistentFragment(f"gap or overlap at offset {f.fragment_offset}")
            chunks.append(f.data)
            end += len(f.data)
        if end != partial.full_body_length:
            raise InconsistentFragment(f"chunks sum to {end}, expected {partial.full_body_length}")
        f0 = frags[0]
        return ReassembledMessage(f0.msg_seqno, f0.sender_id, f0.data[:name_length], b"".join(chunks))


class ManagementKind(IntEnum):
    JOIN = 1
    JOIN_RESPONSE = 2
    GKA_ROUND1 = 3
    GKA_ROUND2 = 4


@dataclass(frozen=True)
class ManagementEnvelope:
    kind: ManagementKind
    scope: LcmDomain
    signer: bytes
    payload: bytes
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        """Canonical bytes the signature covers"""
        if len(self.signer) != SIGNER_FINGERPRINT_SIZE:
            raise WireCodecException("signer fingerprint must be 32 bytes")
        return (
            struct.pack(">B", int(self.kind))
            + pack_bytes(self.scope.group.encode("ascii"))
            + pack_bytes(self.scope.channel.encode("ascii"))
            + self.signer
            + pack_bytes(self.payload)
        )


def encode_management(m: ManagementEnvelope) -> bytes:
    return struct.pack(">I", MAGIC_MANAGEMENT) + m.signed_bytes() + pack_bytes(m.signature)


def decode_management(b: bytes) -> ManagementEnvelope:
    """
    Decode a management envelope and insist on canonical form.

    Raises:
        BadMagic, Truncated, NonCanonical
    """
    if peek_magic(b) != MAGIC_MANAGEMENT:
        raise BadMagic(f"magic {peek_magic(b):#010x} is not a management envelope")
    try:
        if len(b) < 5:
            raise ValueError("missing kind")
        try:
            kind = ManagementKind(b[4])
        except ValueError as e:
            raise NonCanonical(f"unknown management kind {b[4]}") from e
        group, offset = unpack_bytes(b, 5)
        channel, offset = unpack_bytes(b, offset)
        if offset + SIGNER_FINGERPRINT_SIZE > len(b):
            raise ValueError("missing signer")
        signer = b[offset:offset + SIGNER_FINGERPRINT_SIZE]
        payload, offset = unpack_bytes(b, offset + SIGNER_FINGERPRINT_SIZE)
        signature, offset = unpack_bytes(b, offset)
    except ValueError as e:
        raise Truncated(f"management envelope truncated: {e}") from e
    if not group.isascii() or not channel.isascii():
        raise NonCanonical("scope is not ASCII")
    m = ManagementEnvelope(kind, LcmDomain(group.decode("ascii"), channel.decode("ascii")), bytes(signer),
                           bytes(payload), bytes(signature))
    if encode_management(m) != bytes(b):
        raise NonCanonical("management envelope is not in canonical form")
    return m


def _canonical(decoder, payload: bytes):
    obj = decoder(payload)
    if obj.encode() != payload:
        raise NonCanonical(f"{type(obj).__name__} payload is not in canonical form")
    return obj


@dataclass(frozen=True)
class JoinPayload:
    """JOIN = (t, instance hint, certificate)"""

    t: int
    instance: int
    certificate: bytes

    def encode(self) -> bytes:
        return struct.pack(">QQ", self.t, self.instance) + pack_bytes(self.certificate)

    @classmethod
    def _decode(cls, payload: bytes) -> "JoinPayload":
        try:
            if len(payload) < 16:
                raise ValueError("missing timestamp")
            t, instance = struct.unpack_from(">QQ", payload)
            cert, _ = unpack_bytes(payload, 16)
        except (ValueError, struct.error) as e:
            raise Truncated(f"JOIN payload truncated: {e}") from e
        return cls(t, instance, bytes(cert))

    @classmethod
    def decode(cls, payload: bytes) -> "JoinPayload":
        return _canonical(cls._decode, payload)


@dataclass(frozen=True, order=True)
class MemberEntry:
    uid: int
    certificate: bytes


def _encode_members(entries: Iterable[MemberEntry]) -> bytes:
    entries = sorted(entries)
    out = [struct.pack(">I", len(entries))]
    for e in entries:
        out.append(struct.pack(">H", e.uid) + pack_bytes(e.certificate))
    return b"".join(out)


def _decode_members(payload: bytes, offset: int) -> tuple[tuple[MemberEntry, ...], int]:
    if offset + 4 > len(payload):
        raise ValueError("missing member count")
    (count,) = struct.unpack_from(">I", payload, offset)
    offset += 4
    entries = []
    for _ in range(count):
        if offset + 2 > len(payload):
            raise ValueError("missing member uid")
        (uid,) = struct.unpack_from(">H", payload, offset)
        cert, offset = unpack_bytes(payload, offset + 2)
        entries.append(MemberEntry(uid, bytes(cert)))
    uids = [e.uid for e in entries]
    if uids != sorted(set(uids)):
        raise NonCanonical("member set is not in strictly ascending uid order")
    return tuple(entries), offset


@dataclass(frozen=True)
class JoinResponsePayload:
    """JOIN_Response = (t, instance, P, J); sets are normalized to ascending uid"""

    t: int
    instance: int
    participants: tuple[MemberEntry, ...]
    joining: tuple[MemberEntry, ...]

    def encode(self) -> bytes:
        return (struct.pack(">QQ", self.t, self.instance)
                + _encode_members(self.participants) + _encode_members(self.joining))

    @classmethod
    def _decode(cls, payload: bytes) -> "JoinResponsePayload":
        try:
            if len(payload) < 16:
                raise ValueError("missing timestamp")
            t, instance = struct.unpack_from(">QQ", payload)
            participants, offset = _decode_members(payload, 16)
            joining, _ = _decode_members(payload, offset)
        except (ValueError, struct.error) as e:
            raise Truncated(f"JOIN_Response payload truncated: {e}") from e
        return cls(t, instance, participants, joining)

    @classmethod
    def decode(cls, payload: bytes) -> "JoinResponsePayload":
        return _canonical(cls._decode, payload)


@dataclass(frozen=True)
class GkaRoundPayload:
    """(uid ‖ round ‖ element ‖ d)"""

    uid: int
    round_no: int
    element: bytes
    instance_id: int

    def encode(self) -> bytes:
        return struct.pack(">HB", self.uid, self.round_no) + pack_bytes(self.element) + struct.pack(">Q", self.instance_id)

    @classmethod
    def _decode(cls, payload: bytes) -> "GkaRoundPayload":
        try:
            if len(payload) < 3:
                raise ValueError("missing uid")
            uid, round_no = struct.unpack_from(">HB", payload)
            element, offset = unpack_bytes(payload, 3)
            if offset + 8 != len(payload):
                raise ValueError("instance id missing or trailing bytes")
            (instance_id,) = struct.unpack_from(">Q", payload, offset)
        except (ValueError, struct.error) as e:
            raise Truncated(f"GKA payload truncated: {e}") from e
        return cls(uid, round_no, bytes(element), instance_id)

    @classmethod
    def decode(cls, payload: bytes) -> "GkaRoundPayload":
        return _canonical(cls._decode, payload)


def decode_datagram(b: bytes) -> Union[RawSecurePacket, FragmentPacket, ManagementEnvelope]:
    """Route a datagram to the decoder its magic names"""
    magic = peek_magic(b)
    if magic == MAGIC_SECURE:
        return decode_secure(b)
    if magic == MAGIC_FRAGMENT:
        return decode_fragment(b)
    if magic == MAGIC_MANAGEMENT:
        return decode_management(b)
    raise BadMagic(f"unknown magic {magic:#010x}")
