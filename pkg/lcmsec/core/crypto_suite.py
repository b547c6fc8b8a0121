"""
Symmetric primitives, signatures and the prime-order group used by the key agreement.

AES-128-GCM seals payloads, AES-CTR hides channelnames, HKDF-SHA256 turns an
agreed session seed into key material, ECDSA signs management traffic and
fastecdsa provides the elliptic-curve arithmetic the group key agreement rounds need.
"""

import logging
import os
import random
import secrets
import struct
import threading
from collections import deque
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from fastecdsa.curve import P256, P384, Curve
from fastecdsa.encoding.sec1 import InvalidSEC1PublicKey, SEC1Encoder
from fastecdsa.point import Point

from lcmsec.core.const import (
    AEAD_KEY_SIZE,
    AEAD_TAG_SIZE,
    DEFAULT_CURVE,
    ENV_VAR_IV_REUSE_CHECK,
    IV_REUSE_LOG_SIZE,
    KDF_SALT,
    SALT_SIZE,
)
from lcmsec.core.exceptions import (
    AuthFailure,
    CryptoSuiteException,
    InvalidElement,
    InvalidScalar,
    IvReuse,
    TooShort,
)
from lcmsec.core.identity import LcmDomain

logger = logging.getLogger(__name__)

GROUP_CURVES = {
    "secp256r1": P256,
    "secp384r1": P384,
}

# GroupElement is a fastecdsa Point, None stands for the identity
GroupElement = Optional[Point]


@dataclass(frozen=True)
class KeyMaterial:
    """
    Epoch-scoped symmetric secret produced by kdf_expand.

    group_epoch records the group-level epoch a channel key was agreed under;
    sender ids are only stable within one group epoch.
    """

    key: bytes
    salt: int
    epoch: int = 0
    scope: Optional[LcmDomain] = None
    group_epoch: int = 0

    def __repr__(self) -> str:
        return f"KeyMaterial(scope={self.scope}, epoch={self.epoch})"


def build_iv(salt: int, sender_id: int, msg_seqno: int) -> bytes:
    """salt ‖ sender_id ‖ msg_seqno ‖ 0x00000000, big-endian"""
    return struct.pack(">HHII", salt, sender_id, msg_seqno, 0)


class _IvReuseLog:
    """Remembers the last IV_REUSE_LOG_SIZE IVs sealed under each key"""

    def __init__(self, size: int = IV_REUSE_LOG_SIZE):
        self.size = size
        self.enabled = os.environ.get(ENV_VAR_IV_REUSE_CHECK, "") not in ("", "0")
        self._seen: dict[bytes, tuple[deque, set]] = {}
        self._lock = threading.Lock()

    def record(self, key: bytes, iv: bytes):
        if not self.enabled:
            return
        with self._lock:
            order, seen = self._seen.setdefault(key, (deque(), set()))
            if iv in seen:
                raise IvReuse(f"IV {iv.hex()} reused")
            order.append(iv)
            seen.add(iv)
            if len(order) > self.size:
                seen.discard(order.popleft())

    def reset(self):
        with self._lock:
            self._seen.clear()


_iv_log = _IvReuseLog()


def enable_iv_reuse_check(enabled: bool = True):
    """Switch the IV-reuse log on or off for this process"""
    _iv_log.enabled = enabled
    _iv_log.reset()


def aead_seal(key: KeyMaterial, iv: bytes, plaintext: bytes, aad: bytes) -> bytes:
    """AES-128-GCM; returns ciphertext ‖ 16-byte tag"""
    _iv_log.record(key.key, iv)
    return AESGCM(key.key).encrypt(iv, plaintext, aad)


def aead_open(key: KeyMaterial, iv: bytes, ciphertext_and_tag: bytes, aad: bytes) -> bytes:
    if len(ciphertext_and_tag) < AEAD_TAG_SIZE:
        raise TooShort(f"{len(ciphertext_and_tag)} bytes is shorter than the tag")
    try:
        return AESGCM(key.key).decrypt(iv, ciphertext_and_tag, aad)
    except InvalidTag as e:
        raise AuthFailure("authentication tag mismatch") from e


class CtrStream:
    """
    Incremental AES-CTR over one IV; the 32-bit block counter starts at 0.

    Feeding bytes one at a time yields the same output as one call, so the
    receiver can stop at the channelname terminator.
    """

    def __init__(self, key: KeyMaterial, iv: bytes):
        self._ctx = Cipher(algorithms.AES(key.key), modes.CTR(iv + b"\x00\x00\x00\x00")).encryptor()

    def update(self, data: bytes) -> bytes:
        return self._ctx.update(data)


def ctr_crypt(key: KeyMaterial, iv: bytes, data: bytes) -> bytes:
    return CtrStream(key, iv).update(data)


def kdf_context(scope: LcmDomain, instance_id: int, group_epoch: int = 0) -> bytes:
    """
    Canonical (group, channel, d, group epoch) binding for kdf_expand.

    Channel keys carry the group epoch they were agreed under, so members that
    disagree on the group epoch never share a channel key.
    """
    group = scope.group.encode("ascii")
    channel = scope.channel.encode("ascii")
    return (struct.pack(">I", len(group)) + group + struct.pack(">I", len(channel)) + channel
            + struct.pack(">QQ", instance_id, group_epoch))


def _hkdf(seed: bytes, context: bytes, length: int) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=KDF_SALT, info=context).derive(seed)


def kdf_expand(session_seed: bytes, context: bytes, epoch: int = 0, scope: Optional[LcmDomain] = None,
               group_epoch: int = 0) -> KeyMaterial:
    """16-byte key then 2-byte salt from one HKDF-SHA256 expand stream"""
    okm = _hkdf(session_seed, context, AEAD_KEY_SIZE + SALT_SIZE)
    (salt,) = struct.unpack(">H", okm[AEAD_KEY_SIZE:])
    return KeyMaterial(okm[:AEAD_KEY_SIZE], salt, epoch, scope, group_epoch)


def sign(msg: bytes, private_key: ec.EllipticCurvePrivateKey) -> bytes:
    # RFC 6979 nonces keep simulated transcripts reproducible
    return private_key.sign(msg, ec.ECDSA(hashes.SHA256(), deterministic_signing=True))


def verify(msg: bytes, signature: bytes, public_key: ec.EllipticCurvePublicKey) -> bool:
    try:
        public_key.verify(signature, msg, ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


class GroupOps:
    """Prime-order elliptic-curve group; elements are fastecdsa points, None is the identity"""

    IDENTITY_ENCODING = b"\x00"

    def __init__(self, curve_name: str = DEFAULT_CURVE):
        try:
            self.curve: Curve = GROUP_CURVES[curve_name]
        except KeyError:
            raise CryptoSuiteException(f"unsupported curve {curve_name}")
        self.name = curve_name
        self.order = self.curve.q
        self.generator: Point = self.curve.G
        self.identity: GroupElement = None
        self._scalar_bytes = (self.order.bit_length() + 7) // 8

    def check_scalar(self, s: int):
        if not isinstance(s, int) or not 1 <= s < self.order:
            raise InvalidScalar("scalar outside [1, q-1]")

    def random_scalar(self, rng: Optional[random.Random] = None) -> int:
        if rng is not None:
            return rng.randrange(1, self.order)
        return secrets.randbelow(self.order - 1) + 1

    def scalar_from(self, seed: bytes, context: bytes) -> int:
        """Map (seed, context) to a scalar with 128 bits of surplus to flatten the bias"""
        okm = _hkdf(seed, context, self._scalar_bytes + 16)
        return int.from_bytes(okm, "big") % (self.order - 1) + 1

    def exp(self, base: GroupElement, s: int) -> GroupElement:
        self.check_scalar(s)
        if base is None:
            return None
        return s * base

    def op(self, a: GroupElement, b: GroupElement) -> GroupElement:
        if a is None:
            return b
        if b is None:
            return a
        if a.x == b.x and (a.y + b.y) % self.curve.p == 0:
            return None
        return a + b

    def inv(self, a: GroupElement) -> GroupElement:
        if a is None:
            return None
        return Point(a.x, (-a.y) % self.curve.p, curve=self.curve)

    def fold(self, elements) -> GroupElement:
        result = self.identity
        for e in elements:
            result = self.op(result, e)
        return result

    def serialize(self, a: GroupElement) -> bytes:
        """SEC1 compressed point, a single zero byte for the identity"""
        if a is None:
            return self.IDENTITY_ENCODING
        return SEC1Encoder.encode_public_key(a, compressed=True)

    def deserialize(self, data: bytes, allow_identity: bool = False) -> GroupElement:
        """
        Decode and validate a point.

        Only canonical compressed encodings are accepted. The curves have
        cofactor 1, so an on-curve point lies in the prime-order group.
        """
        if data == self.IDENTITY_ENCODING:
            if allow_identity:
                return None
            raise InvalidElement("identity element not allowed here")
        if len(data) != 1 + (self.curve.p.bit_length() + 7) // 8 or data[0] not in (2, 3):
            raise InvalidElement("not a compressed SEC1 point")
        try:
            point = SEC1Encoder.decode_public_key(data, self.curve)
        except (InvalidSEC1PublicKey, ValueError, ArithmeticError) as e:
            raise InvalidElement("point is not on the curve") from e
        if not self.curve.is_point_on_curve((point.x, point.y)):
            raise InvalidElement("point is not on the curve")
        return point
