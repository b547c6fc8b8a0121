import os
import random
import unittest
from unittest.mock import patch

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from lcmsec.core.crypto_suite import (
    CtrStream,
    GroupOps,
    _IvReuseLog,
    KeyMaterial,
    aead_open,
    aead_seal,
    build_iv,
    ctr_crypt,
    enable_iv_reuse_check,
    kdf_context,
    kdf_expand,
    sign,
    verify,
)
from lcmsec.core.const import ENV_VAR_IV_REUSE_CHECK
from lcmsec.core.exceptions import AuthFailure, InvalidElement, InvalidScalar, IvReuse, TooShort
from lcmsec.core.identity import LcmDomain, generate_private_key

GROUP = "239.255.76.67:7667"
ZERO_KEY = KeyMaterial(bytes(16), 0)


def ecb_keystream(key: bytes, iv: bytes, blocks: int) -> bytes:
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return b"".join(enc.update(iv + i.to_bytes(4, "big")) for i in range(blocks))


class TestAead(unittest.TestCase):

    def test_gcm_known_answers(self):
        self.assertEqual(aead_seal(ZERO_KEY, bytes(12), b"", b"").hex(), "58e2fccefa7e3061367f1d57a4e7455a")
        sealed = aead_seal(ZERO_KEY, bytes(12), bytes(16), b"")
        self.assertEqual(sealed[:16].hex(), "0388dace60b6a392f328c2b971b2fe78")
        self.assertEqual(sealed[16:].hex(), "ab6e47d42cec13bdf53a67b21257bddf")

    def test_open(self):
        key = KeyMaterial(bytes(range(16)), 7)
        iv = build_iv(key.salt, 3, 42)
        sealed = aead_seal(key, iv, b"payload", b"chatter\x00")
        self.assertEqual(aead_open(key, iv, sealed, b"chatter\x00"), b"payload")

    def test_tamper(self):
        key = KeyMaterial(bytes(range(16)), 7)
        iv = build_iv(key.salt, 3, 42)
        sealed = aead_seal(key, iv, b"payload", b"chatter\x00")
        flipped = bytes([sealed[0] ^ 1]) + sealed[1:]
        self.assertRaises(AuthFailure, aead_open, key, iv, flipped, b"chatter\x00")
        self.assertRaises(AuthFailure, aead_open, key, iv, sealed, b"other\x00")
        self.assertRaises(AuthFailure, aead_open, key, build_iv(key.salt, 3, 43), sealed, b"chatter\x00")
        self.assertRaises(TooShort, aead_open, key, iv, sealed[:15], b"chatter\x00")

    def test_iv_reuse_check(self):
        enable_iv_reuse_check(True)
        try:
            key = KeyMaterial(bytes(16), 1)
            aead_seal(key, build_iv(1, 1, 1), b"a", b"")
            aead_seal(key, build_iv(1, 1, 2), b"a", b"")
            self.assertRaises(IvReuse, aead_seal, key, build_iv(1, 1, 1), b"b", b"")
        finally:
            enable_iv_reuse_check(False)

    def test_iv_reuse_check_from_environment(self):
        with patch.dict(os.environ, {ENV_VAR_IV_REUSE_CHECK: "1"}):
            self.assertTrue(_IvReuseLog().enabled)
        with patch.dict(os.environ, {ENV_VAR_IV_REUSE_CHECK: "0"}):
            self.assertFalse(_IvReuseLog().enabled)


class TestCtr(unittest.TestCase):

    def test_iv_layout(self):
        self.assertEqual(build_iv(0x1234, 0x5678, 0x9ABCDEF0).hex(), "123456789abcdef000000000")

    def test_matches_ecb_oracle(self):
        rng = random.Random(3)
        key = KeyMaterial(rng.randbytes(16), 0)
        iv = build_iv(0xBEEF, 9, 1000)[:12]
        data = rng.randbytes(70)
        stream = ecb_keystream(key.key, iv, 5)
        self.assertEqual(ctr_crypt(key, iv, data), bytes(a ^ b for a, b in zip(data, stream)))

    def test_stream_is_incremental(self):
        key = KeyMaterial(bytes(range(16)), 0)
        iv = build_iv(1, 2, 3)
        data = b"a channelname\x00 followed by a body"
        stream = CtrStream(key, iv)
        piecewise = b"".join(stream.update(data[i:i + 1]) for i in range(len(data)))
        self.assertEqual(piecewise, ctr_crypt(key, iv, data))
        self.assertEqual(ctr_crypt(key, iv, ctr_crypt(key, iv, data)), data)


class TestKdf(unittest.TestCase):

    def test_expand(self):
        scope = LcmDomain(GROUP, "chatter")
        material = kdf_expand(b"seed", kdf_context(scope, 3, 2), 3, scope, 2)
        self.assertEqual(len(material.key), 16)
        self.assertTrue(0 <= material.salt <= 0xFFFF)
        self.assertEqual(material.epoch, 3)
        self.assertEqual(material.group_epoch, 2)
        self.assertEqual(material, kdf_expand(b"seed", kdf_context(scope, 3, 2), 3, scope, 2))
        self.assertNotIn(material.key.hex(), repr(material))

    def test_context_binds_every_field(self):
        scope = LcmDomain(GROUP, "chatter")
        keys = {
            kdf_expand(b"seed", kdf_context(scope, 3, 2)).key,
            kdf_expand(b"seed", kdf_context(scope, 4, 2)).key,
            kdf_expand(b"seed", kdf_context(scope, 3, 1)).key,
            kdf_expand(b"seed", kdf_context(LcmDomain(GROUP, "other"), 3, 2)).key,
            kdf_expand(b"seed", kdf_context(LcmDomain(GROUP), 3, 2)).key,
            kdf_expand(b"other seed", kdf_context(scope, 3, 2)).key,
        }
        self.assertEqual(len(keys), 6)

    def test_context_is_unambiguous(self):
        # group "a:1" channel "b" must not collide with group "a" channel "1b"
        self.assertNotEqual(kdf_context(LcmDomain("a:1", "b"), 1), kdf_context(LcmDomain("a", "1b"), 1))


class TestSignature(unittest.TestCase):

    def test_sign_verify(self):
        key = generate_private_key()
        signature = sign(b"envelope", key)
        self.assertEqual(signature, sign(b"envelope", key))
        self.assertTrue(verify(b"envelope", signature, key.public_key()))
        self.assertFalse(verify(b"envelope!", signature, key.public_key()))
        self.assertFalse(verify(b"envelope", b"garbage", key.public_key()))
        self.assertFalse(verify(b"envelope", signature, generate_private_key().public_key()))


class TestGroupOps(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.g = GroupOps("secp256r1")
        cls.rng = random.Random(11)

    def test_exponent_laws(self):
        g = self.g
        a, b = g.random_scalar(self.rng), g.random_scalar(self.rng)
        ga = g.exp(g.generator, a)
        self.assertEqual(g.exp(ga, b), g.exp(g.exp(g.generator, b), a))
        self.assertEqual(g.op(g.exp(g.generator, a), g.exp(g.generator, b)), g.exp(g.generator, (a + b) % g.order))

    def test_identity_and_inverse(self):
        g = self.g
        x = g.exp(g.generator, g.random_scalar(self.rng))
        self.assertIsNone(g.op(x, g.inv(x)))
        self.assertEqual(g.op(x, g.identity), x)
        self.assertEqual(g.op(g.identity, x), x)
        self.assertIsNone(g.fold([]))
        self.assertEqual(g.fold([x, g.inv(x), x]), x)

    def test_serialization(self):
        g = self.g
        x = g.exp(g.generator, g.random_scalar(self.rng))
        data = g.serialize(x)
        self.assertEqual(len(data), 33)
        self.assertEqual(g.deserialize(data), x)
        self.assertEqual(g.serialize(None), b"\x00")
        self.assertIsNone(g.deserialize(b"\x00", allow_identity=True))
        self.assertRaises(InvalidElement, g.deserialize, b"\x00")
        self.assertRaises(InvalidElement, g.deserialize, b"\x04" + data[1:])
        self.assertRaises(InvalidElement, g.deserialize, data[:-1])

    def test_scalars(self):
        g = self.g
        self.assertRaises(InvalidScalar, g.exp, g.generator, 0)
        self.assertRaises(InvalidScalar, g.exp, g.generator, g.order)
        s = g.scalar_from(b"seed", b"context")
        self.assertTrue(1 <= s < g.order)
        self.assertEqual(s, g.scalar_from(b"seed", b"context"))
        self.assertNotEqual(s, g.scalar_from(b"seed", b"other context"))

    def test_p384(self):
        g = GroupOps("secp384r1")
        x = g.exp(g.generator, g.random_scalar(self.rng))
        self.assertEqual(len(g.serialize(x)), 49)
        self.assertEqual(g.deserialize(g.serialize(x)), x)
