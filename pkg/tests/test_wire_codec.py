import random
import string
import unittest

from lcmsec.core.crypto_suite import KeyMaterial, aead_seal, build_iv, ctr_crypt
from lcmsec.core.exceptions import BadMagic, BadName, InconsistentFragment, NonCanonical, Truncated
from lcmsec.core.identity import LcmDomain
from lcmsec.core.wire_codec import (
    FragmentBuffer,
    FragmentPacket,
    GkaRoundPayload,
    JoinPayload,
    JoinResponsePayload,
    ManagementEnvelope,
    ManagementKind,
    MemberEntry,
    RawSecurePacket,
    SecurePacket,
    decode_datagram,
    decode_fragment,
    decode_management,
    decode_plain_lcm,
    decode_secure,
    encode_channelname,
    encode_fragment,
    encode_management,
    encode_packet,
    encode_plain_lcm,
    encode_secure,
    fragment,
)

SIGNER = b"\x11" * 32


class TestGoldenBytes(unittest.TestCase):

    def test_secure_packet(self):
        packet = SecurePacket(1, 2, b"\xaa", b"\xbb" * 16)
        self.assertEqual(encode_secure(packet).hex(), "4c433353" "00000001" "0002" "aa" + "bb" * 16)

    def test_plain_lcm(self):
        self.assertEqual(encode_plain_lcm("ab", 5, b"xy").hex(), "4c433032" "00000005" "616200" "7879")
        self.assertEqual(decode_plain_lcm(bytes.fromhex("4c433032000000056162007879")), ("ab", 5, b"xy"))

    def test_fragment_header(self):
        f = FragmentPacket(7, 3, 5000, 1370, 1, 4, b"\xcc")
        self.assertEqual(encode_fragment(f).hex(),
                         "4c433346" "00000007" "0003" "00001388" "0000055a" "0001" "0004" "cc")
        self.assertEqual(decode_fragment(encode_fragment(f)), f)

    def test_management_envelope(self):
        m = ManagementEnvelope(ManagementKind.JOIN, LcmDomain("g", "c"), SIGNER, b"pp", b"ss")
        self.assertEqual(encode_management(m).hex(),
                         "4c43334d" "01" "00000001" "67" "00000001" "63" + "11" * 32 + "00000002" "7070" "00000002" "7373")
        self.assertEqual(decode_management(encode_management(m)), m)


class TestSecurePacket(unittest.TestCase):

    def test_overhead_is_18_bytes(self):
        rng = random.Random(5)
        k_g = KeyMaterial(rng.randbytes(16), rng.randrange(1 << 16))
        k_ch = KeyMaterial(rng.randbytes(16), rng.randrange(1 << 16))
        for i in range(200):
            name = "".join(rng.choice(string.ascii_letters + "_/") for _ in range(rng.randrange(1, 64)))
            payload = rng.randbytes(rng.randrange(0, 2000))
            seqno, sender = rng.randrange(1 << 32), rng.randrange(1 << 16)
            enc_name = ctr_crypt(k_g, build_iv(k_g.salt, sender, seqno), encode_channelname(name))
            body = aead_seal(k_ch, build_iv(k_ch.salt, sender, seqno), payload, encode_channelname(name))
            secure = encode_secure(SecurePacket(seqno, sender, enc_name, body))
            plain = encode_plain_lcm(name, seqno, payload)
            self.assertEqual(len(secure) - len(plain), 18)

    def test_decode(self):
        raw = decode_secure(encode_secure(SecurePacket(9, 4, b"n\x00", b"\x01" * 20)))
        self.assertEqual(raw, RawSecurePacket(9, 4, b"n\x00" + b"\x01" * 20))
        self.assertEqual(raw.split(2), SecurePacket(9, 4, b"n\x00", b"\x01" * 20))

    def test_truncated(self):
        datagram = encode_secure(SecurePacket(9, 4, b"\x00", b"\x01" * 16))
        self.assertEqual(len(datagram), 27)
        decode_secure(datagram)
        self.assertRaises(Truncated, decode_secure, datagram[:-1])
        self.assertRaises(Truncated, decode_datagram, b"LC")

    def test_bad_magic(self):
        self.assertRaises(BadMagic, decode_secure, encode_plain_lcm("a", 1, b""))
        self.assertRaises(BadMagic, decode_datagram, b"\x00" * 40)
        self.assertRaises(BadMagic, decode_plain_lcm, encode_secure(SecurePacket(1, 1, b"\x00", bytes(16))))


class TestChannelname(unittest.TestCase):

    def test_names(self):
        self.assertEqual(encode_channelname("chatter"), b"chatter\x00")
        self.assertEqual(len(encode_channelname("a" * 255)), 256)
        for bad in ["a" * 256, "nul\x00", "ümlaut"]:
            with self.subTest(name=bad):
                self.assertRaises(BadName, encode_channelname, bad)


class TestFragmentation(unittest.TestCase):

    def setUp(self):
        self.rng = random.Random(17)
        self.body = self.rng.randbytes(5000)
        self.name = self.rng.randbytes(8)

    def test_single_packet_when_it_fits(self):
        packets = fragment(b"\x01" * 100, self.name, 1, 2, 1400)
        self.assertEqual(packets, [SecurePacket(1, 2, self.name, b"\x01" * 100)])

    def test_fragment_and_reassemble(self):
        packets = fragment(self.body, self.name, 77, 3, 1400)
        self.assertEqual(len(packets), 4)
        datagrams = [encode_packet(p) for p in packets]
        self.assertTrue(all(len(d) <= 1400 for d in datagrams))
        self.assertEqual(len(datagrams[0]), 1400)

        buffer = FragmentBuffer()
        order = list(range(4))
        self.rng.shuffle(order)
        result = None
        for i in order:
            self.assertIsNone(result)
            result = buffer.reassemble(decode_datagram(datagrams[i]), 0.0)
        self.assertEqual(result.enc_channelname, self.name)
        self.assertEqual(result.body, self.body)
        self.assertEqual(result.to_raw().tail, self.name + self.body)
        self.assertEqual(len(buffer), 0)

    def test_duplicates(self):
        packets = fragment(self.body, self.name, 77, 3, 1400)
        buffer = FragmentBuffer()
        self.assertIsNone(buffer.reassemble(packets[0], 0.0))
        self.assertIsNone(buffer.reassemble(packets[0], 0.0))
        altered = FragmentPacket(77, 3, 5000, 0, 0, 4, b"\x00" + packets[0].data[1:])
        self.assertRaises(InconsistentFragment, buffer.reassemble, altered, 0.0)
        self.assertEqual(len(buffer), 0)

    def test_inconsistent_totals(self):
        packets = fragment(self.body, self.name, 77, 3, 1400)
        buffer = FragmentBuffer()
        buffer.reassemble(packets[0], 0.0)
        f = packets[1]
        liar = FragmentPacket(f.msg_seqno, f.sender_id, f.full_body_length, f.fragment_offset, f.fragment_no, 5, f.data)
        self.assertRaises(InconsistentFragment, buffer.reassemble, liar, 0.0)

    def test_gap(self):
        packets = fragment(self.body, self.name, 77, 3, 1400)
        f = packets[2]
        shifted = FragmentPacket(f.msg_seqno, f.sender_id, f.full_body_length, f.fragment_offset + 1,
                                 f.fragment_no, f.fragments_total, f.data)
        buffer = FragmentBuffer()
        for p in (packets[0], packets[1], shifted):
            buffer.reassemble(p, 0.0)
        self.assertRaises(InconsistentFragment, buffer.reassemble, packets[3], 0.0)

    def test_malformed_header(self):
        for f in [FragmentPacket(1, 1, 100, 0, 0, 1, b"x"),
                  FragmentPacket(1, 1, 100, 0, 2, 2, b"x"),
                  FragmentPacket(1, 1, 100, 100, 1, 2, b"x")]:
            with self.subTest(fragment=f):
                self.assertRaises(InconsistentFragment, decode_fragment, encode_fragment(f))
        self.assertRaises(Truncated, decode_fragment, encode_fragment(FragmentPacket(1, 1, 100, 0, 0, 2, b""))[:22])

    def test_timeout_and_sender_bound(self):
        buffer = FragmentBuffer(max_per_sender=2, timeout_ms=100)
        for seqno in range(3):
            buffer.reassemble(fragment(self.body, self.name, seqno, 1, 1400)[0], float(seqno))
        self.assertEqual(len(buffer), 2)
        self.assertEqual(buffer.evicted, 1)
        buffer.reassemble(fragment(self.body, self.name, 9, 2, 1400)[0], 50.0)
        buffer.expire(102.5)
        self.assertEqual(len(buffer), 1)


class TestManagementPayloads(unittest.TestCase):

    def test_join(self):
        join = JoinPayload(1000, 4, b"certificate")
        self.assertEqual(JoinPayload.decode(join.encode()), join)
        self.assertRaises(Truncated, JoinPayload.decode, join.encode()[:10])
        self.assertRaises(NonCanonical, JoinPayload.decode, join.encode() + b"\x00")

    def test_join_response_sorted(self):
        response = JoinResponsePayload(5, 1, (MemberEntry(2, b"b"), MemberEntry(1, b"a")), (MemberEntry(3, b"c"),))
        decoded = JoinResponsePayload.decode(response.encode())
        self.assertEqual([e.uid for e in decoded.participants], [1, 2])
        self.assertEqual([e.uid for e in decoded.joining], [3])

    def test_join_response_duplicate_uid(self):
        encoded = JoinResponsePayload(5, 1, (MemberEntry(1, b"a"), MemberEntry(1, b"b")), ()).encode()
        self.assertRaises(NonCanonical, JoinResponsePayload.decode, encoded)

    def test_gka_round(self):
        payload = GkaRoundPayload(7, 2, b"\x02" + b"\x01" * 32, 12)
        self.assertEqual(GkaRoundPayload.decode(payload.encode()), payload)
        self.assertRaises(Truncated, GkaRoundPayload.decode, payload.encode() + b"\x00")
        self.assertRaises(Truncated, GkaRoundPayload.decode, payload.encode()[:-1])

    def test_envelope_non_canonical(self):
        m = ManagementEnvelope(ManagementKind.GKA_ROUND1, LcmDomain("239.1.1.1:1", "c"), SIGNER, b"p", b"s")
        encoded = encode_management(m)
        self.assertRaises(NonCanonical, decode_management, encoded + b"\x00")
        self.assertRaises(NonCanonical, decode_management, encoded[:4] + b"\x09" + encoded[5:])
        self.assertRaises(Truncated, decode_management, encoded[:-1])
        self.assertIsInstance(decode_datagram(encoded), ManagementEnvelope)
