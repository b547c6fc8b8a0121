import logging
import struct
import unittest

from lcmsec.core.util import (
    create_utc_formatter,
    is_multicast_group,
    pack_bytes,
    parse_int_list,
    split_group,
    unpack_bytes,
)


class TestSplitGroup(unittest.TestCase):

    def test_happy_path(self):
        self.assertEqual(split_group("239.255.76.67:7667"), ("239.255.76.67", 7667))

    def test_invalid(self):
        for group in ["239.255.76.67", "239.255.76.67:", ":7667", "239.255.76.67:0", "239.255.76.67:70000",
                      "239.255.76.67:port"]:
            with self.subTest(group=group):
                self.assertRaises(ValueError, split_group, group)

    def test_is_multicast(self):
        self.assertTrue(is_multicast_group("224.0.0.251:5353"))
        self.assertFalse(is_multicast_group("192.168.1.1:7667"))
        self.assertFalse(is_multicast_group("not-an-ip:7667"))
        self.assertFalse(is_multicast_group("239.1.1.1"))


class TestLengthPrefix(unittest.TestCase):

    def test_pack(self):
        self.assertEqual(pack_bytes(b"ab"), b"\x00\x00\x00\x02ab")
        buf = pack_bytes(b"first") + pack_bytes(b"")
        value, offset = unpack_bytes(buf, 0)
        self.assertEqual(value, b"first")
        self.assertEqual(unpack_bytes(buf, offset), (b"", len(buf)))

    def test_runs_past_end(self):
        self.assertRaises(ValueError, unpack_bytes, b"\x00\x00", 0)
        self.assertRaises(ValueError, unpack_bytes, struct.pack(">I", 5) + b"abc", 0)


class TestParseIntList(unittest.TestCase):

    def test_parse(self):
        self.assertEqual(parse_int_list("100, 1000,10000"), [100, 1000, 10000])
        self.assertEqual(parse_int_list(""), [])
        self.assertEqual(parse_int_list(None), [])
        self.assertRaises(ValueError, parse_int_list, "1,x")


class TestUtcFormatter(unittest.TestCase):

    def test_format(self):
        formatter = create_utc_formatter()
        record = logging.LogRecord("lcmsec", logging.INFO, __file__, 1, "hello", None, None)
        record.created = 0
        self.assertEqual(formatter.format(record), "1970-01-01T00:00:00Z: INFO: lcmsec: hello")
