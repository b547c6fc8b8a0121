import ipaddress
import logging
import struct
import time
from typing import Optional

from lcmsec.core.const import LOG_DATE_FORMAT, LOG_FORMAT

logger = logging.getLogger(__name__)


def init_logging(log_level=logging.INFO):
    """
    Configure root logging for CLI commands.

    Logs go to stderr with UTC timestamps so stdout stays free for CSV output.

    Args:
        log_level: Logging level for the root logger
    """
    logging.Formatter.converter = time.gmtime
    logging.basicConfig(
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
        level=log_level,
    )
    # asyncio is chatty at debug level
    logging.getLogger("asyncio").setLevel(logging.WARNING)


def create_utc_formatter(fmt=None, datefmt=None) -> logging.Formatter:
    """
    Create a logging formatter that uses UTC time.

    Use this when creating custom handlers (StreamHandler, custom handlers, etc.)
    to ensure consistent UTC timestamps across all log outputs.

    Args:
        fmt: Format string (defaults to LOG_FORMAT from const.py)
        datefmt: Date format string (defaults to LOG_DATE_FORMAT from const.py)

    Returns:
        logging.Formatter with UTC time conversion
    """
    if fmt is None:
        fmt = LOG_FORMAT
    if datefmt is None:
        datefmt = LOG_DATE_FORMAT

    formatter = logging.Formatter(fmt, datefmt)
    formatter.converter = time.gmtime
    return formatter


def split_group(group: str) -> tuple[str, int]:
    """
    Split a `<ipv4>:<port>` group string.

    Args:
        group: multicast group in address:port form

    Returns:
        tuple of (address, port)

    Raises:
        ValueError: if the port is missing or out of range
    """
    address, sep, port = group.rpartition(":")
    if not sep or not address or not port.isdigit():
        raise ValueError(f"group {group!r} is not in <ipv4>:<port> form")
    port_no = int(port)
    if not 0 < port_no < 65536:
        raise ValueError(f"port {port_no} out of range")
    return address, port_no


def is_multicast_group(group: str) -> bool:
    """Check that a `<ipv4>:<port>` string names an IPv4 multicast group"""
    try:
        address, _ = split_group(group)
        return ipaddress.IPv4Address(address).is_multicast
    except ValueError:
        return False


def pack_bytes(data: bytes) -> bytes:
    """Prefix data with its 32-bit big-endian length"""
    return struct.pack(">I", len(data)) + data


def unpack_bytes(buf: bytes, offset: int) -> tuple[bytes, int]:
    """
    Read one length-prefixed field.

    Returns:
        tuple of (field bytes, offset after the field)

    Raises:
        ValueError: if the buffer ends before the field does
    """
    if offset + 4 > len(buf):
        raise ValueError("length prefix runs past end of buffer")
    (length,) = struct.unpack_from(">I", buf, offset)
    offset += 4
    if offset + length > len(buf):
        raise ValueError("field runs past end of buffer")
    return buf[offset:offset + length], offset + length


def parse_int_list(value: Optional[str]) -> list[int]:
    """Parse a comma separated list of integers, e.g. "100,1000,10000" """
    if not value:
        return []
    return [int(v.strip()) for v in value.split(",") if v.strip()]
