import logging
import os
from dataclasses import dataclass, field, fields
from typing import Optional

import yaml
from yaml import YAMLError

from lcmsec.core.const import (
    DEFAULT_CURVE,
    DEFAULT_DISCOVERY_TIMEOUT_MS,
    DEFAULT_INTERFACE,
    DEFAULT_MTU,
    DEFAULT_REPLAY_WINDOW,
    DEFAULT_TIMING,
    DEFAULT_TTL,
    FRAGMENT_HEADER_SIZE,
    MAX_CHANNELNAME_SIZE,
    MAX_DATAGRAM_SIZE,
    SUPPORTED_CURVES,
)
from lcmsec.core.exceptions import ConfigStoreException
from lcmsec.core.util import is_multicast_group

# get module level logger
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimingConfig:
    """Discovery, agreement and receive-path timing in milliseconds"""

    epsilon_max_ms: float = DEFAULT_TIMING["epsilon_max_ms"]
    base_offset_ms: float = DEFAULT_TIMING["base_offset_ms"]
    response_delay_min_ms: float = DEFAULT_TIMING["response_delay_min_ms"]
    response_delay_max_ms: float = DEFAULT_TIMING["response_delay_max_ms"]
    round_deadline_ms: float = DEFAULT_TIMING["round_deadline_ms"]
    clock_skew_ms: float = DEFAULT_TIMING["clock_skew_ms"]
    retransmit_ms: float = DEFAULT_TIMING["retransmit_ms"]
    join_retry_ms: float = DEFAULT_TIMING["join_retry_ms"]
    key_grace_ms: float = DEFAULT_TIMING["key_grace_ms"]
    reassembly_timeout_ms: float = DEFAULT_TIMING["reassembly_timeout_ms"]
    reorder_hold_ms: float = DEFAULT_TIMING["reorder_hold_ms"]

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                raise ConfigStoreException(f"timing value {f.name} must be a non-negative number, got {value!r}")
        if self.response_delay_min_ms > self.response_delay_max_ms:
            raise ConfigStoreException("response_delay_min_ms is larger than response_delay_max_ms")
        for name in ("round_deadline_ms", "retransmit_ms", "join_retry_ms"):
            if getattr(self, name) == 0:
                raise ConfigStoreException(f"timing value {name} must be positive")

    @classmethod
    def from_dict(cls, values: Optional[dict]) -> "TimingConfig":
        values = values or {}
        if not isinstance(values, dict):
            raise ConfigStoreException("timing must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigStoreException(f"unknown timing keys: {', '.join(sorted(unknown))}")
        return cls(**values)


@dataclass(frozen=True)
class SessionConfig:
    """Validated settings of one node in one multicast group"""

    group: str
    channels: tuple[str, ...] = ()
    certificate: Optional[str] = None
    private_key: Optional[str] = None
    root_store: Optional[str] = None
    interface: str = DEFAULT_INTERFACE
    ttl: int = DEFAULT_TTL
    mtu: int = DEFAULT_MTU
    replay_window: int = DEFAULT_REPLAY_WINDOW
    reorder: bool = False
    curve: str = DEFAULT_CURVE
    discovery_timeout_ms: float = DEFAULT_DISCOVERY_TIMEOUT_MS
    timing: TimingConfig = field(default_factory=TimingConfig)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if not is_multicast_group(self.group):
            raise ConfigStoreException(f"group {self.group!r} is not an <ipv4>:<port> multicast group")
        for ch in self.channels:
            if not isinstance(ch, str) or not ch or not ch.isascii() or ":" in ch or "\x00" in ch:
                raise ConfigStoreException(f"invalid channel name {ch!r}")
            if len(ch) >= MAX_CHANNELNAME_SIZE:
                raise ConfigStoreException(f"channel name {ch!r} is too long")
        if len(set(self.channels)) != len(self.channels):
            raise ConfigStoreException("channels contain duplicates")
        if not isinstance(self.replay_window, int) or self.replay_window <= 0 or self.replay_window % 32:
            raise ConfigStoreException(f"replay_window {self.replay_window} is not a positive multiple of 32")
        if not isinstance(self.mtu, int) or not FRAGMENT_HEADER_SIZE + MAX_CHANNELNAME_SIZE < self.mtu <= MAX_DATAGRAM_SIZE:
            raise ConfigStoreException(f"mtu {self.mtu} out of range")
        if not isinstance(self.ttl, int) or not 0 <= self.ttl <= 255:
            raise ConfigStoreException(f"ttl {self.ttl} out of range")
        if self.curve not in SUPPORTED_CURVES:
            raise ConfigStoreException(f"curve {self.curve} is not one of {', '.join(SUPPORTED_CURVES)}")


class ConfigStore:
    """
    Config Store reads the YAML session file of a node and hands out
    validated settings.

    cs = ConfigStore("node.yaml")
    group = cs.get_group()
    cfg = cs.session_config()

    Relative file paths are resolved against the directory of the file.
    """

    def __init__(self, path):
        if not path:
            raise ConfigStoreException("argument path is required")
        try:
            with open(path) as f:
                data = yaml.safe_load(f)
        except OSError as e:
            raise ConfigStoreException(f"cannot read config file {path}") from e
        except YAMLError as e:
            raise ConfigStoreException(f"config file {path} is not valid yaml") from e
        if not isinstance(data, dict):
            raise ConfigStoreException(f"config file {path} must hold a mapping")
        self._path = path
        self._dir = os.path.dirname(os.path.abspath(path))
        self._data = data
        logger.debug(f"loaded config file {path}")

    def _get(self, key, default=None, required=False):
        if key not in self._data or self._data[key] is None:
            if required:
                raise ConfigStoreException(f"required key {key} not found in {self._path}")
            return default
        return self._data[key]

    def _get_path(self, key, required=False):
        value = self._get(key, required=required)
        if value is None:
            return None
        return os.path.join(self._dir, os.path.expanduser(str(value)))

    def get_group(self):
        return str(self._get("group", required=True))

    def get_channels(self):
        channels = self._get("channels", [])
        if isinstance(channels, str):
            channels = [c.strip() for c in channels.split(",") if c.strip()]
        if not isinstance(channels, list):
            raise ConfigStoreException("channels must be a list")
        return channels

    def get_certificate_path(self):
        return self._get_path("certificate", required=True)

    def get_private_key_path(self):
        return self._get_path("private_key", required=True)

    def get_root_store(self):
        return self._get_path("root_store", required=True)

    def get_interface(self):
        return str(self._get("interface", DEFAULT_INTERFACE))

    def get_ttl(self):
        return self._get("ttl", DEFAULT_TTL)

    def get_mtu(self):
        return self._get("mtu", DEFAULT_MTU)

    def get_replay_window(self):
        return self._get("replay_window", DEFAULT_REPLAY_WINDOW)

    def is_reorder_enabled(self):
        value = self._get("reorder", False)
        if not isinstance(value, bool):
            raise ConfigStoreException(f"reorder must be true or false, got {value!r}")
        return value

    def get_curve(self):
        return self._get("curve", DEFAULT_CURVE)

    def get_discovery_timeout_ms(self):
        return self._get("discovery_timeout_ms", DEFAULT_DISCOVERY_TIMEOUT_MS)

    def get_timing(self):
        return TimingConfig.from_dict(self._get("timing", {}))

    def session_config(self) -> SessionConfig:
        """
        Build the immutable session settings.

        Raises:
            ConfigStoreException: a key is missing or invalid
        """
        try:
            return SessionConfig(
                group=self.get_group(),
                channels=tuple(self.get_channels()),
                certificate=self.get_certificate_path(),
                private_key=self.get_private_key_path(),
                root_store=self.get_root_store(),
                interface=self.get_interface(),
                ttl=self.get_ttl(),
                mtu=self.get_mtu(),
                replay_window=self.get_replay_window(),
                reorder=self.is_reorder_enabled(),
                curve=self.get_curve(),
                discovery_timeout_ms=self.get_discovery_timeout_ms(),
                timing=self.get_timing(),
            )
        except TypeError as e:
            raise ConfigStoreException(f"invalid value in {self._path}: {e}") from e
