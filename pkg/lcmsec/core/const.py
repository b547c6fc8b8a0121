CONTEXT_SETTINGS = dict(help_option_names=["-h", "--help"])

# Logging format constants - shared across all handlers for consistency
LOG_FORMAT = "%(asctime)s: %(levelname)s: %(name)s: %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%dT%H:%M:%SZ"

# environment variables
ENV_VAR_IV_REUSE_CHECK = "LCMSEC_IV_REUSE_CHECK"
ENV_VAR_SLOW_TESTS = "LCMSEC_SLOW_TESTS"
ENV_VAR_UPDATE_GOLDEN = "LCMSEC_UPDATE_GOLDEN"

# wire magics
MAGIC_PLAIN_LCM = 0x4C433032
MAGIC_SECURE = 0x4C433353
MAGIC_FRAGMENT = 0x4C433346
MAGIC_MANAGEMENT = 0x4C43334D

# packet geometry
SECURE_HEADER_SIZE = 10  # magic, seqno, sender id
FRAGMENT_HEADER_SIZE = 22
PLAIN_HEADER_SIZE = 8
AEAD_TAG_SIZE = 16
AEAD_KEY_SIZE = 16
SALT_SIZE = 2
IV_SIZE = 12
MAX_CHANNELNAME_SIZE = 256  # including the NUL terminator
MAX_DATAGRAM_SIZE = 65507
MAX_FRAGMENTS = 0xFFFF
MAX_BODY_SIZE = 0xFFFFFFFF
SIGNER_FINGERPRINT_SIZE = 32

# reassembly
REASSEMBLY_MAX_PER_SENDER = 16
REASSEMBLY_TIMEOUT_MS = 5000

# counters and identifiers
MAX_SEQNO = 0xFFFFFFFF
MAX_UID = 0xFFFF
MAX_SENDER_ID = 0xFFFF
MAX_INSTANCE_ID = 0xFFFFFFFFFFFFFFFF
T_INFINITY = 0xFFFFFFFFFFFFFFFF  # discovery timestamp when no agreement is pending

# SAN URN grammar
URN_PREFIX = "urn:lcmsec:"
URN_WILDCARD_CHANNEL = "*"
URN_AUTO_ID = "auto"
GROUP_SCOPE_CHANNEL = ""

# key agreement
DEFAULT_CURVE = "secp256r1"
SUPPORTED_CURVES = ["secp256r1", "secp384r1"]
JOIN_REPRESENTATIVE_LABEL = b"join-representative"
KDF_SALT = b"lcmsec-kdf-v1"
IV_REUSE_LOG_SIZE = 1 << 20

# session defaults
DEFAULT_REPLAY_WINDOW = 1024
DEFAULT_MTU = 1400
DEFAULT_TTL = 1
DEFAULT_INTERFACE = "0.0.0.0"
DEFAULT_DISCOVERY_TIMEOUT_MS = 10000

# discovery and agreement timing, all in milliseconds
DEFAULT_TIMING = {
    "epsilon_max_ms": 50,
    "base_offset_ms": 500,
    "response_delay_min_ms": 10,
    "response_delay_max_ms": 100,
    "round_deadline_ms": 2000,
    "clock_skew_ms": 100,
    "retransmit_ms": 250,
    "join_retry_ms": 200,
    "key_grace_ms": 10000,
    "reassembly_timeout_ms": REASSEMBLY_TIMEOUT_MS,
    "reorder_hold_ms": 50,
}
GKA_LINGER_RETRANSMITS = 3

# drop reasons reported by session statistics
DROP_BAD_MAGIC = "bad_magic"
DROP_TRUNCATED = "truncated"
DROP_NO_GROUP_KEY = "no_group_key"
DROP_NO_TERMINATOR = "no_terminator"
DROP_UNSUBSCRIBED = "unsubscribed"
DROP_UNKNOWN_CHANNEL_KEY = "unknown_channel_key"
DROP_AUTH_FAILURE = "auth_failure"
DROP_REPLAYED = "replayed"
DROP_FRAGMENT = "inconsistent_fragment"
DROP_REORDER_LATE = "reorder_late"
DROP_MANAGEMENT = "management_malformed"
DROP_UNKNOWN_SCOPE = "unknown_scope"

# bench defaults
BENCH_SIZES = [100, 1000, 10000, 100000]
BENCH_COUNT = 1000
BENCH_PING_CHANNEL = "LCMSEC_BENCH_PING"
BENCH_PONG_CHANNEL = "LCMSEC_BENCH_PONG"
BENCH_TIMEOUT_MS = 1000
BENCH_DISCOVERY_NODES = [2, 4, 8, 16, 32]
BENCH_DISCOVERY_CHANNEL = "chatter"
BENCH_GROUP = "239.255.76.67:7667"
BENCH_DISCOVERY_TIME_BOUND_MS = 30000

# CA tool
CA_KEY_FILE = "ca.key"
CA_CERT_FILE = "ca.crt"
CA_LOG_FILE = "issuance.log"
CA_DEFAULT_VALIDITY_DAYS = 365
