class ConfigStoreException(Exception):
    """Exception class to raise error in ConfigStore"""


class IdentityException(Exception):
    """Exception class to raise error in certificate and permission handling"""


class MalformedUrn(IdentityException):
    """Exception class to raise when a SAN URN does not follow the lcmsec grammar"""


class InvalidCertificate(IdentityException):
    """Exception class to raise when a certificate cannot be used as a peer certificate"""


class NotAuthorized(IdentityException):
    """Exception class to raise when a certificate carries no SAN for the requested domain"""


class Expired(IdentityException):
    """Exception class to raise when a certificate is outside its validity window"""


class DuplicateId(IdentityException):
    """Exception class to raise when the CA log already holds an id for a domain"""


class CryptoSuiteException(Exception):
    """Exception class to raise error in crypto suite primitives"""


class AuthFailure(CryptoSuiteException):
    """Exception class to raise when an AEAD tag does not verify"""


class TooShort(CryptoSuiteException):
    """Exception class to raise when AEAD input is shorter than the tag"""


class IvReuse(CryptoSuiteException):
    """Exception class to raise when the IV log sees a repeated IV for one key"""


class InvalidElement(CryptoSuiteException):
    """Exception class to raise on malformed or off-curve group elements"""


class InvalidScalar(CryptoSuiteException):
    """Exception class to raise on scalars outside [1, q-1]"""


class WireCodecException(Exception):
    """Exception class to raise error in the wire codec"""


class BadMagic(WireCodecException):
    """Exception class to raise when a datagram starts with an unexpected magic"""


class Truncated(WireCodecException):
    """Exception class to raise when a datagram is shorter than its layout requires"""


class BadName(WireCodecException):
    """Exception class to raise on channelnames that are not ASCII, contain NUL or are too long"""


class OversizeMessage(WireCodecException):
    """Exception class to raise when a message cannot be described by the fragment header"""


class InconsistentFragment(WireCodecException):
    """Exception class to raise when fragments of one message disagree"""


class NonCanonical(WireCodecException):
    """Exception class to raise when a management message is not in canonical form"""


class GkaException(Exception):
    """Exception class to raise error in the group key agreement"""


class StaleInstance(GkaException):
    """Exception class to raise when an instance id is not above the ledger value"""


class BadSignature(GkaException):
    """Exception class to raise when a management signature does not verify"""


class UnknownSender(GkaException):
    """Exception class to raise when a round message comes from outside the ring"""


class WrongInstance(GkaException):
    """Exception class to raise when a round message carries another instance id"""


class ConsistencyFailure(GkaException):
    """Exception class to raise when recovered right keys do not close the ring"""


class GkaTimeout(GkaException):
    """Exception class to raise when a round does not complete within its deadline"""


class DiscoveryException(Exception):
    """Exception class to raise error in group discovery"""


class InvalidPhase(DiscoveryException):
    """Exception class to raise when an operation is not allowed in the current phase"""


class TooFew(DiscoveryException):
    """Exception class to raise when fewer than two members reached the deadline"""


class SenderIdExhausted(DiscoveryException):
    """Exception class to raise when a ring has more members than 16-bit sender ids"""


class SessionException(Exception):
    """Exception class to raise error in Session"""


class NoKey(SessionException):
    """Exception class to raise when no key material is established for a scope"""


class CounterExhausted(SessionException):
    """Exception class to raise when the send counter would wrap"""


class NoTerminator(SessionException):
    """Exception class to raise when no NUL emerges within the channelname bound"""


class Replayed(SessionException):
    """Exception class to raise when the replay window rejects a sequence number"""


class UnknownChannelKey(SessionException):
    """Exception class to raise when no channel key matches a received message"""


class RekeyFailed(SessionException):
    """Exception class to raise when a rekey cannot be started"""


class TransportException(Exception):
    """Exception class to raise error in transport endpoints"""


class Oversize(TransportException):
    """Exception class to raise when a datagram exceeds the UDP payload limit"""


class SocketError(TransportException):
    """Exception class to raise when a multicast socket cannot be set up or used"""


class BenchException(Exception):
    """Exception class to raise error in benchmarks"""
