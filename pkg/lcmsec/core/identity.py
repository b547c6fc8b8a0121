"""
Certificates, SAN-URN permissions and the certificate authority.

Every LCMsec participant holds an X.509 certificate whose Subject Alternative
Name extension lists the domains it may access, one URN per domain:

    urn:lcmsec:<group>:<channel>:<id>

`<group>` is the multicast `<ipv4>:<port>`, `<channel>` is the channelname
(empty for the group-level key agreement scope, `*` for every channel of the
group) and `<id>` is the 16-bit identifier the CA assigned for that domain.

Usage:
    ca = CertificateAuthority.create("lcmsec root", log=IssuanceLog(path))
    key = generate_private_key()
    cert = ca.issue_certificate([LcmDomain(group, "chatter")], key.public_key())
    permission = authorize(cert, LcmDomain(group, "chatter"))
"""

import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Iterable, Optional, Union

from cryptography import x509
from cryptography.exceptions import InvalidSignature, UnsupportedAlgorithm
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import NameOID

from lcmsec.core.const import (
    CA_DEFAULT_VALIDITY_DAYS,
    CA_CERT_FILE,
    CA_KEY_FILE,
    CA_LOG_FILE,
    DEFAULT_CURVE,
    GROUP_SCOPE_CHANNEL,
    MAX_UID,
    URN_AUTO_ID,
    URN_PREFIX,
    URN_WILDCARD_CHANNEL,
)
from lcmsec.core.exceptions import (
    DuplicateId,
    Expired,
    IdentityException,
    InvalidCertificate,
    MalformedUrn,
    NotAuthorized,
)

logger = logging.getLogger(__name__)

EC_CURVES = {
    "secp256r1": ec.SECP256R1,
    "secp384r1": ec.SECP384R1,
}


def get_curve(name: str) -> ec.EllipticCurve:
    try:
        return EC_CURVES[name]()
    except KeyError:
        raise IdentityException(f"unsupported curve {name}")


def generate_private_key(curve: str = DEFAULT_CURVE) -> ec.EllipticCurvePrivateKey:
    return ec.generate_private_key(get_curve(curve))


@dataclass(frozen=True, order=True)
class LcmDomain:
    """A secured topic: multicast group plus channelname"""

    group: str
    channel: str = GROUP_SCOPE_CHANNEL

    @property
    def is_group_scope(self) -> bool:
        return self.channel == GROUP_SCOPE_CHANNEL

    def group_scope(self) -> "LcmDomain":
        return LcmDomain(self.group, GROUP_SCOPE_CHANNEL)

    def __str__(self) -> str:
        return f"{self.group}:{self.channel}"


@dataclass(frozen=True)
class DomainUrn:
    group: str
    channel: str
    id: int

    def __post_init__(self):
        _validate_urn_fields(self.group, self.channel, self.id)

    @property
    def domain(self) -> LcmDomain:
        return LcmDomain(self.group, self.channel)

    def matches(self, domain: LcmDomain) -> bool:
        """Check whether this URN grants access to domain.

        The wildcard channel covers every channel of the group but not the
        group-level scope, which needs its own empty-channel URN.
        """
        if self.group != domain.group:
            return False
        if self.channel == URN_WILDCARD_CHANNEL:
            return not domain.is_group_scope
        return self.channel == domain.channel

    def serialize(self) -> str:
        return f"{URN_PREFIX}{self.group}:{self.channel}:{self.id}"

    def __str__(self) -> str:
        return self.serialize()


@dataclass(frozen=True)
class Permission:
    domain: LcmDomain
    uid: int


def _validate_urn_fields(group: str, channel: str, uid: int):
    if not group or "\x00" in group or not group.isascii():
        raise MalformedUrn(f"invalid group component {group!r}")
    if not channel.isascii() or "\x00" in channel or ":" in channel:
        raise MalformedUrn(f"invalid channel component {channel!r}")
    if not isinstance(uid, int) or not 0 <= uid <= MAX_UID:
        raise MalformedUrn(f"id {uid} does not fit in 16 bits")


def parse_san_urn(s: str) -> DomainUrn:
    """
    Parse a `urn:lcmsec:<group>:<channel>:<id>` string.

    The id and channel are the last two colon separated fields; everything in
    between belongs to the group, so `<ipv4>:<port>` groups keep their colon.

    Raises:
        MalformedUrn: wrong prefix, missing component, id > 65535, non-ASCII channel
    """
    if not isinstance(s, str) or not s.startswith(URN_PREFIX):
        raise MalformedUrn(f"{s!r} is not an lcmsec URN")
    fields = s[len(URN_PREFIX):].rsplit(":", 2)
    if len(fields) != 3:
        raise MalformedUrn(f"{s!r} is missing a component")
    group, channel, uid = fields
    if not uid.isascii() or not uid.isdigit():
        raise MalformedUrn(f"id component of {s!r} is not a decimal integer")
    return DomainUrn(group, channel, int(uid))


def parse_urn_request(s: str) -> Union[DomainUrn, LcmDomain]:
    """Like parse_san_urn, but an `auto` id yields the bare domain for the CA to number"""
    if isinstance(s, str) and s.endswith(":" + URN_AUTO_ID):
        urn = parse_san_urn(s[:-len(URN_AUTO_ID)] + "0")
        return urn.domain
    return parse_san_urn(s)


def certificate_fingerprint(cert: x509.Certificate) -> bytes:
    return cert.fingerprint(hashes.SHA256())


class PeerCertificate:
    """
    A parsed participant certificate.

    Wraps the leaf certificate together with any intermediates that were shipped
    alongside it, and exposes the lcmsec SAN URNs it carries.
    """

    def __init__(self, certificate: x509.Certificate, chain: Iterable[x509.Certificate] = ()):
        self.certificate = certificate
        self.chain = list(chain)
        self.san_urns = self._extract_urns(certificate)
        self.fingerprint = certificate_fingerprint(certificate)

    @staticmethod
    def _extract_urns(certificate: x509.Certificate) -> list[DomainUrn]:
        try:
            san = certificate.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
        except x509.ExtensionNotFound as e:
            raise InvalidCertificate("certificate has no subject alternative name") from e
        uris = san.get_values_for_type(x509.UniformResourceIdentifier)
        if not uris:
            raise InvalidCertificate("certificate carries no SAN URN")
        try:
            return [parse_san_urn(uri) for uri in uris]
        except MalformedUrn as e:
            raise InvalidCertificate(f"certificate carries a malformed SAN URN: {e}") from e

    @classmethod
    def from_der(cls, der: bytes) -> "PeerCertificate":
        try:
            certificate = x509.load_der_x509_certificate(der)
            # names and key decode lazily
            certificate.subject.rfc4514_string(), certificate.issuer.rfc4514_string(), certificate.public_key()
            return cls(certificate)
        except (ValueError, UnsupportedAlgorithm, x509.DuplicateExtension) as e:
            raise InvalidCertificate("cannot decode DER certificate") from e

    @classmethod
    def from_pem(cls, pem: bytes) -> "PeerCertificate":
        """Load a leaf certificate followed by optional intermediates"""
        try:
            certs = x509.load_pem_x509_certificates(pem)
        except ValueError as e:
            raise InvalidCertificate("cannot decode PEM certificate") from e
        return cls(certs[0], certs[1:])

    @property
    def public_key(self) -> ec.EllipticCurvePublicKey:
        return self.certificate.public_key()

    @property
    def not_valid_before(self) -> datetime:
        return self.certificate.not_valid_before_utc

    @property
    def not_valid_after(self) -> datetime:
        return self.certificate.not_valid_after_utc

    def is_valid_at(self, now: datetime) -> bool:
        return self.not_valid_before <= now <= self.not_valid_after

    def to_der(self) -> bytes:
        return self.certificate.public_bytes(serialization.Encoding.DER)

    def to_pem(self) -> bytes:
        return b"".join(c.public_bytes(serialization.Encoding.PEM) for c in [self.certificate] + self.chain)

    def __eq__(self, other) -> bool:
        return isinstance(other, PeerCertificate) and self.fingerprint == other.fingerprint

    def __hash__(self) -> int:
        return hash(self.fingerprint)

    def __repr__(self) -> str:
        urns = ",".join(str(u) for u in self.san_urns)
        return f"PeerCertificate({urns})"


@dataclass
class ChainVerification:
    """Result of verify_chain; truthy when the chain verified"""

    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


def verify_chain(cert: PeerCertificate, roots: Iterable[x509.Certificate], now: Optional[datetime] = None) -> ChainVerification:
    """
    Check that cert chains to one of roots and that every link is valid at now.

    Args:
        cert: peer certificate with its shipped intermediates
        roots: trusted root certificates
        now: verification time, defaults to the current UTC time

    Returns:
        ChainVerification carrying the diagnostic reason on failure
    """
    now = now or _utcnow()
    roots = list(roots)
    pool = list(cert.chain)
    current = cert.certificate
    for _ in range(len(pool) + 1):
        if not current.not_valid_before_utc <= now <= current.not_valid_after_utc:
            return ChainVerification(False, f"certificate {current.subject.rfc4514_string()} not valid at {now.isoformat()}")
        for root in roots:
            if root.subject == current.issuer and _issued_by(current, root):
                if not root.not_valid_before_utc <= now <= root.not_valid_after_utc:
                    return ChainVerification(False, f"root {root.subject.rfc4514_string()} not valid at {now.isoformat()}")
                return ChainVerification(True)
        issuer = next((c for c in pool if c.subject == current.issuer and _issued_by(current, c)), None)
        if issuer is None:
            return ChainVerification(False, f"no trusted issuer for {current.subject.rfc4514_string()}")
        pool.remove(issuer)
        current = issuer
    return ChainVerification(False, "chain does not terminate at a root")


def _issued_by(cert: x509.Certificate, issuer: x509.Certificate) -> bool:
    try:
        cert.verify_directly_issued_by(issuer)
        return True
    except (ValueError, TypeError, InvalidSignature, UnsupportedAlgorithm):
        return False


def authorize(cert: PeerCertificate, domain: LcmDomain, now: Optional[datetime] = None) -> Permission:
    """
    Find the permission cert grants for domain.

    An exact channel match wins over a wildcard URN.

    Raises:
        Expired: now outside the certificate validity window
        NotAuthorized: no SAN URN matches the domain
    """
    now = now or _utcnow()
    if not cert.is_valid_at(now):
        raise Expired(f"{cert!r} not valid at {now.isoformat()}")
    matches = [u for u in cert.san_urns if u.matches(domain)]
    if not matches:
        raise NotAuthorized(f"{cert!r} has no permission for {domain}")
    exact = [u for u in matches if u.channel == domain.channel]
    return Permission(domain, (exact or matches)[0].id)


class TrustStore:
    """Trusted roots plus a cache of certificates that already passed verify_chain"""

    def __init__(self, roots: Iterable[x509.Certificate]):
        self.roots = list(roots)
        self._verified: dict[bytes, PeerCertificate] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, root_store: str) -> "TrustStore":
        """Load every PEM file of a root store directory"""
        roots = []
        try:
            for name in sorted(os.listdir(root_store)):
                path = os.path.join(root_store, name)
                if os.path.isfile(path):
                    with open(path, "rb") as f:
                        roots.extend(x509.load_pem_x509_certificates(f.read()))
        except (OSError, ValueError) as e:
            raise IdentityException(f"cannot load root store {root_store}") from e
        if not roots:
            raise IdentityException(f"root store {root_store} holds no certificates")
        return cls(roots)

    def verify(self, cert: PeerCertificate, now: Optional[datetime] = None) -> ChainVerification:
        with self._lock:
            if cert.fingerprint in self._verified:
                if cert.is_valid_at(now or _utcnow()):
                    return ChainVerification(True)
        result = verify_chain(cert, self.roots, now)
        if result:
            with self._lock:
                self._verified[cert.fingerprint] = cert
        return result


class IssuanceLog:
    """
    Append-only record of ids the CA handed out, one `domain id` line each.

    An in-memory log is used when path is None.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._entries: dict[LcmDomain, set[int]] = {}
        self._lock = threading.Lock()
        if path and os.path.exists(path):
            self._replay(path)

    def _replay(self, path: str):
        with open(path, "r", encoding="ascii") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                domain, sep, uid = line.rpartition(" ")
                group, sep2, channel = domain.rpartition(":")
                if not sep or not sep2 or not uid.isdigit():
                    raise IdentityException(f"{path}:{lineno}: malformed issuance log line")
                self._entries.setdefault(LcmDomain(group, channel), set()).add(int(uid))

    def contains(self, domain: LcmDomain, uid: int) -> bool:
        with self._lock:
            return uid in self._entries.get(domain, set())

    def reserve(self, domain: LcmDomain, uid: Optional[int] = None) -> int:
        """
        Record an id for domain, auto-assigning the next free one when uid is None.

        Raises:
            DuplicateId: uid already issued for domain
            MalformedUrn: auto-assignment ran past 16 bits
        """
        with self._lock:
            issued = self._entries.setdefault(domain, set())
            if uid is None:
                uid = max(issued, default=0) + 1
                if uid > MAX_UID:
                    raise MalformedUrn(f"no free id left for {domain}")
            elif uid in issued:
                raise DuplicateId(f"id {uid} already issued for {domain}")
            issued.add(uid)
            if self.path:
                with open(self.path, "a", encoding="ascii") as f:
                    f.write(f"{domain} {uid}\n")
            return uid


class CertificateAuthority:
    """Root key plus issuance log; issues participant certificates"""

    def __init__(self, key: ec.EllipticCurvePrivateKey, certificate: x509.Certificate, log: Optional[IssuanceLog] = None):
        self.key = key
        self.certificate = certificate
        self.log = log or IssuanceLog()

    @classmethod
    def create(cls, common_name: str = "lcmsec root", curve: str = DEFAULT_CURVE,
               validity_days: int = CA_DEFAULT_VALIDITY_DAYS * 10, log: Optional[IssuanceLog] = None) -> "CertificateAuthority":
        key = generate_private_key(curve)
        name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
        now = _utcnow()
        certificate = (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - timedelta(minutes=5))
            .not_valid_after(now + timedelta(days=validity_days))
            .add_extension(x509.BasicConstraints(ca=True, path_length=None), critical=True)
            .add_extension(x509.KeyUsage(
                digital_signature=True, content_commitment=False, key_encipherment=False,
                data_encipherment=False, key_agreement=False, key_cert_sign=True, crl_sign=True,
                encipher_only=False, decipher_only=False), critical=True)
            .sign(key, hashes.SHA256())
        )
        logger.info(f"created CA {common_name}")
        return cls(key, certificate, log)

    @classmethod
    def load(cls, directory: str) -> "CertificateAuthority":
        try:
            with open(os.path.join(directory, CA_KEY_FILE), "rb") as f:
                key = serialization.load_pem_private_key(f.read(), password=None)
            with open(os.path.join(directory, CA_CERT_FILE), "rb") as f:
                certificate = x509.load_pem_x509_certificate(f.read())
        except (OSError, ValueError) as e:
            raise IdentityException(f"cannot load CA from {directory}") from e
        return cls(key, certificate, IssuanceLog(os.path.join(directory, CA_LOG_FILE)))

    def save(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        write_private_key(os.path.join(directory, CA_KEY_FILE), self.key)
        with open(os.path.join(directory, CA_CERT_FILE), "wb") as f:
            f.write(self.certificate.public_bytes(serialization.Encoding.PEM))
        if self.log.path is None:
            self.log.path = os.path.join(directory, CA_LOG_FILE)

    def issue_certificate(self, requests: Iterable[Union[DomainUrn, LcmDomain]], subject_key: ec.EllipticCurvePublicKey,
                          not_before: Optional[datetime] = None, not_after: Optional[datetime] = None,
                          common_name: str = "lcmsec participant") -> PeerCertificate:
        """
        Issue a certificate carrying one SAN URN per request.

        A DomainUrn request keeps its explicit id; an LcmDomain request gets the
        next id of that domain from the issuance log.

        Raises:
            DuplicateId: an explicit id was already issued for its domain
        """
        requests = list(requests)
        if not requests:
            raise IdentityException("at least one URN is required")
        urns = []
        for request in requests:
            if isinstance(request, DomainUrn):
                uid = self.log.reserve(request.domain, request.id)
                urns.append(request)
            else:
                uid = self.log.reserve(request)
                urns.append(DomainUrn(request.group, request.channel, uid))
        not_before = not_before or _utcnow() - timedelta(minutes=5)
        not_after = not_after or not_before + timedelta(days=CA_DEFAULT_VALIDITY_DAYS)
        certificate = (
            x509.CertificateBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)]))
            .issuer_name(self.certificate.subject)
            .public_key(subject_key)
            .serial_number(x509.random_serial_number())
            .not_valid_before(not_before)
            .not_valid_after(not_after)
            .add_extension(x509.SubjectAlternativeName([x509.UniformResourceIdentifier(u.serialize()) for u in urns]), critical=False)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .sign(self.key, hashes.SHA256())
        )
        logger.info(f"issued certificate for {', '.join(str(u) for u in urns)}")
        return PeerCertificate(certificate)


@dataclass
class LocalIdentity:
    """This node's certificate, signing key and trusted roots"""

    certificate: PeerCertificate
    private_key: ec.EllipticCurvePrivateKey
    trust: TrustStore
    permissions: dict[LcmDomain, Permission] = field(default_factory=dict)

    @classmethod
    def load(cls, certificate_path: str, key_path: str, root_store: str) -> "LocalIdentity":
        try:
            with open(certificate_path, "rb") as f:
                certificate = PeerCertificate.from_pem(f.read())
            with open(key_path, "rb") as f:
                private_key = serialization.load_pem_private_key(f.read(), password=None)
        except OSError as e:
            raise IdentityException(f"cannot read identity files: {e}") from e
        except ValueError as e:
            raise IdentityException(f"cannot decode private key {key_path}") from e
        return cls(certificate, private_key, TrustStore.load(root_store))

    @property
    def fingerprint(self) -> bytes:
        return self.certificate.fingerprint

    def permission(self, domain: LcmDomain) -> Permission:
        """Cached authorize() of the own certificate"""
        if domain not in self.permissions:
            self.permissions[domain] = authorize(self.certificate, domain)
        return self.permissions[domain]

    def sign(self, data: bytes) -> bytes:
        from lcmsec.core.crypto_suite import sign
        return sign(data, self.private_key)


def write_private_key(path: str, key: ec.EllipticCurvePrivateKey):
    data = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    with open(path, "wb") as f:
        f.write(data)
    os.chmod(path, 0o600)


def write_certificate(path: str, cert: PeerCertificate):
    with open(path, "wb") as f:
        f.write(cert.to_pem())
