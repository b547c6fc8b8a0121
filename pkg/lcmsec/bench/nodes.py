"""
In-memory participants for simulated runs: a throwaway CA, one identity per
node and sessions wired to a SimNet.
"""

import logging
from typing import Iterable, Optional

from lcmsec.core.configstore import SessionConfig, TimingConfig
from lcmsec.core.const import DEFAULT_CURVE
from lcmsec.core.identity import (
    CertificateAuthority,
    LcmDomain,
    LocalIdentity,
    TrustStore,
    generate_private_key,
)
from lcmsec.core.session import Session
from lcmsec.core.transport import SimNet

logger = logging.getLogger(__name__)


def issue_identities(count: int, group: str, channels: Iterable[str], curve: str = DEFAULT_CURVE,
                     ca: Optional[CertificateAuthority] = None) -> tuple[CertificateAuthority, list[LocalIdentity]]:
    """Issue count identities entitled to the group and every channel, ids auto-assigned from 1"""
    ca = ca or CertificateAuthority.create("lcmsec bench root", curve)
    trust = TrustStore([ca.certificate])
    domains = [LcmDomain(group)] + [LcmDomain(group, ch) for ch in channels]
    identities = []
    for _ in range(count):
        key = generate_private_key(curve)
        certificate = ca.issue_certificate(domains, key.public_key())
        identities.append(LocalIdentity(certificate, key, trust))
    return ca, identities


def sim_sessions(net: SimNet, identities: Iterable[LocalIdentity], group: str, channels: Iterable[str],
                 timing: Optional[TimingConfig] = None, reorder: bool = False,
                 curve: str = DEFAULT_CURVE) -> list[Session]:
    config = SessionConfig(group=group, channels=tuple(channels), timing=timing or TimingConfig(),
                           reorder=reorder, curve=curve)
    sessions = []
    for identity in identities:
        endpoint = net.add_node()
        sessions.append(Session(config, identity, endpoint, rng=net.node_rng(endpoint.node_id)))
    return sessions


def keys_agree(sessions: list[Session]) -> bool:
    """Every session is ready and all hold byte-identical newest group and channel keys"""
    if not sessions or not all(s.is_ready() for s in sessions):
        return False
    first = sessions[0]
    scopes = [first.group_scope] + [first.channel_scope(ch) for ch in first.config.channels]
    for scope in scopes:
        keys = {s.keys.newest(scope).key for s in sessions}
        if len(keys) != 1:
            return False
    return True


def run_until_converged(net: SimNet, sessions: list[Session], bound_ms: float, step_ms: float = 10.0) -> Optional[float]:
    """
    Advance the simulation until keys_agree holds or bound_ms of virtual time passed.

    Returns:
        virtual time of convergence, or None
    """
    while net.now < bound_ms:
        if keys_agree(sessions):
            return net.now
        net.run_until(min(net.now + step_ms, bound_ms))
    return net.now if keys_agree(sessions) else None
