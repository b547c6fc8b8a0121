import logging
import os

import click

from lcmsec.core.const import CA_CERT_FILE, CA_DEFAULT_VALIDITY_DAYS, CA_KEY_FILE, DEFAULT_CURVE, SUPPORTED_CURVES
from lcmsec.core.exceptions import IdentityException
from lcmsec.core.identity import (
    CertificateAuthority,
    generate_private_key,
    parse_urn_request,
    write_certificate,
    write_private_key,
)

logger = logging.getLogger(__name__)


@click.group()
def ca():
    """
    Certificate authority for lcmsec participants
    """


@ca.command("init")
@click.option("-d", "--dir", "directory", required=True, type=click.Path(file_okay=False), help="CA directory")
@click.option("--cn", default="lcmsec root", show_default=True, help="common name of the root certificate")
@click.option("--curve", type=click.Choice(SUPPORTED_CURVES), default=DEFAULT_CURVE, show_default=True)
@click.option("--days", type=click.IntRange(min=1), default=CA_DEFAULT_VALIDITY_DAYS * 10, show_default=True,
              help="validity of the root certificate")
def init(directory, cn, curve, days):
    """
    Create a root key and self-signed root certificate
    """
    if os.path.exists(os.path.join(directory, CA_KEY_FILE)):
        raise click.ClickException(f"{directory} already holds a CA")
    try:
        authority = CertificateAuthority.create(cn, curve, days)
        authority.save(directory)
    except (IdentityException, OSError) as e:
        logger.error(f"CA initialization failed: {e}")
        raise click.ClickException(str(e)) from e
    click.echo(os.path.join(directory, CA_CERT_FILE))


@ca.command("issue")
@click.option("-d", "--dir", "directory", required=True, type=click.Path(exists=True, file_okay=False),
              help="CA directory created by `ca init`")
@click.option("-u", "--urn", "urns", required=True, multiple=True,
              help="urn:lcmsec:<group>:<channel>:<id|auto>, repeat for several SANs")
@click.option("-o", "--out", required=True, help="output prefix, writes <out>.crt and <out>.key")
@click.option("--cn", default="lcmsec participant", show_default=True, help="common name of the certificate")
@click.option("--curve", type=click.Choice(SUPPORTED_CURVES), default=DEFAULT_CURVE, show_default=True)
def issue(directory, urns, out, cn, curve):
    """
    Issue a participant key and certificate carrying one SAN per URN
    """
    try:
        requests = [parse_urn_request(u) for u in urns]
        authority = CertificateAuthority.load(directory)
        key = generate_private_key(curve)
        certificate = authority.issue_certificate(requests, key.public_key(), common_name=cn)
        write_private_key(f"{out}.key", key)
        write_certificate(f"{out}.crt", certificate)
    except (IdentityException, OSError) as e:
        logger.error(f"certificate issuance failed: {e}")
        raise click.ClickException(str(e)) from e
    for urn in certificate.san_urns:
        click.echo(urn.serialize())
