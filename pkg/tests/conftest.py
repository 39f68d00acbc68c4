"""
Shared fixtures: synthetic certificates, records, fixture CT servers and
intel stores. Nothing here touches the network beyond loopback.
"""
import hashlib
from datetime import datetime, timedelta, timezone

import pytest
from cryptography import x509
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec, ed25519, rsa
from cryptography.hazmat.primitives.serialization import Encoding
from cryptography.x509.oid import AuthorityInformationAccessOID, NameOID

from ctphish.certs import CertificateRecord
from ctphish.datasets import assemble
from ctphish.fixture_server import FixtureLogSpec, FixtureServer, FixtureSpec
from ctphish.intel import IntelStore

BASE_TIME = datetime(2020, 5, 1, tzinfo=timezone.utc)

CA_KEY = ed25519.Ed25519PrivateKey.from_private_bytes(bytes(range(32)))
LEAF_KEY = ec.derive_private_key(0x5EED, ec.SECP256R1())

TEST_ISSUER = x509.Name([
    x509.NameAttribute(NameOID.COUNTRY_NAME, "US"),
    x509.NameAttribute(NameOID.ORGANIZATION_NAME, "Test CA"),
    x509.NameAttribute(NameOID.COMMON_NAME, "Test CA R1"),
])
LE_ISSUER = x509.Name([
    x509.NameAttribute(NameOID.COUNTRY_NAME, "US"),
    x509.NameAttribute(NameOID.ORGANIZATION_NAME, "Let's Encrypt"),
    x509.NameAttribute(NameOID.COMMON_NAME, "Let's Encrypt Authority X3"),
])

DV_POLICY = "2.23.140.1.2.1"
CPS_POLICY = "1.3.6.1.4.1.44947.1.1.1"
OV_POLICY = "2.23.140.1.2.2"


def make_der(common_name=None, sans=(), subject=None, issuer=TEST_ISSUER, not_before=BASE_TIME,
             lifetime=timedelta(days=90), key=None, policies=(), ocsp=False, cdp=False,
             serial=1, precert=False, signing_key=None) -> bytes:
    """Build a certificate. Ed25519 signatures keep the DER deterministic."""
    if subject is None:
        subject = [(NameOID.COMMON_NAME, common_name)] if common_name else []
    builder = (
        x509.CertificateBuilder()
        .subject_name(x509.Name([x509.NameAttribute(oid, value) for oid, value in subject]))
        .issuer_name(issuer)
        .public_key((key or LEAF_KEY).public_key())
        .serial_number(serial)
        .not_valid_before(not_before)
        .not_valid_after(not_before + lifetime)
    )
    if sans:
        builder = builder.add_extension(x509.SubjectAlternativeName([x509.DNSName(s) for s in sans]), False)
    if policies:
        builder = builder.add_extension(x509.CertificatePolicies(
            [x509.PolicyInformation(x509.ObjectIdentifier(oid), None) for oid in policies]), False)
    if ocsp:
        builder = builder.add_extension(x509.AuthorityInformationAccess([
            x509.AccessDescription(AuthorityInformationAccessOID.OCSP,
                                   x509.UniformResourceIdentifier("http://ocsp.example.test"))]), False)
    if cdp:
        builder = builder.add_extension(x509.CRLDistributionPoints([
            x509.DistributionPoint([x509.UniformResourceIdentifier("http://crl.example.test/ca.crl")],
                                   None, None, None)]), False)
    if precert:
        builder = builder.add_extension(x509.PrecertPoison(), True)
    signer = signing_key or CA_KEY
    algorithm = None if isinstance(signer, ed25519.Ed25519PrivateKey) else hashes.SHA256()
    return builder.sign(signer, algorithm).public_bytes(Encoding.DER)


def simple_der(name: str, serial: int = 1, issuer=TEST_ISSUER, **options) -> bytes:
    return make_der(common_name=name, sans=(name,), serial=serial, issuer=issuer, **options)


def make_record(name: str, index: int = 0, issuer_dn: str = "CN=Test CA R1,O=Test CA,C=US", sans=None,
                **overrides) -> CertificateRecord:
    """A record without DER behind it; the fingerprint derives from name and index."""
    fields = dict(
        fingerprint=hashlib.sha256(f"{name}/{index}".encode()).digest(),
        common_name=name,
        sans=tuple(sans if sans is not None else (name,)),
        issuer_dn=issuer_dn,
        subject_attrs=frozenset({"CN"}),
        subject_attr_count=1,
        subject_char_count=len(name),
        extension_count=4,
        policy_oids=(DV_POLICY,),
        not_before=BASE_TIME,
        not_after=BASE_TIME + timedelta(days=90),
        key_algorithm="EC",
        key_size_bits=256,
        has_ocsp=True,
        has_cdp=False,
        seen_at=BASE_TIME,
    )
    fields.update(overrides)
    return CertificateRecord(**fields)


# --- the two worked example certificates ------------------------------------

NETFLIX_SANS = (
    "anycast.ftl.netflix.com",
    "*.ftl.netflix.com",
    "api.ftl.netflix.com",
    "ichnaea.netflix.com",
    "a.b.c.nflxvideo.net",
    "x.y.z.nflxvideo.net",
    "www.dev.netflix.com",
)


@pytest.fixture(scope="session")
def benign_example_der():
    """OV certificate for anycast.ftl.netflix.com: 6 subject attributes, 64 characters."""
    subject = [
        (NameOID.COUNTRY_NAME, "US"),
        (NameOID.STATE_OR_PROVINCE_NAME, "California"),
        (NameOID.LOCALITY_NAME, "Los Gatos"),
        (NameOID.ORGANIZATION_NAME, "Netflix Inc."),
        (NameOID.ORGANIZATIONAL_UNIT_NAME, "Security"),
        (NameOID.COMMON_NAME, "anycast.ftl.netflix.com"),
    ]
    return make_der(subject=subject, sans=NETFLIX_SANS, lifetime=timedelta(days=36),
                    policies=(OV_POLICY, CPS_POLICY), ocsp=True, cdp=True,
                    issuer=x509.Name([x509.NameAttribute(NameOID.ORGANIZATION_NAME, "DigiCert Inc"),
                                      x509.NameAttribute(NameOID.COMMON_NAME, "DigiCert ECC CA")]))


@pytest.fixture(scope="session")
def phish_example_der():
    """DV certificate for paypal-secured.ga with an RSA-2048 key."""
    key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    return make_der(common_name="paypal-secured.ga", sans=("paypal-secured.ga", "www.paypal-secured.ga"),
                    issuer=LE_ISSUER, key=key, lifetime=timedelta(days=90) - timedelta(seconds=1),
                    policies=(DV_POLICY, CPS_POLICY), ocsp=True)


# --- fixture CT server ------------------------------------------------------

class FakeClock:
    def __init__(self, now: float = 0.0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


@pytest.fixture
def fake_clock():
    return FakeClock()


@pytest.fixture
def ct_server():
    """Factory starting a fixture CT server; every server is stopped at teardown."""
    servers = []

    def start(logs, clock=None, **options) -> FixtureServer:
        specs = [FixtureLogSpec(name=name, certificates=list(ders), **options) for name, ders in logs.items()]
        server = FixtureServer(FixtureSpec(specs), clock=clock) if clock else FixtureServer(FixtureSpec(specs))
        servers.append(server.start())
        return server

    yield start
    for server in servers:
        server.stop()


@pytest.fixture
def intel_store(tmp_path):
    store = IntelStore(tmp_path / "intel.sqlite")
    yield store
    store.close()


# --- labeled training data ---------------------------------------------------

LE_DN = "CN=Let's Encrypt Authority X3,O=Let's Encrypt,C=US"
DIGICERT_DN = "CN=DigiCert SHA2 Secure Server CA,O=DigiCert Inc,C=US"


def benign_record(i: int) -> CertificateRecord:
    """OV-style certificate of an established site."""
    name = f"shop{i}.example.com"
    return make_record(
        name, i, issuer_dn=DIGICERT_DN, sans=(name, f"www.{name}"),
        subject_attrs=frozenset({"C", "O", "CN"}), subject_attr_count=3, subject_char_count=len(name) + 14,
        not_after=BASE_TIME + timedelta(days=365), key_algorithm="RSA", key_size_bits=2048, has_cdp=True,
        extension_count=9,
    )


def phish_record(i: int) -> CertificateRecord:
    """Let's Encrypt certificate for a brand-keyword domain."""
    return make_record(f"paypal-login{i:03d}.ga", i, issuer_dn=LE_DN)


def labeled_dataset(n: int = 40):
    return assemble([benign_record(i) for i in range(n)], [phish_record(i) for i in range(n)],
                    balance=False, created_at=BASE_TIME)
