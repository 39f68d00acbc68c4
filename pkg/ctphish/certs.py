"""
Certificate parsing: DER bytes to normalized CertificateRecord, JSONL persistence
and dedup keys.
"""
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple

from cryptography import x509
from cryptography.exceptions import UnsupportedAlgorithm
from cryptography.hazmat.primitives.asymmetric import dsa, ec, rsa
from cryptography.x509.oid import AuthorityInformationAccessOID, ExtensionOID, NameOID

from .domains import DomainName, decompose_domain, normalize_name
from .errors import MalformedDer

# CN values longer than 64 chars are common in CT logs
warnings.filterwarnings(
    "ignore",
    message=r"Attribute's length must be >= 1 and <= 64, but it was.*",
    category=UserWarning,
)

logger = logging.getLogger(__name__)

SUBJECT_KINDS = {
    NameOID.COUNTRY_NAME: "C",
    NameOID.STATE_OR_PROVINCE_NAME: "ST",
    NameOID.LOCALITY_NAME: "L",
    NameOID.ORGANIZATION_NAME: "O",
    NameOID.ORGANIZATIONAL_UNIT_NAME: "OU",
    NameOID.COMMON_NAME: "CN",
}

KEY_ALGORITHMS = ("RSA", "EC", "DSA", "other")


def _utc(value: datetime) -> datetime:
    if value.tzinfo is None:
        return value.replace(tzinfo=timezone.utc)
    return value.astimezone(timezone.utc)


def _rfc3339(value: datetime) -> str:
    return _utc(value).isoformat()


def _parse_time(value: str) -> datetime:
    return _utc(datetime.fromisoformat(value.replace("Z", "+00:00")))


def _dedupe(names: Iterable[str]) -> Tuple[str, ...]:
    seen = {}
    for name in names:
        norm = normalize_name(name)
        if norm and norm not in seen:
            seen[norm] = None
    return tuple(seen)


@dataclass(frozen=True)
class CertificateRecord:
    fingerprint: bytes
    common_name: Optional[str]
    sans: Tuple[str, ...]
    issuer_dn: str
    subject_attrs: FrozenSet[str]
    subject_attr_count: int
    subject_char_count: int
    extension_count: int
    policy_oids: Tuple[str, ...]
    not_before: datetime
    not_after: datetime
    key_algorithm: str
    key_size_bits: int
    has_ocsp: bool
    has_cdp: bool
    ct_log_index: Optional[Tuple[str, int]] = None
    seen_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    is_precert: bool = False

    def __post_init__(self):
        if len(self.fingerprint) != 32:
            raise ValueError("fingerprint must be 32 bytes")
        if self.not_before > self.not_after:
            raise ValueError("not_before is after not_after")
        if self.key_algorithm not in KEY_ALGORITHMS:
            raise ValueError(f"unknown key algorithm {self.key_algorithm!r}")
        object.__setattr__(self, "sans", _dedupe(self.sans))
        if self.common_name is not None:
            object.__setattr__(self, "common_name", normalize_name(self.common_name))

    @property
    def fingerprint_hex(self) -> str:
        return self.fingerprint.hex()

    @property
    def valid_period_days(self) -> int:
        # LE-style lifetimes (90 days minus one second) count as 90
        seconds = (self.not_after - self.not_before).total_seconds()
        return int(seconds / 86400 + 0.5)

    @property
    def domain_names(self) -> Tuple[str, ...]:
        """CN followed by the SANs, deduplicated."""
        names = ([self.common_name] if self.common_name else []) + list(self.sans)
        return _dedupe(names)

    @property
    def domains(self) -> List[DomainName]:
        return [decompose_domain(name) for name in self.domain_names]

    def to_dict(self) -> Dict:
        return {
            "fingerprint": self.fingerprint.hex(),
            "common_name": self.common_name,
            "sans": list(self.sans),
            "issuer_dn": self.issuer_dn,
            "subject_attrs": sorted(self.subject_attrs),
            "subject_attr_count": self.subject_attr_count,
            "subject_char_count": self.subject_char_count,
            "extension_count": self.extension_count,
            "policy_oids": list(self.policy_oids),
            "not_before": _rfc3339(self.not_before),
            "not_after": _rfc3339(self.not_after),
            "key_algorithm": self.key_algorithm,
            "key_size_bits": self.key_size_bits,
            "has_ocsp": self.has_ocsp,
            "has_cdp": self.has_cdp,
            "ct_log_index": list(self.ct_log_index) if self.ct_log_index else None,
            "seen_at": _rfc3339(self.seen_at),
            "is_precert": self.is_precert,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CertificateRecord":
        log_index = data.get("ct_log_index")
        return cls(
            fingerprint=bytes.fromhex(data["fingerprint"]),
            common_name=data.get("common_name"),
            sans=tuple(data.get("sans", ())),
            issuer_dn=data["issuer_dn"],
            subject_attrs=frozenset(data.get("subject_attrs", ())),
            subject_attr_count=int(data["subject_attr_count"]),
            subject_char_count=int(data["subject_char_count"]),
            extension_count=int(data["extension_count"]),
            policy_oids=tuple(data.get("policy_oids", ())),
            not_before=_parse_time(data["not_before"]),
            not_after=_parse_time(data["not_after"]),
            key_algorithm=data["key_algorithm"],
            key_size_bits=int(data["key_size_bits"]),
            has_ocsp=bool(data["has_ocsp"]),
            has_cdp=bool(data["has_cdp"]),
            ct_log_index=(str(log_index[0]), int(log_index[1])) if log_index else None,
            seen_at=_parse_time(data["seen_at"]),
            is_precert=bool(data.get("is_precert", False)),
        )


def dedup_key(record: CertificateRecord) -> bytes:
    """Byte-identical DER maps to an identical key."""
    return record.fingerprint


def fingerprint_der(der: bytes) -> bytes:
    return hashlib.sha256(der).digest()


def _key_info(cert: x509.Certificate) -> Tuple[str, int]:
    try:
        key = cert.public_key()
    except (UnsupportedAlgorithm, ValueError):
        return "other", 0
    if isinstance(key, rsa.RSAPublicKey):
        return "RSA", key.key_size
    if isinstance(key, ec.EllipticCurvePublicKey):
        return "EC", key.curve.key_size
    if isinstance(key, dsa.DSAPublicKey):
        return "DSA", key.key_size
    return "other", 0


def _extension(cert: x509.Certificate, oid):
    try:
        return cert.extensions.get_extension_for_oid(oid).value
    except x509.ExtensionNotFound:
        return None


def parse_der(der: bytes, seen_at: Optional[datetime] = None,
              ct_log_index: Optional[Tuple[str, int]] = None) -> CertificateRecord:
    """
    Parse one DER certificate (final or precertificate) into a record.

    Raises MalformedDer when the ASN.1 cannot be parsed.
    """
    try:
        cert = x509.load_der_x509_certificate(der)
        extensions = cert.extensions

        common_name = None
        kinds = set()
        attr_count = 0
        char_count = 0
        for attribute in cert.subject:
            attr_count += 1
            value = attribute.value
            char_count += len(value) if isinstance(value, (str, bytes)) else 0
            kind = SUBJECT_KINDS.get(attribute.oid)
            if kind:
                kinds.add(kind)
            if kind == "CN" and common_name is None and isinstance(value, str):
                common_name = value

        sans: List[str] = []
        san_ext = _extension(cert, ExtensionOID.SUBJECT_ALTERNATIVE_NAME)
        if san_ext is not None:
            sans.extend(san_ext.get_values_for_type(x509.DNSName))
            sans.extend(str(ip) for ip in san_ext.get_values_for_type(x509.IPAddress))

        policies = _extension(cert, ExtensionOID.CERTIFICATE_POLICIES)
        policy_oids = tuple(p.policy_identifier.dotted_string for p in policies) if policies else ()

        aia = _extension(cert, ExtensionOID.AUTHORITY_INFORMATION_ACCESS)
        has_ocsp = bool(aia) and any(
            desc.access_method == AuthorityInformationAccessOID.OCSP for desc in aia
        )
        has_cdp = _extension(cert, ExtensionOID.CRL_DISTRIBUTION_POINTS) is not None
        is_precert = _extension(cert, ExtensionOID.PRECERT_POISON) is not None

        not_before = _utc(getattr(cert, "not_valid_before_utc", None) or cert.not_valid_before)
        not_after = _utc(getattr(cert, "not_valid_after_utc", None) or cert.not_valid_after)
        issuer_dn = cert.issuer.rfc4514_string()
    except (ValueError, TypeError, x509.DuplicateExtension, x509.UnsupportedGeneralNameType) as e:
        raise MalformedDer(f"unparseable certificate: {e}") from e

    algorithm, key_size = _key_info(cert)
    if algorithm == "other":
        logger.debug("Unsupported key algorithm, recording as 'other'")

    try:
        return CertificateRecord(
            fingerprint=fingerprint_der(der),
            common_name=common_name,
            sans=tuple(sans),
            issuer_dn=issuer_dn,
            subject_attrs=frozenset(kinds),
            subject_attr_count=attr_count,
            subject_char_count=char_count,
            extension_count=len(extensions),
            policy_oids=policy_oids,
            not_before=not_before,
            not_after=not_after,
            key_algorithm=algorithm,
            key_size_bits=key_size,
            has_ocsp=has_ocsp,
            has_cdp=has_cdp,
            ct_log_index=ct_log_index,
            seen_at=seen_at or datetime.now(timezone.utc),
            is_precert=is_precert,
        )
    except ValueError as e:
        raise MalformedDer(str(e)) from e


def write_records(records: Iterable[CertificateRecord], path) -> int:
    """Write records as JSONL; returns the number written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            count += 1
    return count


def read_records(path) -> Iterator[CertificateRecord]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                yield CertificateRecord.from_dict(json.loads(line))
