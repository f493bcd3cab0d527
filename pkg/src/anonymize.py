"""
Edge tagging of IPv4 addresses: AS attribution by longest-prefix match,
then keyed pseudonymization.
"""
import functools
import hashlib
import ipaddress
import logging
import os

from .errors import InputNotFoundError, KeyMaterialError, SchemaError
from .model import HostId

logger = logging.getLogger(__name__)

KEY_BYTES = 16
_ROUNDS = 4
PSEUDONYM_CACHE_SIZE = 1 << 16


def load_key(key_file=None, key_env=None):
    """
    Load the 128-bit pseudonymization key from a file or an environment variable.

    Args:
        key_file: Path holding 16 raw bytes or 32 hex characters
        key_env: Name of an environment variable holding 32 hex characters

    Returns:
        16-byte key
    """
    if key_file:
        if not os.path.exists(key_file):
            raise InputNotFoundError(f"key file not found: {key_file}")
        with open(key_file, "rb") as handle:
            raw = handle.read()
        if len(raw) == KEY_BYTES:
            return raw
        return _key_from_hex(raw.decode("ascii", errors="replace").strip(), key_file)
    if key_env:
        value = os.environ.get(key_env)
        if value is None:
            raise KeyMaterialError(f"environment variable {key_env} is not set")
        return _key_from_hex(value.strip(), key_env)
    raise KeyMaterialError("no key material given (use --key-file or --key-env)")


def _key_from_hex(text, source):
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise KeyMaterialError(f"{source}: key is not hex") from None
    if len(key) != KEY_BYTES:
        raise KeyMaterialError(f"{source}: key must be {KEY_BYTES} bytes, got {len(key)}")
    return key


def key_fingerprint(key):
    return hashlib.sha256(key).hexdigest()[:8]


class Pseudonymizer:
    """Keyed permutation of the IPv4 space (balanced Feistel network on 32 bits)."""

    def __init__(self, key, cache_size=PSEUDONYM_CACHE_SIZE):
        """
        Args:
            key: 16-byte secret, fixed for the whole analysis run
            cache_size: Most recently seen addresses kept with their pseudonym
        """
        if len(key) != KEY_BYTES:
            raise KeyMaterialError(f"key must be {KEY_BYTES} bytes, got {len(key)}")
        self._round_keys = [
            hashlib.blake2b(key, digest_size=16, person=b"icswatch-r%d" % i).digest()
            for i in range(_ROUNDS)
        ]
        self.pseudonymize = functools.lru_cache(maxsize=cache_size)(self._pseudonymize)

    def _round(self, index, half):
        digest = hashlib.blake2b(half.to_bytes(2, "big"), digest_size=2,
                                 key=self._round_keys[index]).digest()
        return int.from_bytes(digest, "big")

    def permute(self, value):
        left, right = value >> 16, value & 0xFFFF
        for index in range(_ROUNDS):
            left, right = right, left ^ self._round(index, right)
        return (left << 16) | right

    def _pseudonymize(self, ip):
        """Map a dotted IPv4 string (or int) to its stable pseudonym."""
        return "h%08x" % self.permute(int(ipaddress.IPv4Address(ip)))


class AsMap:
    """Longest-prefix match from IPv4 prefixes to (ASN, in-IXP-area)."""

    def __init__(self, prefixes=()):
        """
        Args:
            prefixes: Iterable of (cidr, asn, in_ixp_area) tuples
        """
        self._tables = {}
        for cidr, asn, area in prefixes:
            self.add(cidr, asn, area)

    def add(self, cidr, asn, area):
        network = ipaddress.IPv4Network(cidr, strict=False)
        table = self._tables.setdefault(network.prefixlen, {})
        table[int(network.network_address)] = (int(asn), bool(area))

    def __len__(self):
        return sum(len(table) for table in self._tables.values())

    @classmethod
    def from_file(cls, path):
        """Load ``CIDR, ASN, area(0/1)`` lines; ``#`` starts a comment."""
        if not os.path.exists(path):
            raise InputNotFoundError(f"AS map not found: {path}")
        as_map = cls()
        with open(path, encoding="utf-8") as handle:
            for number, line in enumerate(handle, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                fields = [field.strip() for field in line.split(",")]
                try:
                    cidr, asn, area = fields
                    if area not in ("0", "1"):
                        raise ValueError(f"area flag must be 0 or 1, got {area!r}")
                    as_map.add(cidr, int(asn), area == "1")
                except ValueError as exc:
                    raise SchemaError(f"{path}: {exc}", number) from exc
        logger.info("Loaded %d AS prefixes from %s", len(as_map), path)
        return as_map

    def lookup(self, ip):
        """Return (asn, in_ixp_area); (0, False) when no prefix matches."""
        value = int(ipaddress.IPv4Address(ip))
        for prefixlen in sorted(self._tables, reverse=True):
            mask = (0xFFFFFFFF << (32 - prefixlen)) & 0xFFFFFFFF
            hit = self._tables[prefixlen].get(value & mask)
            if hit is not None:
                return hit
        return 0, False


def tag_host(ip, as_map, pseudonymizer):
    """Attribute an IP to its AS, then replace it by its pseudonym."""
    asn, area = as_map.lookup(ip)
    return HostId(pseudonymizer.pseudonymize(ip), asn, area)


def tag_and_anonymize(frame, as_map, pseudonymizer):
    """
    Turn a decoded frame still carrying IPs into a SampledPacket.

    Args:
        frame: DecodedFrame from the ingest module
        as_map: AsMap snapshot
        pseudonymizer: Pseudonymizer for this run

    Returns:
        SampledPacket without any original address
    """
    return frame.to_packet(
        tag_host(frame.src_ip, as_map, pseudonymizer) if frame.src_ip else None,
        tag_host(frame.dst_ip, as_map, pseudonymizer) if frame.dst_ip else None,
    )
