"""
Shared packet and host types, and the samples-file record codec.
"""
import enum
import json
from dataclasses import dataclass

from .errors import SchemaError

# sFlow truncation budget for one captured frame.
MAX_CAPTURED_BYTES = 128


class Transport(str, enum.Enum):
    TCP = "tcp"
    UDP = "udp"
    ICMP = "icmp"
    OTHER = "other"


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80


@dataclass(frozen=True, order=True)
class HostId:
    """A pseudonymized IPv4 endpoint with its AS attribution."""

    pseudonym: str
    asn: int = 0
    in_ixp_area: bool = False

    def __post_init__(self):
        if self.asn < 0:
            raise ValueError(f"negative ASN {self.asn}")


# Endpoint of frames that carry no IPv4 header (ARP, LLDP, ...).
NO_HOST = HostId("-")


@dataclass(frozen=True)
class SampledPacket:
    """One sampled, truncated frame with decoded L2-L4 header fields."""

    timestamp: float
    src: HostId
    dst: HostId
    src_port: int
    dst_port: int
    transport: Transport
    tcp_flags: int = 0
    payload_prefix: bytes = b""
    sampling_rate_reciprocal: int = 1
    agent: str = ""
    proto_code: int = 0
    captured_length: int = 0
    frame_length: int = 0

    def __post_init__(self):
        if self.captured_length > MAX_CAPTURED_BYTES:
            raise ValueError(f"captured frame of {self.captured_length} bytes exceeds "
                             f"{MAX_CAPTURED_BYTES}")
        if (self.src_port or self.dst_port) and self.transport not in (Transport.TCP,
                                                                       Transport.UDP):
            raise ValueError("transport ports require TCP or UDP")
        if self.sampling_rate_reciprocal < 1:
            raise ValueError("sampling rate reciprocal must be positive")

    @property
    def truncated(self):
        """True when the capture cut the frame short."""
        return self.frame_length > self.captured_length

    @property
    def flags(self):
        return TcpFlags(self.tcp_flags)

    def to_record(self):
        return {
            "ts": self.timestamp,
            "src": self.src.pseudonym,
            "src_asn": self.src.asn,
            "src_area": int(self.src.in_ixp_area),
            "dst": self.dst.pseudonym,
            "dst_asn": self.dst.asn,
            "dst_area": int(self.dst.in_ixp_area),
            "sport": self.src_port,
            "dport": self.dst_port,
            "transport": self.transport.value,
            "proto_code": self.proto_code,
            "flags": self.tcp_flags,
            "payload": self.payload_prefix.hex(),
            "rate": self.sampling_rate_reciprocal,
            "agent": self.agent,
            "cap_len": self.captured_length,
            "frame_len": self.frame_length,
        }

    @classmethod
    def from_record(cls, record, line=None):
        try:
            return cls(
                timestamp=float(record["ts"]),
                src=HostId(record["src"], int(record["src_asn"]), bool(record["src_area"])),
                dst=HostId(record["dst"], int(record["dst_asn"]), bool(record["dst_area"])),
                src_port=int(record["sport"]),
                dst_port=int(record["dport"]),
                transport=Transport(record["transport"]),
                tcp_flags=int(record.get("flags", 0)),
                payload_prefix=bytes.fromhex(record.get("payload", "")),
                sampling_rate_reciprocal=int(record.get("rate", 1)),
                agent=str(record.get("agent", "")),
                proto_code=int(record.get("proto_code", 0)),
                captured_length=int(record.get("cap_len", 0)),
                frame_length=int(record.get("frame_len", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad sample record: {exc}", line) from exc


@dataclass(frozen=True, order=True)
class FlowKey:
    """Direction-free conversation key; both directions share one key."""

    endpoint_lo: tuple
    endpoint_hi: tuple
    transport: Transport

    @classmethod
    def of(cls, packet):
        a = (packet.src.pseudonym, packet.src_port)
        b = (packet.dst.pseudonym, packet.dst_port)
        lo, hi = (a, b) if a <= b else (b, a)
        return cls(lo, hi, packet.transport)

    @property
    def ports(self):
        return self.endpoint_lo[1], self.endpoint_hi[1]

    @property
    def hosts(self):
        return self.endpoint_lo[0], self.endpoint_hi[0]


def read_samples(path):
    """Yield SampledPacket objects from a samples file, in file order."""
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", number) from exc
            yield SampledPacket.from_record(record, number)


class SamplesWriter:
    """Append SampledPacket records to a samples file."""

    def __init__(self, path, append=False):
        self.path = path
        self.count = 0
        self._handle = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, packet):
        self._handle.write(json.dumps(packet.to_record(), sort_keys=True) + "\n")
        self.count += 1

    def write_all(self, packets):
        for packet in packets:
            self.write(packet)
        return self.count

    def close(self):
        self._handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
