"""
sFlow version 5 datagram codec.

Only the records the analysis consumes are decoded: flow samples (plain and
expanded) carrying a raw packet header record. Counter samples and other
record types are skipped and counted.
"""
import ipaddress
import logging
import struct
from dataclasses import dataclass, field

from .errors import DatagramError
from .model import MAX_CAPTURED_BYTES

logger = logging.getLogger(__name__)

SFLOW_VERSION = 5
SFLOW_PORT = 6343

FLOW_SAMPLE = 1
COUNTER_SAMPLE = 2
EXPANDED_FLOW_SAMPLE = 3
EXPANDED_COUNTER_SAMPLE = 4
RAW_PACKET_HEADER = 1
HEADER_PROTOCOL_ETHERNET = 1

ADDRESS_IPV4 = 1
ADDRESS_IPV6 = 2


@dataclass(frozen=True)
class FlowSampleRecord:
    """A raw packet header exported in one flow sample."""

    sampling_rate_reciprocal: int
    raw_header: bytes
    frame_length_original: int
    sequence_number: int = 0
    source_id: int = 0
    stripped: int = 0
    sample_pool: int = 0
    drops: int = 0
    input_if: int = 0
    output_if: int = 0


@dataclass
class SflowDatagram:
    version: int
    agent_address: str
    sequence_number: int
    uptime_ms: int = 0
    sub_agent_id: int = 0
    samples: list = field(default_factory=list)
    rejected: int = 0
    counter_samples: int = 0


@dataclass
class IngestStats:
    """Mergeable ingest counters."""

    datagrams_seen: int = 0
    samples_decoded: int = 0
    samples_rejected: int = 0
    bytes_read: int = 0
    counter_samples: int = 0
    datagrams_rejected: int = 0

    def __add__(self, other):
        return IngestStats(
            self.datagrams_seen + other.datagrams_seen,
            self.samples_decoded + other.samples_decoded,
            self.samples_rejected + other.samples_rejected,
            self.bytes_read + other.bytes_read,
            self.counter_samples + other.counter_samples,
            self.datagrams_rejected + other.datagrams_rejected,
        )

    def as_dict(self):
        return {
            "datagrams_seen": self.datagrams_seen,
            "samples_decoded": self.samples_decoded,
            "samples_rejected": self.samples_rejected,
            "bytes_read": self.bytes_read,
            "counter_samples": self.counter_samples,
            "datagrams_rejected": self.datagrams_rejected,
        }


class _Cursor:
    """Big-endian XDR reader over a bytes buffer."""

    def __init__(self, data, offset=0, end=None):
        self.data = data
        self.offset = offset
        self.end = len(data) if end is None else end

    def remaining(self):
        return self.end - self.offset

    def u32(self):
        if self.remaining() < 4:
            raise ValueError("unexpected end of data")
        (value,) = struct.unpack_from("!I", self.data, self.offset)
        self.offset += 4
        return value

    def opaque(self, length):
        padded = (length + 3) & ~3
        if self.remaining() < padded:
            raise ValueError("opaque data runs past the end")
        value = self.data[self.offset:self.offset + length]
        self.offset += padded
        return value

    def sub(self, length):
        if self.remaining() < length:
            raise ValueError("record length runs past the end")
        cursor = _Cursor(self.data, self.offset, self.offset + length)
        self.offset += length
        return cursor


def parse_datagram(data):
    """
    Parse one sFlow v5 datagram.

    Args:
        data: UDP payload bytes

    Returns:
        SflowDatagram with the raw-header flow samples it carries

    Raises:
        DatagramError: version is not 5 or the fixed preamble is incomplete
    """
    cursor = _Cursor(data)
    try:
        version = cursor.u32()
        if version != SFLOW_VERSION:
            raise DatagramError(f"unsupported sFlow version {version}")
        address_type = cursor.u32()
        if address_type == ADDRESS_IPV4:
            agent = str(ipaddress.IPv4Address(cursor.opaque(4)))
        elif address_type == ADDRESS_IPV6:
            agent = str(ipaddress.IPv6Address(cursor.opaque(16)))
        else:
            raise DatagramError(f"unknown agent address type {address_type}")
        sub_agent_id = cursor.u32()
        sequence_number = cursor.u32()
        uptime_ms = cursor.u32()
        sample_count = cursor.u32()
    except ValueError:
        raise DatagramError(f"datagram of {len(data)} bytes is shorter than the preamble") from None

    datagram = SflowDatagram(version, agent, sequence_number, uptime_ms, sub_agent_id)
    for index in range(sample_count):
        try:
            data_format = cursor.u32()
            length = cursor.u32()
            body = cursor.sub(length)
        except ValueError as exc:
            # Nothing after a broken sample header can be trusted.
            lost = sample_count - index
            logger.warning("datagram %d from %s: %s; %d samples lost",
                           sequence_number, agent, exc, lost)
            datagram.rejected += lost
            break
        enterprise, sample_type = data_format >> 12, data_format & 0xFFF
        if enterprise == 0 and sample_type in (COUNTER_SAMPLE, EXPANDED_COUNTER_SAMPLE):
            datagram.counter_samples += 1
            continue
        if enterprise != 0 or sample_type not in (FLOW_SAMPLE, EXPANDED_FLOW_SAMPLE):
            continue
        try:
            record = _parse_flow_sample(body, sample_type == EXPANDED_FLOW_SAMPLE)
        except ValueError as exc:
            logger.warning("datagram %d sample %d rejected: %s", sequence_number, index, exc)
            record = None
        if record is None:
            datagram.rejected += 1
        else:
            datagram.samples.append(record)
    return datagram


def _parse_flow_sample(cursor, expanded):
    sequence_number = cursor.u32()
    if expanded:
        cursor.u32()  # source id type
    source_id = cursor.u32()
    sampling_rate = cursor.u32()
    sample_pool = cursor.u32()
    drops = cursor.u32()
    if expanded:
        cursor.u32()
        input_if = cursor.u32()
        cursor.u32()
        output_if = cursor.u32()
    else:
        input_if = cursor.u32()
        output_if = cursor.u32()
    if sampling_rate < 1:
        raise ValueError("sampling rate of zero")

    record = None
    for _ in range(cursor.u32()):
        record_format = cursor.u32()
        body = cursor.sub(cursor.u32())
        if record_format != RAW_PACKET_HEADER or record is not None:
            continue
        header_protocol = body.u32()
        frame_length = body.u32()
        stripped = body.u32()
        header_length = body.u32()
        header = body.opaque(header_length)
        if header_protocol != HEADER_PROTOCOL_ETHERNET:
            raise ValueError(f"header protocol {header_protocol} is not Ethernet")
        record = FlowSampleRecord(
            sampling_rate_reciprocal=sampling_rate,
            raw_header=header[:MAX_CAPTURED_BYTES],
            frame_length_original=max(frame_length, len(header[:MAX_CAPTURED_BYTES])),
            sequence_number=sequence_number,
            source_id=source_id,
            stripped=stripped,
            sample_pool=sample_pool,
            drops=drops,
            input_if=input_if,
            output_if=output_if,
        )
    return record


def _pad(data):
    return data + b"\x00" * (-len(data) % 4)


class SflowEncoder:
    """Encode captured frames as sFlow v5 datagrams, as an agent would export them."""

    def __init__(self, agent_address="192.0.2.1", sub_agent_id=0, boot_time=0.0,
                 max_samples=8):
        """
        Args:
            agent_address: IPv4 address of the exporting agent
            sub_agent_id: sFlow sub-agent id
            boot_time: Epoch seconds the agent uptime counts from
            max_samples: Upper bound of samples per datagram
        """
        self.agent_address = ipaddress.IPv4Address(agent_address)
        self.sub_agent_id = sub_agent_id
        self.boot_time = boot_time
        self.max_samples = max_samples
        self.sequence_number = 0
        self.sample_sequence = 0

    def encode_datagram(self, records, uptime_ms=0):
        """Serialize FlowSampleRecords into one datagram."""
        self.sequence_number += 1
        parts = [
            struct.pack("!II", SFLOW_VERSION, ADDRESS_IPV4) + self.agent_address.packed
            + struct.pack("!IIII", self.sub_agent_id, self.sequence_number,
                          uptime_ms & 0xFFFFFFFF, len(records)),
        ]
        for record in records:
            self.sample_sequence += 1
            header = record.raw_header[:MAX_CAPTURED_BYTES]
            raw_record = struct.pack("!IIII", HEADER_PROTOCOL_ETHERNET,
                                     record.frame_length_original, record.stripped,
                                     len(header)) + _pad(header)
            flow_records = struct.pack("!II", RAW_PACKET_HEADER, len(raw_record)) + raw_record
            sample = struct.pack(
                "!IIIIIIII",
                self.sample_sequence,
                record.source_id,
                record.sampling_rate_reciprocal,
                record.sample_pool or self.sample_sequence * record.sampling_rate_reciprocal,
                record.drops,
                record.input_if,
                record.output_if,
                1,
            ) + flow_records
            parts.append(struct.pack("!II", FLOW_SAMPLE, len(sample)) + sample)
        return b"".join(parts)

    def encode(self, frames):
        """
        Group frames into datagrams.

        Consecutive frames sharing one timestamp go into the same datagram, so
        a collector assigning the arrival time to every sample of a datagram
        recovers the original timestamps.

        Args:
            frames: Iterable of objects with timestamp, frame, frame_length
                and rate_reciprocal attributes

        Yields:
            (arrival_time, datagram bytes) pairs
        """
        batch, batch_time = [], None
        for frame in frames:
            if batch and (frame.timestamp != batch_time or len(batch) >= self.max_samples):
                yield batch_time, self._flush(batch, batch_time)
                batch = []
            batch_time = frame.timestamp
            batch.append(FlowSampleRecord(
                sampling_rate_reciprocal=frame.rate_reciprocal,
                raw_header=bytes(frame.frame[:MAX_CAPTURED_BYTES]),
                frame_length_original=frame.frame_length,
            ))
        if batch:
            yield batch_time, self._flush(batch, batch_time)

    def _flush(self, batch, timestamp):
        uptime_ms = int(round((timestamp - self.boot_time) * 1000))
        return self.encode_datagram(batch, max(uptime_ms, 0))


def encode_counter_datagram(agent_address="192.0.2.1", sequence_number=1):
    """A datagram holding a single (empty) generic counter sample."""
    counter = struct.pack("!III", 1, 0, 0)
    return struct.pack("!II", SFLOW_VERSION, ADDRESS_IPV4) \
        + ipaddress.IPv4Address(agent_address).packed \
        + struct.pack("!IIII", 0, sequence_number, 0, 1) \
        + struct.pack("!II", COUNTER_SAMPLE, len(counter)) + counter
