"""
Synthetic industrial traffic, sFlow-style sampling and the end-to-end
self-injection validation.

Packet metadata for a whole profile is held in numpy arrays; frames are only
built (with scapy) for the packets that are actually emitted or sampled.
"""
import enum
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scapy.layers.inet import IP, TCP
from scapy.layers.l2 import Ether
from scapy.packet import Raw

from .anonymize import tag_and_anonymize
from .classifier import Basis, Classifier, VerdictLabel
from .errors import DomainError, ValidationFailure
from .ingest import (CapturedFrame, FrameDecoder, SflowIngestor, write_pcap,
                     write_sflow_pcap)
from .intel import IntelStore
from .model import SamplesWriter, TcpFlags
from .sampling_model import binomial_bounds
from .sflow import SflowEncoder

logger = logging.getLogger(__name__)

DEFAULT_START = 1578960000.0
CLIENT_ADDRESS = "198.51.100.10"
SERVER_ADDRESS = "203.0.113.20"
CLIENT_MAC = "02:00:00:00:00:01"
SERVER_MAC = "02:00:00:00:00:02"
CLIENT_PORT_BASE = 50000
MIN_ETHERNET_FRAME = 60
STEP_SPACING = 0.001

_PA = int(TcpFlags.PSH | TcpFlags.ACK)
_A = int(TcpFlags.ACK)


class TransactionKind(enum.Enum):
    MODBUS_WRITE_SINGLE_REGISTER = "ModbusWriteSingleRegister"
    MQTT_PUBLISH = "MqttPublish"
    CUSTOM = "Custom"


class SamplingMode(enum.Enum):
    BERNOULLI = "Bernoulli"
    DETERMINISTIC_EVERY_NTH = "DeterministicEveryNth"


@dataclass(frozen=True)
class PacketTemplate:
    """One packet of a custom transaction."""

    from_client: bool
    flags: int = _PA
    payload: bytes = b""


# (from_client, flags, carries payload) per packet of the built-in transactions
_SHAPES = {
    TransactionKind.MODBUS_WRITE_SINGLE_REGISTER: ((True, _PA, True), (False, _PA, True),
                                                   (True, _A, False)),
    TransactionKind.MQTT_PUBLISH: ((True, _PA, True), (False, _A, False)),
}
_PORTS = {
    TransactionKind.MODBUS_WRITE_SINGLE_REGISTER: 502,
    TransactionKind.MQTT_PUBLISH: 1883,
}


@dataclass(frozen=True)
class Transaction:
    kind: TransactionKind
    rate_per_second: float
    port: int = None
    templates: tuple = ()

    def __post_init__(self):
        if not self.rate_per_second > 0:
            raise DomainError(f"transaction rate must be positive, got {self.rate_per_second}")
        if self.kind is TransactionKind.CUSTOM and (not self.templates or self.port is None):
            raise DomainError("custom transactions need a port and packet templates")

    @property
    def server_port(self):
        return self.port if self.port is not None else _PORTS[self.kind]

    @property
    def shape(self):
        if self.kind is TransactionKind.CUSTOM:
            return tuple((t.from_client, t.flags, bool(t.payload)) for t in self.templates)
        return _SHAPES[self.kind]


@dataclass(frozen=True)
class TrafficProfile:
    transactions: tuple
    duration_seconds: int
    direction_mix: float = None
    seed: int = 0
    client: str = CLIENT_ADDRESS
    server: str = SERVER_ADDRESS
    start: float = DEFAULT_START

    def __post_init__(self):
        if self.duration_seconds < 0:
            raise DomainError(f"duration must be non-negative, got {self.duration_seconds}")
        if self.direction_mix is not None and not 0.0 <= self.direction_mix <= 1.0:
            raise DomainError(f"direction mix must lie in [0, 1], got {self.direction_mix}")

    @classmethod
    def modbus_and_mqtt(cls, modbus_rate=10.0, mqtt_rate=10.0, duration_seconds=86400, seed=0):
        """Modbus Write Single Register plus MQTT Publish at fixed rates."""
        return cls((Transaction(TransactionKind.MODBUS_WRITE_SINGLE_REGISTER, modbus_rate),
                    Transaction(TransactionKind.MQTT_PUBLISH, mqtt_rate)),
                   duration_seconds, seed=seed)

    def transaction_count(self, slot):
        return int(math.floor(self.duration_seconds * self.transactions[slot].rate_per_second
                              + 1e-9))


@dataclass(frozen=True)
class SamplerConfig:
    rate_reciprocal: int = 4096
    mode: SamplingMode = SamplingMode.BERNOULLI
    sample_outgoing_only: bool = True

    def __post_init__(self):
        if self.rate_reciprocal < 1:
            raise DomainError(f"rate reciprocal must be positive, got {self.rate_reciprocal}")


class TrafficStream:
    """Time-ordered packets of a profile: metadata arrays plus lazy frame building."""

    def __init__(self, profile, timestamps, slots, tx, steps, outgoing):
        self.profile = profile
        self.timestamps = timestamps
        self.slots = slots
        self.tx = tx
        self.steps = steps
        self.outgoing = outgoing

    def __len__(self):
        return len(self.timestamps)

    @property
    def transactions(self):
        return sum(self.profile.transaction_count(s) for s in range(len(self.profile.transactions)))

    def payload_mask(self):
        """True for packets carrying an application payload."""
        mask = np.zeros(len(self), dtype=bool)
        for slot, transaction in enumerate(self.profile.transactions):
            carries = np.array([shape[2] for shape in transaction.shape], dtype=bool)
            in_slot = self.slots == slot
            mask[in_slot] = carries[self.steps[in_slot]]
        return mask

    def _payload(self, transaction, slot, tx, step):
        if transaction.kind is TransactionKind.CUSTOM:
            return transaction.templates[step].payload
        if not transaction.shape[step][2]:
            return b""
        rng = np.random.default_rng([self.profile.seed, slot, tx])
        if transaction.kind is TransactionKind.MODBUS_WRITE_SINGLE_REGISTER:
            address, value = int(rng.integers(0, 1000)), int(rng.integers(0, 65536))
            # Write Single Register request; the response echoes it.
            return struct.pack("!HHHBBHH", tx & 0xFFFF, 0, 6, 1, 0x06, address, value)
        topic = b"plant/line%d/sensor%02d" % (slot, int(rng.integers(0, 32)))
        message = b"%d" % int(rng.integers(0, 100000))
        body = struct.pack("!H", len(topic)) + topic + message
        return bytes([0x30, len(body)]) + body

    def frame(self, index):
        """Build the Ethernet frame of packet ``index``; returns (frame, frame_length)."""
        slot, tx, step = int(self.slots[index]), int(self.tx[index]), int(self.steps[index])
        transaction = self.profile.transactions[slot]
        from_client, flags, _ = transaction.shape[step]
        payload = self._payload(transaction, slot, tx, step)
        client_port = CLIENT_PORT_BASE + slot
        client_seq = (0x10000000 + tx * 256) & 0xFFFFFFFF
        server_seq = (0x20000000 + tx * 256) & 0xFFFFFFFF
        if from_client:
            ether = Ether(src=CLIENT_MAC, dst=SERVER_MAC)
            ip = IP(src=self.profile.client, dst=self.profile.server, id=tx & 0xFFFF, ttl=64)
            tcp = TCP(sport=client_port, dport=transaction.server_port, flags=flags,
                      seq=(client_seq + step) & 0xFFFFFFFF, ack=server_seq, window=8192)
        else:
            ether = Ether(src=SERVER_MAC, dst=CLIENT_MAC)
            ip = IP(src=self.profile.server, dst=self.profile.client, id=tx & 0xFFFF, ttl=64)
            tcp = TCP(sport=transaction.server_port, dport=client_port, flags=flags,
                      seq=server_seq, ack=(client_seq + step) & 0xFFFFFFFF, window=8192)
        packet = ether / ip / tcp
        if payload:
            packet = packet / Raw(load=payload)
        frame = bytes(packet).ljust(MIN_ETHERNET_FRAME, b"\x00")
        return frame, len(frame)

    def captured_frames(self, indices=None, rate_reciprocal=1):
        """Yield CapturedFrame for the given packet indices (all by default), in order."""
        indices = range(len(self)) if indices is None else indices
        for index in indices:
            frame, length = self.frame(int(index))
            yield CapturedFrame(float(self.timestamps[index]), frame, length, rate_reciprocal)


def generate(profile):
    """
    Generate the packet stream of a profile.

    Transaction ``i`` of a slot starts at ``start + i / rate``; its packets
    follow one millisecond apart. Streams of all slots are merged in time
    order (stable on ties).

    Returns:
        TrafficStream
    """
    parts = []
    for slot, transaction in enumerate(profile.transactions):
        count = profile.transaction_count(slot)
        shape = transaction.shape
        size = len(shape)
        starts = profile.start + np.arange(count, dtype=np.float64) / transaction.rate_per_second
        parts.append((
            np.repeat(starts, size) + np.tile(np.arange(size) * STEP_SPACING, count),
            np.full(count * size, slot, dtype=np.int16),
            np.repeat(np.arange(count, dtype=np.int64), size),
            np.tile(np.arange(size, dtype=np.int8), count),
            np.tile(np.array([s[0] for s in shape], dtype=bool), count),
        ))
    if parts:
        timestamps, slots, tx, steps, outgoing = (np.concatenate(arrays) for arrays in zip(*parts))
    else:
        timestamps, slots, tx, steps, outgoing = (np.zeros(0, dtype=d) for d in
                                                  (np.float64, np.int16, np.int64, np.int8, bool))
    order = np.argsort(timestamps, kind="stable")
    timestamps, slots, tx, steps, outgoing = (a[order] for a in (timestamps, slots, tx, steps,
                                                                   outgoing))
    if profile.direction_mix is not None:
        rng = np.random.default_rng([profile.seed, 0xD1])
        outgoing = rng.random(len(timestamps)) < profile.direction_mix
    logger.info("Generated %d packets for %d transaction kinds over %d s",
                len(timestamps), len(profile.transactions), profile.duration_seconds)
    return TrafficStream(profile, timestamps, slots, tx, steps, outgoing)


@dataclass(frozen=True)
class SampleOutcome:
    indices: np.ndarray
    eligible_count: int
    sampled_count: int
    rate_reciprocal: int


def sample(stream, config, seed):
    """
    Thin the stream as an sFlow agent would.

    Args:
        stream: TrafficStream
        config: SamplerConfig
        seed: Seed of the counter-based sampling stream

    Returns:
        SampleOutcome with the sampled packet indices in time order
    """
    eligible = np.flatnonzero(stream.outgoing) if config.sample_outgoing_only \
        else np.arange(len(stream))
    rate = config.rate_reciprocal
    if config.mode is SamplingMode.BERNOULLI:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        chosen = eligible[rng.random(len(eligible)) < 1.0 / rate] if rate > 1 else eligible
    else:
        chosen = eligible[rate - 1::rate]
    return SampleOutcome(chosen, len(eligible), len(chosen), rate)


def sampled_frames(stream, outcome):
    return stream.captured_frames(outcome.indices, outcome.rate_reciprocal)


def decode_frames(frames, as_map, pseudonymizer, via_sflow=False):
    """
    Turn captured frames into SampledPackets, directly or through an sFlow
    encode / decode round trip.
    """
    if via_sflow:
        ingestor = SflowIngestor(as_map, pseudonymizer)
        packets = []
        for arrival, datagram in SflowEncoder().encode(frames):
            decoded, _ = ingestor.decode_datagram(datagram, arrival)
            packets.extend(decoded)
        return packets
    decoder = FrameDecoder()
    return [tag_and_anonymize(decoder.decode(f.frame, f.timestamp, f.frame_length,
                                             f.rate_reciprocal, "synth"),
                              as_map, pseudonymizer)
            for f in frames]


def emit(stream, outcome, kind, path, as_map=None, pseudonymizer=None):
    """
    Write sampled packets as 'pcap', 'sflow' (pcap of sFlow datagrams) or 'samples'.

    Returns:
        Number of records written
    """
    frames = sampled_frames(stream, outcome)
    if kind == "pcap":
        return write_pcap(frames, path)
    if kind == "sflow":
        return write_sflow_pcap(SflowEncoder().encode(frames), path)
    if kind == "samples":
        with SamplesWriter(path) as writer:
            return writer.write_all(decode_frames(frames, as_map, pseudonymizer))
    raise DomainError(f"unknown emit kind {kind!r}")


@dataclass
class ValidationReport:
    transactions: int = 0
    generated: int = 0
    eligible: int = 0
    sampled: int = 0
    expected: float = 0.0
    sigma: float = 0.0
    low: float = 0.0
    high: float = 0.0
    within_bounds: bool = False
    ratio: float = 0.0
    expected_ratio: float = 0.0
    ics_packets: int = 0
    well_formed: int = 0
    legitimate: int = 0
    scanner: int = 0
    ack_packets: int = 0
    ack_indeterminate: int = 0
    expect_legitimate: bool = True
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    def as_dict(self):
        data = {k: v for k, v in self.__dict__.items()}
        data["passed"] = self.passed
        return data

    def check(self):
        if self.failures:
            raise ValidationFailure("validation failed: " + "; ".join(self.failures))
        return self


def validate_end_to_end(profile, config, seed, as_map, pseudonymizer, intel=None,
                        via_sflow=True, z=4.0):
    """
    Generate, sample, (sFlow encode / decode,) classify and check the result.

    With an empty intel snapshot every sampled packet with an industrial
    payload must dissect well formed and classify as legitimate, bare ACKs
    must stay indeterminate, and the sampled count must fall within z sigma
    of its binomial expectation.

    Returns:
        ValidationReport (call check() to raise ValidationFailure)
    """
    intel = intel if intel is not None else IntelStore()
    stream = generate(profile)
    outcome = sample(stream, config, seed)
    packets = decode_frames(sampled_frames(stream, outcome), as_map, pseudonymizer, via_sflow)
    result = Classifier(intel=intel).classify(packets)

    probability = 1.0 / config.rate_reciprocal
    low, high, mean, sigma = binomial_bounds(outcome.eligible_count, probability, z)
    report = ValidationReport(
        transactions=stream.transactions,
        generated=len(stream),
        eligible=outcome.eligible_count,
        sampled=outcome.sampled_count,
        expected=mean, sigma=sigma, low=low, high=high,
        within_bounds=low <= outcome.sampled_count <= high,
        ratio=outcome.sampled_count / outcome.eligible_count if outcome.eligible_count else 0.0,
        expected_ratio=probability,
        expect_legitimate=len(intel) == 0,
    )
    by_ref = {v.ref: v for v in result.verdicts}
    for ref, packet in enumerate(packets):
        verdict = by_ref.get(ref)
        if verdict is not None and verdict.label is VerdictLabel.ICS_SCANNER:
            report.scanner += 1
        if packet.payload_prefix:
            report.ics_packets += 1
            if verdict is not None and Basis.DISSECT_OK in verdict.basis:
                report.well_formed += 1
            if verdict is not None and verdict.label is VerdictLabel.LEGITIMATE_ICS:
                report.legitimate += 1
        else:
            report.ack_packets += 1
            if verdict is not None and verdict.label is VerdictLabel.INDETERMINATE:
                report.ack_indeterminate += 1

    if outcome.eligible_count and config.mode is SamplingMode.BERNOULLI \
            and not report.within_bounds:
        report.failures.append(f"sampled {report.sampled} outside [{low:.1f}, {high:.1f}]")
    if report.well_formed != report.ics_packets:
        report.failures.append(f"{report.ics_packets - report.well_formed} industrial packets "
                               f"not dissected well formed")
    if report.expect_legitimate:
        if report.legitimate != report.ics_packets:
            report.failures.append(f"{report.ics_packets - report.legitimate} industrial "
                                   f"packets not legitimate")
        if report.ack_indeterminate != report.ack_packets:
            report.failures.append(f"{report.ack_packets - report.ack_indeterminate} bare ACKs "
                                   f"not indeterminate")
    logger.info("Validation: %d of %d eligible packets sampled (expected %.1f +/- %.1f), "
                "%d/%d industrial packets legitimate", report.sampled, report.eligible,
                report.expected, report.sigma, report.legitimate, report.ics_packets)
    return report
