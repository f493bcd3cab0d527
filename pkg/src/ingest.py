"""
Ingest of sampled traffic: frame header decoding, pcap replay, sFlow
datagrams (from a capture or a live UDP socket), with AS tagging and
pseudonymization applied before anything leaves this module.
"""
import logging
import os
import socket
import time
from dataclasses import dataclass

from scapy.layers.inet import ICMP, IP, TCP, UDP
from scapy.layers.l2 import Dot1Q, Ether
from scapy.packet import Raw
from scapy.utils import PcapWriter, RawPcapReader

from .anonymize import tag_and_anonymize
from .errors import DatagramError, InputNotFoundError, PcapFormatError
from .model import MAX_CAPTURED_BYTES, NO_HOST, SampledPacket, Transport
from .sflow import SFLOW_PORT, IngestStats, parse_datagram

logger = logging.getLogger(__name__)

ETHERNET_HEADER = 14
VLAN_TAG = 4
VLAN_TYPES = (0x8100, 0x88A8)
ETHERTYPE_IPV4 = 0x0800
LINKTYPE_ETHERNET = 1
AGENT_MAC = "02:00:00:00:01:01"
COLLECTOR_MAC = "02:00:00:00:01:02"

PCAP_MAGICS = {
    b"\xd4\xc3\xb2\xa1", b"\xa1\xb2\xc3\xd4",  # microsecond
    b"\x4d\x3c\xb2\xa1", b"\xa1\xb2\x3c\x4d",  # nanosecond
}


class FrameDecodeError(ValueError):
    """A captured frame is too broken to yield a packet."""


@dataclass(frozen=True)
class CapturedFrame:
    """A raw frame as it leaves a capture point, before decoding."""

    timestamp: float
    frame: bytes
    frame_length: int
    rate_reciprocal: int = 1


@dataclass(frozen=True)
class DecodedFrame:
    """Decoded header fields of one frame, still carrying IPv4 addresses."""

    timestamp: float
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    transport: Transport
    proto_code: int
    tcp_flags: int
    payload: bytes
    captured_length: int
    frame_length: int
    rate_reciprocal: int = 1
    agent: str = ""

    def to_packet(self, src=None, dst=None):
        return SampledPacket(
            timestamp=self.timestamp,
            src=src or NO_HOST,
            dst=dst or NO_HOST,
            src_port=self.src_port,
            dst_port=self.dst_port,
            transport=self.transport,
            tcp_flags=self.tcp_flags,
            payload_prefix=self.payload,
            sampling_rate_reciprocal=self.rate_reciprocal,
            agent=self.agent,
            proto_code=self.proto_code,
            captured_length=self.captured_length,
            frame_length=self.frame_length,
        )


class FrameDecoder:
    """Decode Ethernet / 802.1Q / IPv4 / TCP / UDP / ICMP headers of a frame."""

    def __init__(self, snap=MAX_CAPTURED_BYTES):
        """
        Args:
            snap: Truncation length applied before decoding; None keeps the whole frame
        """
        self.snap = snap

    def decode(self, frame, timestamp, frame_length=None, rate_reciprocal=1, agent=""):
        """
        Decode one frame.

        Args:
            frame: Raw frame bytes starting at the Ethernet header
            timestamp: Capture time in epoch seconds
            frame_length: Original length on the wire (defaults to len(frame))
            rate_reciprocal: Sampling rate reciprocal the frame was taken with
            agent: Collector or agent identifier

        Returns:
            DecodedFrame

        Raises:
            FrameDecodeError: frame shorter than an Ethernet header, stacked
                VLAN tags, or broken IPv4/TCP header lengths
        """
        frame = bytes(frame[:self.snap] if self.snap else frame)
        frame_length = max(frame_length or len(frame), len(frame))
        if len(frame) < ETHERNET_HEADER:
            raise FrameDecodeError(f"frame of {len(frame)} bytes has no Ethernet header")

        eth = Ether(frame)
        offset = ETHERNET_HEADER
        ether_type = eth.type
        layer = eth.payload
        if ether_type in VLAN_TYPES:
            if not isinstance(layer, Dot1Q) or len(frame) < offset + VLAN_TAG:
                raise FrameDecodeError("truncated 802.1Q tag")
            offset += VLAN_TAG
            ether_type = layer.type
            layer = layer.payload
            if ether_type in VLAN_TYPES:
                raise FrameDecodeError("stacked 802.1Q tags are not supported")

        fields = dict(timestamp=timestamp, captured_length=len(frame),
                      frame_length=frame_length, rate_reciprocal=rate_reciprocal, agent=agent)

        if ether_type != ETHERTYPE_IPV4 or not isinstance(layer, IP) or len(frame) < offset + 20:
            return DecodedFrame(src_ip="", dst_ip="", src_port=0, dst_port=0,
                                transport=Transport.OTHER, proto_code=0, tcp_flags=0,
                                payload=frame[offset:], **fields)

        ip = layer
        header_length = ip.ihl * 4
        if header_length < 20:
            raise FrameDecodeError(f"IPv4 header length {header_length} below minimum")
        end = offset + ip.len if ip.len and ip.len >= header_length else len(frame)
        end = min(end, len(frame))
        l4 = offset + header_length
        base = dict(src_ip=ip.src, dst_ip=ip.dst, proto_code=ip.proto, **fields)

        if ip.frag:
            return DecodedFrame(src_port=0, dst_port=0, transport=Transport.OTHER,
                                tcp_flags=0, payload=frame[l4:end], **base)

        segment = ip.payload
        if ip.proto == 6 and isinstance(segment, TCP) and end - l4 >= 20:
            data_offset = segment.dataofs * 4
            if data_offset < 20:
                raise FrameDecodeError(f"TCP data offset {data_offset} below minimum")
            return DecodedFrame(src_port=segment.sport, dst_port=segment.dport,
                                transport=Transport.TCP, tcp_flags=int(segment.flags),
                                payload=frame[l4 + data_offset:end], **base)
        if ip.proto == 17 and isinstance(segment, UDP) and end - l4 >= 8:
            return DecodedFrame(src_port=segment.sport, dst_port=segment.dport,
                                transport=Transport.UDP, tcp_flags=0,
                                payload=frame[l4 + 8:end], **base)
        if ip.proto == 1 and isinstance(segment, ICMP):
            return DecodedFrame(src_port=0, dst_port=0, transport=Transport.ICMP,
                                tcp_flags=0, payload=frame[l4 + 8:end], **base)
        if ip.proto in (6, 17):
            raise FrameDecodeError("transport header cut short")
        return DecodedFrame(src_port=0, dst_port=0, transport=Transport.OTHER,
                            tcp_flags=0, payload=frame[l4:end], **base)


def _check_pcap(path):
    if not os.path.exists(path):
        raise InputNotFoundError(f"pcap file not found: {path}")
    with open(path, "rb") as handle:
        magic = handle.read(4)
    if magic not in PCAP_MAGICS:
        raise PcapFormatError(f"{path}: unreadable pcap magic number {magic.hex() or '(empty)'}")


def iter_pcap_frames(path, snap=MAX_CAPTURED_BYTES, rate_reciprocal=1):
    """
    Yield CapturedFrame records from an Ethernet pcap file.

    Raises:
        PcapFormatError: bad magic number or non-Ethernet link type
    """
    _check_pcap(path)
    reader = RawPcapReader(path)
    try:
        if reader.linktype != LINKTYPE_ETHERNET:
            raise PcapFormatError(f"{path}: unsupported link type {reader.linktype}")
        divisor = 1e9 if getattr(reader, "nano", False) else 1e6
        for data, meta in reader:
            frame = data[:snap] if snap else data
            yield CapturedFrame(
                timestamp=meta.sec + meta.usec / divisor,
                frame=bytes(frame),
                frame_length=max(meta.wirelen, len(frame)),
                rate_reciprocal=rate_reciprocal,
            )
    finally:
        reader.close()


def decode_pcap(path, as_map, pseudonymizer, rate_reciprocal=1, agent="pcap"):
    """
    Replay a pcap file as a stream of SampledPacket.

    Frames longer than 128 bytes are truncated to 128 to emulate the sFlow
    capture; undecodable frames are logged and skipped.

    Args:
        path: Ethernet pcap file
        as_map: AsMap used for AS attribution
        pseudonymizer: Pseudonymizer for the run
        rate_reciprocal: Sampling rate the capture represents (1 = unsampled)
        agent: Identifier stored in every packet

    Yields:
        SampledPacket
    """
    decoder = FrameDecoder()
    for number, captured in enumerate(iter_pcap_frames(path, rate_reciprocal=rate_reciprocal), 1):
        try:
            frame = decoder.decode(captured.frame, captured.timestamp, captured.frame_length,
                                   rate_reciprocal, agent)
        except FrameDecodeError as exc:
            logger.warning("%s frame %d skipped: %s", path, number, exc)
            continue
        yield tag_and_anonymize(frame, as_map, pseudonymizer)


class SflowIngestor:
    """Decode sFlow datagrams into SampledPacket streams, keeping IngestStats."""

    def __init__(self, as_map, pseudonymizer, port=SFLOW_PORT):
        """
        Args:
            as_map: AsMap snapshot
            pseudonymizer: Pseudonymizer for the run
            port: UDP port sFlow datagrams are sent to
        """
        self.as_map = as_map
        self.pseudonymizer = pseudonymizer
        self.port = port
        self.decoder = FrameDecoder()
        self.stats = IngestStats()

    def decode_datagram(self, data, received_at=None):
        """
        Decode one datagram; every sample gets the datagram arrival time.

        Returns:
            (list of SampledPacket, IngestStats delta)
        """
        received_at = time.time() if received_at is None else received_at
        datagram = parse_datagram(data)
        delta = IngestStats(datagrams_seen=1, bytes_read=len(data),
                            samples_rejected=datagram.rejected,
                            counter_samples=datagram.counter_samples)
        packets = []
        for record in datagram.samples:
            try:
                frame = self.decoder.decode(record.raw_header, received_at,
                                            record.frame_length_original,
                                            record.sampling_rate_reciprocal,
                                            datagram.agent_address)
            except FrameDecodeError as exc:
                logger.warning("sample %d from %s rejected: %s",
                               record.sequence_number, datagram.agent_address, exc)
                delta.samples_rejected += 1
                continue
            packets.append(tag_and_anonymize(frame, self.as_map, self.pseudonymizer))
            delta.samples_decoded += 1
        self.stats = self.stats + delta
        return packets, delta

    def _decode_or_drop(self, data, received_at, origin):
        """decode_datagram for a stream: a broken datagram is counted and skipped."""
        try:
            packets, _ = self.decode_datagram(data, received_at)
        except DatagramError as exc:
            logger.warning("datagram %s dropped: %s", origin, exc)
            self.stats = self.stats + IngestStats(bytes_read=len(data), datagrams_rejected=1)
            return []
        return packets

    def decode_capture(self, path):
        """Yield packets from sFlow datagrams recorded in a pcap of collector traffic."""
        outer = FrameDecoder(snap=None)
        for number, captured in enumerate(iter_pcap_frames(path, snap=None), 1):
            try:
                frame = outer.decode(captured.frame, captured.timestamp)
            except FrameDecodeError:
                continue
            if frame.transport != Transport.UDP or frame.dst_port != self.port:
                continue
            yield from self._decode_or_drop(frame.payload, captured.timestamp,
                                            f"in {path} frame {number}")

    def listen(self, host="", count=None, duration=None, bufsize=65535):
        """
        Receive datagrams on the UDP port and yield decoded packets.

        Args:
            host: Address to bind
            count: Stop after this many datagrams
            duration: Stop after this many seconds
        """
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.bind((host, self.port))
        deadline = time.monotonic() + duration if duration else None
        logger.info("Listening for sFlow on %s:%d", host or "*", self.port)
        received = 0
        try:
            while count is None or received < count:
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    sock.settimeout(remaining)
                try:
                    data, sender = sock.recvfrom(bufsize)
                except socket.timeout:
                    break
                received += 1
                yield from self._decode_or_drop(data, None,
                                                f"#{received} from {sender[0]}")
        finally:
            sock.close()


def decode_sflow_datagram(data, as_map, pseudonymizer, received_at=None):
    """Decode a single datagram; returns (packets, IngestStats delta)."""
    return SflowIngestor(as_map, pseudonymizer).decode_datagram(data, received_at)


def write_pcap(frames, path):
    """Write CapturedFrame records to an Ethernet pcap file."""
    writer = PcapWriter(path, linktype=LINKTYPE_ETHERNET, sync=False)
    count = 0
    try:
        for captured in frames:
            packet = Ether(captured.frame)
            packet.time = captured.timestamp
            packet.wirelen = captured.frame_length
            writer.write(packet)
            count += 1
    finally:
        writer.close()
    return count


def write_sflow_pcap(datagrams, path, agent="192.0.2.1", collector="192.0.2.100",
                     port=SFLOW_PORT):
    """Record (arrival_time, datagram) pairs as UDP traffic to a collector."""
    writer = PcapWriter(path, linktype=LINKTYPE_ETHERNET, sync=False)
    count = 0
    try:
        for arrival, datagram in datagrams:
            packet = Ether(src=AGENT_MAC, dst=COLLECTOR_MAC) / IP(src=agent, dst=collector) \
                / UDP(sport=port, dport=port) / Raw(load=datagram)
            packet.time = arrival
            writer.write(packet)
            count += 1
    finally:
        writer.close()
    return count
