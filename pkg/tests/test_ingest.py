import struct

import pytest
from scapy.layers.inet import IP, TCP, UDP
from scapy.layers.l2 import ARP, Dot1Q, Ether
from scapy.packet import Raw

from src.errors import InputNotFoundError, PcapFormatError
from src.ingest import (CapturedFrame, FrameDecodeError, FrameDecoder, SflowIngestor,
                        decode_pcap, decode_sflow_datagram, iter_pcap_frames, write_pcap,
                        write_sflow_pcap)
from src.model import Transport
from src.sflow import SflowEncoder, encode_counter_datagram
from src.synth import TrafficProfile, decode_frames, generate

MODBUS = bytes.fromhex("000100000006010600010003")
ETHER = Ether(src="02:00:00:00:00:01", dst="02:00:00:00:00:02")


def _tcp_frame(payload=MODBUS, dport=502):
    return bytes(ETHER / IP(src="198.51.100.10", dst="203.0.113.20")
                 / TCP(sport=50000, dport=dport, flags="PA") / Raw(load=payload))


def _stream_frames(seconds=40):
    # 10 Modbus (3 packets) plus 10 MQTT (2 packets) transactions per second
    return list(generate(TrafficProfile.modbus_and_mqtt(duration_seconds=seconds)).captured_frames())


def test_decode_tcp_frame():
    frame = FrameDecoder().decode(_tcp_frame(), 5.0)
    assert (frame.src_ip, frame.dst_ip) == ("198.51.100.10", "203.0.113.20")
    assert (frame.src_port, frame.dst_port) == (50000, 502)
    assert frame.transport is Transport.TCP
    assert frame.tcp_flags == 0x18
    assert frame.payload == MODBUS
    assert frame.captured_length == frame.frame_length == 66


def test_decode_vlan_tagged_udp():
    raw = bytes(ETHER / Dot1Q(vlan=12) / IP(src="192.0.2.66", dst="203.0.113.20")
                / UDP(sport=40000, dport=47808) / Raw(load=b"\x81\x0b\x00\x0c"))
    frame = FrameDecoder().decode(raw, 0.0)
    assert frame.transport is Transport.UDP
    assert frame.dst_port == 47808
    assert frame.payload == b"\x81\x0b\x00\x0c"


def test_ethernet_padding_is_not_payload():
    raw = bytes(ETHER / IP(src="198.51.100.10", dst="203.0.113.20")
                / TCP(sport=50000, dport=502, flags="A")).ljust(60, b"\x00")
    frame = FrameDecoder().decode(raw, 0.0)
    assert frame.payload == b""
    assert frame.captured_length == 60


def test_long_frame_truncated_to_128():
    raw = _tcp_frame(payload=bytes(300))
    frame = FrameDecoder().decode(raw, 0.0)
    assert frame.captured_length == 128
    assert frame.frame_length == len(raw)
    assert len(frame.payload) == 128 - 54
    assert frame.to_packet().truncated


def test_non_ip_frame_is_other():
    raw = bytes(Ether(type=0x0806) / ARP())
    frame = FrameDecoder().decode(raw, 0.0)
    assert frame.transport is Transport.OTHER
    assert frame.src_ip == frame.dst_ip == ""
    packet = frame.to_packet()
    assert packet.src.pseudonym == "-"


@pytest.mark.parametrize("raw", [
    b"\x00" * 10,
    bytes(ETHER / Dot1Q(vlan=1) / Dot1Q(vlan=2) / IP() / UDP()),
])
def test_undecodable_frames(raw):
    with pytest.raises(FrameDecodeError):
        FrameDecoder().decode(raw, 0.0)


def test_pcap_round_trip(tmp_path, as_map, pseudonymizer):
    path = str(tmp_path / "trace.pcap")
    frames = [CapturedFrame(1578960000.125, _tcp_frame(), 66),
              CapturedFrame(1578960000.5, _tcp_frame(payload=bytes(300)), 354)]
    assert write_pcap(frames, path) == 2
    read = list(iter_pcap_frames(path))
    assert [f.timestamp for f in read] == pytest.approx([1578960000.125, 1578960000.5])
    assert len(read[1].frame) == 128
    assert read[1].frame_length == 354

    packets = list(decode_pcap(path, as_map, pseudonymizer, rate_reciprocal=4096))
    assert len(packets) == 2
    assert packets[0].src.pseudonym == pseudonymizer.pseudonymize("198.51.100.10")
    assert packets[0].src.asn == 64501
    assert packets[0].sampling_rate_reciprocal == 4096
    assert packets[1].truncated


def test_pcap_problems(tmp_path, as_map, pseudonymizer):
    with pytest.raises(InputNotFoundError):
        list(iter_pcap_frames(str(tmp_path / "missing.pcap")))
    garbage = tmp_path / "garbage.pcap"
    garbage.write_bytes(b"not a pcap file")
    with pytest.raises(PcapFormatError):
        list(decode_pcap(str(garbage), as_map, pseudonymizer))


def test_single_datagram(as_map, pseudonymizer):
    encoder = SflowEncoder()
    (arrival, data), = encoder.encode([CapturedFrame(7.0, _tcp_frame(), 66, 4096)])
    packets, delta = decode_sflow_datagram(data, as_map, pseudonymizer, arrival)
    assert len(packets) == 1
    assert packets[0].timestamp == 7.0
    assert packets[0].agent == "192.0.2.1"
    assert delta.samples_decoded == 1 and delta.datagrams_seen == 1


def test_ingestor_accumulates_stats(as_map, pseudonymizer):
    ingestor = SflowIngestor(as_map, pseudonymizer)
    (_, data), = SflowEncoder().encode([CapturedFrame(1.0, _tcp_frame(), 66)])
    ingestor.decode_datagram(data, 1.0)
    ingestor.decode_datagram(encode_counter_datagram(), 2.0)
    stats = ingestor.stats.as_dict()
    assert stats["datagrams_seen"] == 2
    assert stats["samples_decoded"] == 1
    assert stats["counter_samples"] == 1


def test_broken_sample_header_is_rejected(as_map, pseudonymizer):
    (_, data), = SflowEncoder().encode([CapturedFrame(1.0, b"\x00" * 10, 60)])
    packets, delta = decode_sflow_datagram(data, as_map, pseudonymizer, 1.0)
    assert packets == []
    assert delta.samples_rejected == 1


def _comparable(packet):
    record = packet.to_record()
    del record["agent"]
    return record


def _assert_sflow_round_trip(frames, as_map, pseudonymizer):
    direct = decode_frames(frames, as_map, pseudonymizer)
    via_sflow = decode_frames(frames, as_map, pseudonymizer, via_sflow=True)
    assert len(direct) == len(via_sflow) == len(frames)
    for left, right in zip(direct, via_sflow):
        assert _comparable(left) == _comparable(right)
        assert right.captured_length <= 128


def test_sflow_round_trip_preserves_packets(as_map, pseudonymizer):
    frames = _stream_frames(40)
    assert len(frames) == 2000
    _assert_sflow_round_trip(frames, as_map, pseudonymizer)


@pytest.mark.slow
def test_sflow_round_trip_ten_thousand_packets(as_map, pseudonymizer):
    frames = _stream_frames(200)
    assert len(frames) == 10000
    _assert_sflow_round_trip(frames, as_map, pseudonymizer)


def test_sflow_capture_replay(tmp_path, as_map, pseudonymizer):
    frames = _stream_frames(2)
    path = str(tmp_path / "sflow.pcap")
    datagrams = list(SflowEncoder().encode(frames))
    assert write_sflow_pcap(datagrams, path) == len(datagrams)
    ingestor = SflowIngestor(as_map, pseudonymizer)
    replayed = list(ingestor.decode_capture(path))
    direct = decode_frames(frames, as_map, pseudonymizer)
    assert [p.src_port for p in replayed] == [p.src_port for p in direct]
    assert [p.payload_prefix for p in replayed] == [p.payload_prefix for p in direct]
    assert ingestor.stats.datagrams_seen == len(datagrams)


def test_broken_datagrams_do_not_stop_the_replay(tmp_path, as_map, pseudonymizer):
    frames = _stream_frames(2)
    good = list(SflowEncoder().encode(frames))
    version_4 = struct.pack("!II", 4, 1) + bytes(20)
    datagrams = [(0.5, version_4)] + good[:1] + [(good[0][0], b"\x00\x00")] + good[1:]
    path = str(tmp_path / "mixed.pcap")
    write_sflow_pcap(datagrams, path)
    ingestor = SflowIngestor(as_map, pseudonymizer)
    replayed = list(ingestor.decode_capture(path))
    direct = decode_frames(frames, as_map, pseudonymizer)
    assert [p.payload_prefix for p in replayed] == [p.payload_prefix for p in direct]
    stats = ingestor.stats.as_dict()
    assert stats["datagrams_rejected"] == 2
    assert stats["datagrams_seen"] == len(good)
    assert stats["samples_decoded"] == len(frames)
