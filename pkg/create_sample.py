#!/usr/bin/env python3
"""
Generate a small demonstration data set for testing.

Writes a key, an AS map, a full-packet pcap mixing industrial, scanner and
IT traffic, an intel file and a baseline export into sample_data/.
"""
import json
import os
import struct
import sys

from scapy.layers.inet import IP, TCP, UDP
from scapy.layers.l2 import Ether
from scapy.packet import Raw

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.ingest import CapturedFrame, write_pcap
from src.intel import Classification, IntelRecord, write_intel
from src.synth import DEFAULT_START, TrafficProfile, generate

SAMPLE_KEY = "000102030405060708090a0b0c0d0e0f"
SCANNER = "192.0.2.66"
RESEARCH_SCANNER = "192.0.2.67"
ETHER = Ether(src="02:00:00:00:00:03", dst="02:00:00:00:00:02")


def _frame(timestamp, packet):
    data = bytes(packet)
    return CapturedFrame(timestamp, data, len(data))


def create_sample_frames():
    """One minute of Modbus/MQTT traffic plus scans, HTTP and TLS."""
    profile = TrafficProfile.modbus_and_mqtt(modbus_rate=1.0, mqtt_rate=1.0, duration_seconds=60)
    frames = list(generate(profile).captured_frames())
    server = profile.server
    t = DEFAULT_START

    # SYN sweep of industrial ports
    for offset, port in enumerate((502, 102, 20000, 2404, 44818)):
        frames.append(_frame(t + 5 + offset, ETHER / IP(src=SCANNER, dst=server)
                             / TCP(sport=41000 + offset, dport=port, flags="S")))
    # Ethernet/IP List Identity
    list_identity = struct.pack("<HHII8sI", 0x0063, 0, 0, 0, b"\x00" * 8, 0)
    frames.append(_frame(t + 12, ETHER / IP(src=RESEARCH_SCANNER, dst=server)
                         / TCP(sport=43000, dport=44818, flags="PA") / Raw(load=list_identity)))
    # BACnet readProperty of the device object name
    read_property = bytes.fromhex("810a001101040005010c0c023fffff194d")
    frames.append(_frame(t + 14, ETHER / IP(src=RESEARCH_SCANNER, dst=server)
                         / UDP(sport=47808, dport=47808) / Raw(load=read_property)))
    # Web traffic between two non-industrial hosts
    for offset in range(3):
        frames.append(_frame(t + 20 + offset, ETHER
                             / IP(src="198.51.100.30", dst="198.51.100.40")
                             / TCP(sport=52000, dport=80, flags="PA")
                             / Raw(load=b"GET / HTTP/1.1\r\nHost: example.net\r\n\r\n")))
    tls = bytes.fromhex("1703030020") + bytes(32)
    frames.append(_frame(t + 30, ETHER / IP(src="198.51.100.30", dst="198.51.100.50")
                         / TCP(sport=52001, dport=443, flags="PA") / Raw(load=tls)))
    # the Modbus client also browses the web
    frames.append(_frame(t + 31, ETHER / IP(src=profile.client, dst="198.51.100.50")
                         / TCP(sport=52002, dport=443, flags="PA") / Raw(load=tls)))
    frames.sort(key=lambda f: f.timestamp)
    return frames


def create_sample_intel():
    return [
        IntelRecord(SCANNER, Classification.MALICIOUS, "unknown-botnet", "NL", DEFAULT_START,
                    "sample: repeated SYN sweeps"),
        IntelRecord(RESEARCH_SCANNER, Classification.BENIGN, "research-scanner", "US",
                    DEFAULT_START, "sample: published scanning project"),
    ]


def create_sample_baseline():
    return [
        {"schema": 1, "ip": "203.0.113.20", "asn": "AS64500",
         "ports": [{"port": 502, "transport": "tcp"}, {"port": 1883, "transport": "tcp"}],
         "tags": ["ics"], "product": ["Modbus gateway"], "banner": "",
         "vulns": [{"cve": "CVE-2015-0001", "cvss": 7.5}]},
        {"schema": 1, "ip": "203.0.113.80", "asn": "AS64500",
         "ports": [{"port": 47808, "transport": "udp"}],
         "tags": [], "product": ["BACnet controller"], "banner": "", "vulns": []},
        {"schema": 1, "ip": "198.51.100.90", "asn": "AS64501",
         "ports": [{"port": 10001, "transport": "tcp"}],
         "tags": [], "product": [], "banner": "I20100 IN-TANK INVENTORY", "vulns": []},
    ]


if __name__ == '__main__':
    os.makedirs('sample_data', exist_ok=True)

    with open('sample_data/key.hex', 'w') as handle:
        handle.write(SAMPLE_KEY + "\n")
    with open('sample_data/asmap.txt', 'w') as handle:
        handle.write("# CIDR, ASN, area\n203.0.113.0/24, 64500, 1\n"
                     "198.51.100.0/24, 64501, 1\n192.0.2.0/24, 64502, 0\n")

    frames = create_sample_frames()
    write_pcap(frames, 'sample_data/capture.pcap')
    write_intel(create_sample_intel(), 'sample_data/intel.jsonl')
    with open('sample_data/baseline.jsonl', 'w') as handle:
        for record in create_sample_baseline():
            handle.write(json.dumps(record) + "\n")

    print(f"Sample data set created in sample_data/ ({len(frames)} frames)")
    print("Try: python icswatch.py ingest pcap sample_data/capture.pcap "
          "--key-file sample_data/key.hex --as-map sample_data/asmap.txt -o sample_run/")
