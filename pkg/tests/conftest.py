import os

import pytest

from src.anonymize import AsMap, Pseudonymizer
from src.model import HostId, SampledPacket, TcpFlags, Transport

TEST_KEY = bytes(range(16))
TEST_KEY_HEX = TEST_KEY.hex()
FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")

PA = int(TcpFlags.PSH | TcpFlags.ACK)
SYN = int(TcpFlags.SYN)

CLIENT = HostId("h00000001", 64501, True)
SERVER = HostId("h00000002", 64500, True)
SCANNER = HostId("h00000066", 64502, False)


def make_packet(payload=b"", dport=502, sport=50000, transport="tcp", flags=None,
                src=CLIENT, dst=SERVER, ts=0.0, truncated=False, rate=4096):
    """A SampledPacket as the ingest stage would produce it."""
    transport = Transport(transport)
    if flags is None:
        flags = PA if transport is Transport.TCP else 0
    header = 14 + 20 + (20 if transport is Transport.TCP else 8)
    captured = min(header + len(payload), 128)
    return SampledPacket(
        timestamp=ts, src=src, dst=dst, src_port=sport, dst_port=dport,
        transport=transport, tcp_flags=flags, payload_prefix=bytes(payload),
        sampling_rate_reciprocal=rate, agent="test", proto_code=6 if transport is Transport.TCP
        else 17, captured_length=captured,
        frame_length=captured + (200 if truncated else 0),
    )


def load_golden_corpus():
    """Rows of (protocol name, transport, status, payload) from the golden corpus."""
    rows = []
    with open(os.path.join(FIXTURES, "golden_corpus.txt"), encoding="utf-8") as handle:
        for line in handle:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, transport, status, data = (part.strip() for part in line.split("|"))
            rows.append((name, transport, status, bytes.fromhex(data)))
    return rows


@pytest.fixture
def key():
    return TEST_KEY


@pytest.fixture
def pseudonymizer():
    return Pseudonymizer(TEST_KEY)


@pytest.fixture
def as_map():
    return AsMap([
        ("203.0.113.0/24", 64500, True),
        ("198.51.100.0/24", 64501, True),
        ("192.0.2.0/24", 64502, False),
    ])


@pytest.fixture
def key_file(tmp_path):
    path = tmp_path / "key.hex"
    path.write_text(TEST_KEY_HEX + "\n")
    return str(path)


@pytest.fixture
def as_map_file(tmp_path):
    path = tmp_path / "asmap.txt"
    path.write_text("# CIDR, ASN, area\n203.0.113.0/24, 64500, 1\n"
                    "198.51.100.0/24, 64501, 1\n192.0.2.0/24, 64502, 0\n")
    return str(path)
