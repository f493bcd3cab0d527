from collections import Counter

import pytest

from conftest import load_golden_corpus, make_packet
from src.dissectors import (DISSECTORS, DissectionStatus, dissect_ics, dissect_payload,
                            minimal_header)
from src.errors import DomainError
from src.registry import DEFAULT_REGISTRY, DissectorTier, ProtocolId

CORPUS = load_golden_corpus()
FULL_TIER = [e.protocol for e in DEFAULT_REGISTRY if e.dissector_tier is DissectorTier.FULL]


def _id(row):
    name, transport, status, data = row
    return f"{name}-{transport}-{status}-{data[:6].hex()}"


@pytest.mark.parametrize("row", CORPUS, ids=_id)
def test_golden_corpus(row):
    name, transport, status, data = row
    result = dissect_payload(data, ProtocolId.from_name(name), transport, complete=True)
    assert result.status is DissectionStatus(status), result.detail


def test_corpus_covers_every_full_tier_protocol():
    well_formed = Counter(n for n, _, s, _ in CORPUS if s == "WellFormed")
    malformed = Counter(n for n, _, s, _ in CORPUS if s == "Malformed")
    for protocol in FULL_TIER:
        assert well_formed[protocol.name] >= 3, protocol
        assert malformed[protocol.name] >= 2, protocol


def test_every_full_tier_protocol_has_a_dissector():
    assert set(FULL_TIER) == set(DISSECTORS)


@pytest.mark.parametrize("row", [r for r in CORPUS if r[2] == "WellFormed"], ids=_id)
def test_truncation_below_minimal_header_is_insufficient(row):
    name, transport, _, data = row
    protocol = ProtocolId.from_name(name)
    for size in range(1, minimal_header(protocol, transport)):
        result = dissect_payload(data[:size], protocol, transport, complete=False)
        assert result.status is DissectionStatus.INSUFFICIENT_DATA, (size, result.detail)


def test_empty_payload_is_not_applicable():
    result = dissect_payload(b"", ProtocolId.MODBUS_TCP)
    assert result.status is DissectionStatus.NOT_APPLICABLE


def test_truncated_modbus_length_is_not_malformed():
    # MBAP announces 200 bytes; only 12 were captured
    payload = bytes.fromhex("0001000000c8011000000060")
    assert dissect_payload(payload, ProtocolId.MODBUS_TCP, complete=False).well_formed
    assert dissect_payload(payload, ProtocolId.MODBUS_TCP, complete=True).status \
        is DissectionStatus.MALFORMED


def test_mqtt_remaining_length_cut_by_capture():
    payload = bytes.fromhex("30ff")  # continuation bit set, next byte missing
    assert dissect_payload(payload, ProtocolId.MQTT, complete=False).status \
        is DissectionStatus.INSUFFICIENT_DATA
    assert dissect_payload(payload, ProtocolId.MQTT, complete=True).status \
        is DissectionStatus.MALFORMED


def test_dissect_ics_uses_packet_transport_and_truncation():
    packet = make_packet(bytes.fromhex("810b000c0120ffff00ff1008"), dport=47808,
                         transport="udp")
    assert dissect_ics(packet, ProtocolId.BACNET_IP).well_formed


def test_dissect_ics_rejects_port_only_protocols():
    packet = make_packet(b"\x00" * 16, dport=2455)
    with pytest.raises(DomainError):
        dissect_ics(packet, ProtocolId.CODESYS)


def test_dissect_payload_without_dissector():
    with pytest.raises(DomainError):
        dissect_payload(b"\x00" * 8, ProtocolId.NIAGARA_FOX)
