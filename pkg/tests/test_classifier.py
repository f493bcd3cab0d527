import numpy as np
import pytest

from conftest import CLIENT, SCANNER, SERVER, SYN, make_packet
from src.classifier import (SCANNER_BASIS_INTEL, Basis, Classifier, HostRole,
                            PipelineAccounting, Verdict, VerdictLabel, filter_active_hosts,
                            host_packet_counts, host_roles, read_verdicts, scan_kind_breakdown,
                            security_summary, write_verdicts)
from src.errors import InconsistentLabelError, SchemaError
from src.intel import Classification, IntelRecord, IntelStore
from src.it_recognizer import ItProtocolLabel
from src.model import HostId, SamplesWriter, TcpFlags, read_samples
from src.probes import ProbeKind
from src.registry import ProtocolId
from src.sampling_model import SamplingModel

MODBUS_REQUEST = bytes.fromhex("000100000006010600010003")
MQTT_PUBLISH = bytes.fromhex("300a0003612f6268656c6c6f")
LIST_IDENTITY = bytes.fromhex("63000000" + "00" * 20)
HTTP_GET = b"GET / HTTP/1.1\r\nHost: plc\r\n\r\n"
TLS_RECORD = bytes.fromhex("1703030020") + bytes(32)
ACK = int(TcpFlags.ACK)

BROKER = HostId("h00000010", 64500, True)
SENSOR = HostId("h00000011", 64501, True)


def _intel(*hosts):
    return IntelStore([IntelRecord(h.pseudonym, Classification.MALICIOUS, "botnet", "NL", 0.0,
                                   "test") for h in hosts])


def _only(packet, **kwargs):
    result = Classifier(**kwargs).classify([packet])
    assert len(result.verdicts) == 1
    return result.verdicts[0], result.accounting


def test_legitimate_modbus_request():
    verdict, accounting = _only(make_packet(MODBUS_REQUEST))
    assert verdict.label is VerdictLabel.LEGITIMATE_ICS
    assert verdict.protocol is ProtocolId.MODBUS_TCP
    assert set(verdict.basis) == {Basis.PORT_MATCH, Basis.DISSECT_OK, Basis.CROSS_VALIDATED}
    assert accounting.s1_legitimate == accounting.s3_total_ics == 1


def test_response_matches_on_source_port():
    packet = make_packet(MODBUS_REQUEST, sport=502, dport=50000, src=SERVER, dst=CLIENT)
    verdict, _ = _only(packet)
    assert verdict.label is VerdictLabel.LEGITIMATE_ICS


def test_intel_source_is_a_step1_scanner():
    packet = make_packet(LIST_IDENTITY, dport=44818, src=SCANNER)
    verdict, accounting = _only(packet, intel=_intel(SCANNER))
    assert verdict.label is VerdictLabel.ICS_SCANNER
    assert Basis.INTEL_SCANNER in verdict.basis
    assert verdict.probe is ProbeKind.PROTOCOL_SPECIFIC_REQUEST
    assert accounting.s1_scanner == 1 and accounting.s1_legitimate == 0


def test_intel_matches_source_only():
    packet = make_packet(MODBUS_REQUEST, dst=SCANNER)
    verdict, _ = _only(packet, intel=_intel(SCANNER))
    assert verdict.label is VerdictLabel.LEGITIMATE_ICS


@pytest.mark.parametrize("payload, dport, it_label", [
    (HTTP_GET, 502, ItProtocolLabel.HTTP),
    (TLS_RECORD, 8883, ItProtocolLabel.TLS),
    (TLS_RECORD, 5671, ItProtocolLabel.TLS),
])
def test_it_traffic_on_industrial_ports(payload, dport, it_label):
    verdict, accounting = _only(make_packet(payload, dport=dport))
    assert verdict.label is VerdictLabel.NON_ICS
    assert verdict.it_label is it_label
    assert accounting.s3_total_ics == 0


def test_syn_probe_is_a_step2_scanner():
    packet = make_packet(b"", dport=502, flags=SYN, src=SCANNER)
    verdict, accounting = _only(packet)
    assert verdict.label is VerdictLabel.ICS_SCANNER
    assert verdict.probe is ProbeKind.SYN_ONLY
    assert Basis.PROBE_SIGNATURE in verdict.basis
    assert accounting.s2_scanner == 1 and accounting.s2_residual == 1


def test_intel_only_basis_ignores_signatures():
    packet = make_packet(b"", dport=502, flags=SYN, src=SCANNER)
    verdict, accounting = _only(packet, scanner_basis=SCANNER_BASIS_INTEL)
    assert verdict.label is VerdictLabel.INDETERMINATE
    assert verdict.probe is ProbeKind.SYN_ONLY
    assert accounting.s2_scanner == 0


def test_bare_ack_is_indeterminate():
    verdict, _ = _only(make_packet(b"", flags=ACK))
    assert verdict.label is VerdictLabel.INDETERMINATE


def test_port_only_protocol_goes_to_step2():
    verdict, accounting = _only(make_packet(b"\x01\x02\x03\x04", dport=2455))
    assert verdict.protocol is ProtocolId.CODESYS
    assert accounting.s1_dissected == 0 and accounting.s2_residual == 1


def test_unmatched_ports_are_counted_but_not_labelled():
    result = Classifier().classify([make_packet(HTTP_GET, dport=80), make_packet(MODBUS_REQUEST)])
    assert result.accounting.total == 2
    assert result.accounting.after_port_filter == 1
    assert [v.ref for v in result.verdicts] == [1]


def test_unknown_scanner_basis():
    with pytest.raises(ValueError):
        Classifier(scanner_basis="signatures")


def test_verdict_basis_validation():
    with pytest.raises(ValueError):
        Verdict(0, VerdictLabel.LEGITIMATE_ICS, ProtocolId.MODBUS_TCP, (Basis.PORT_MATCH,))
    with pytest.raises(ValueError):
        Verdict(0, VerdictLabel.ICS_SCANNER, ProtocolId.MODBUS_TCP,
                (Basis.PORT_MATCH, Basis.CROSS_VALIDATED))


def test_conflicting_labels_raise():
    legitimate = Verdict(0, VerdictLabel.LEGITIMATE_ICS, ProtocolId.MODBUS_TCP,
                         (Basis.PORT_MATCH, Basis.DISSECT_OK, Basis.CROSS_VALIDATED))
    indeterminate = Verdict(0, VerdictLabel.INDETERMINATE, ProtocolId.MODBUS_TCP,
                            (Basis.PORT_MATCH, Basis.CROSS_VALIDATED))
    accounting = PipelineAccounting(total=1, after_port_filter=1, s1_dissected=1,
                                    s1_crossvalidated=1, s1_legitimate=1)
    with pytest.raises(InconsistentLabelError):
        Classifier.step3_merge(accounting, [legitimate], [indeterminate])


def test_broken_accounting_raises():
    accounting = PipelineAccounting(total=1, after_port_filter=2)
    assert accounting.violations()
    with pytest.raises(InconsistentLabelError):
        accounting.check()


def test_accounting_rows():
    accounting = PipelineAccounting(10, 8, 6, 5, 1, 4, 2, 2, 1, 2, 6)
    assert accounting.violations() == []
    rows = dict((stage, (count, pct)) for stage, count, pct in accounting.rows())
    assert rows["After port-based filtering"] == (8, 80.0)
    assert rows["Step 1 (c) scanners"][1] == pytest.approx(100.0 / 6)
    assert rows["Step 3 total ICS traffic"] == (6, 75.0)
    assert all(pct == 0.0 for _, _, pct in PipelineAccounting().rows())


def _random_corpus(rng, size):
    hosts = [CLIENT, SERVER, SCANNER, BROKER, SENSOR]
    templates = [
        lambda s, d: make_packet(MODBUS_REQUEST, src=s, dst=d),
        lambda s, d: make_packet(MQTT_PUBLISH, dport=1883, src=s, dst=d),
        lambda s, d: make_packet(LIST_IDENTITY, dport=44818, src=s, dst=d),
        lambda s, d: make_packet(HTTP_GET, dport=502, src=s, dst=d),
        lambda s, d: make_packet(HTTP_GET, dport=80, src=s, dst=d),
        lambda s, d: make_packet(TLS_RECORD, dport=8883, src=s, dst=d),
        lambda s, d: make_packet(b"", dport=20000, flags=SYN, src=s, dst=d),
        lambda s, d: make_packet(b"", dport=102, flags=ACK, src=s, dst=d),
        lambda s, d: make_packet(b"", dport=47808, transport="udp", src=s, dst=d),
        lambda s, d: make_packet(b"\x00\x01", dport=2455, src=s, dst=d),
        lambda s, d: make_packet(bytes(8), dport=5353, transport="udp", src=s, dst=d),
    ]
    packets = []
    for _ in range(size):
        src, dst = rng.choice(len(hosts), size=2, replace=False)
        template = templates[int(rng.integers(len(templates)))]
        packets.append(template(hosts[src], hosts[dst]))
    return packets


@pytest.mark.parametrize("seed", range(50))
def test_accounting_identities_on_random_corpora(seed):
    rng = np.random.default_rng(seed)
    packets = _random_corpus(rng, int(rng.integers(1, 200)))
    intel = _intel(SCANNER) if seed % 2 else IntelStore()
    result = Classifier(intel=intel).classify(packets)
    accounting = result.accounting
    assert accounting.violations() == []
    assert accounting.total == len(packets)
    assert len(result.verdicts) == accounting.after_port_filter
    labels = [v.label for v in result.verdicts]
    assert labels.count(VerdictLabel.LEGITIMATE_ICS) == accounting.s1_legitimate
    assert labels.count(VerdictLabel.ICS_SCANNER) == accounting.s3_total_scanners
    assert accounting.s3_total_ics == accounting.s1_legitimate + accounting.s3_total_scanners
    assert [v.ref for v in result.verdicts] == sorted({v.ref for v in result.verdicts})


def _mixed_traffic():
    return [
        make_packet(MODBUS_REQUEST, src=CLIENT, dst=SERVER),
        make_packet(b"", dport=502, flags=SYN, src=SCANNER, dst=SERVER),
        make_packet(HTTP_GET, dport=80, src=CLIENT, dst=BROKER),
        make_packet(MQTT_PUBLISH, dport=8883, src=SENSOR, dst=BROKER),
        make_packet(MODBUS_REQUEST, src=SCANNER, dst=SERVER),
    ]


def test_host_roles():
    packets = _mixed_traffic()
    verdicts = Classifier(intel=_intel(SCANNER)).classify(packets).verdicts
    roles = {role.host: role for role in host_roles(packets, verdicts)}
    assert roles[CLIENT].protocols_legitimate == {ProtocolId.MODBUS_TCP}
    assert roles[CLIENT].has_it_traffic
    assert roles[SERVER].is_ics and not roles[SERVER].has_it_traffic
    assert roles[SCANNER].protocols_scanned == {ProtocolId.MODBUS_TCP}
    assert not roles[SCANNER].is_ics
    assert roles[BROKER].protocols_legitimate == {ProtocolId.MQTT}
    assert roles[BROKER].has_it_traffic
    assert list(roles) == sorted(roles)


def test_security_summary():
    packets = _mixed_traffic()
    verdicts = Classifier(intel=_intel(SCANNER)).classify(packets).verdicts
    summary = security_summary(packets, verdicts)
    assert summary["hosts"] == 4
    assert summary["insecure_hosts"] == 2
    assert summary["insecure_share"] == 50.0
    assert {name: pct for name, _, pct in summary["protocols"]} == {"Modbus/TCP": 50.0,
                                                                   "MQTT": 50.0}


def test_scan_kind_breakdown():
    packets = _mixed_traffic()
    verdicts = Classifier(intel=_intel(SCANNER)).classify(packets).verdicts
    breakdown = scan_kind_breakdown(packets, verdicts)
    assert breakdown["packets"] == 2
    assert breakdown["hosts"] == 1
    assert {kind: pct for kind, _, pct in breakdown["kinds"]} == {"SynOnly": 50.0,
                                                                 "IntelOnly": 50.0}
    assert breakdown["protocols"] == [("Modbus/TCP", 2, 100.0)]


def test_filter_active_hosts():
    model = SamplingModel(days=1, sampled_n=10_000, rate_reciprocal=4096)
    roles = [HostRole(CLIENT, {ProtocolId.MODBUS_TCP}), HostRole(SERVER, {ProtocolId.MODBUS_TCP})]
    counts = {CLIENT: 1, SERVER: 2}
    assert filter_active_hosts(roles, counts, model, 0) == roles
    # one sample stands for ~2.8 packets/minute over a day at 1:4096
    assert [r.host for r in filter_active_hosts(roles, counts, model, 5.0)] == [SERVER]


def test_host_packet_counts():
    counts = host_packet_counts(_mixed_traffic())
    assert counts[SERVER] == 3
    assert counts[SCANNER] == 2


def test_verdict_file_round_trip(tmp_path):
    packets = _mixed_traffic()
    verdicts = Classifier(intel=_intel(SCANNER)).classify(packets).verdicts
    path = str(tmp_path / "verdicts.jsonl")
    write_verdicts(verdicts, path)
    assert read_verdicts(path) == verdicts


def test_bad_verdict_record(tmp_path):
    path = tmp_path / "verdicts.jsonl"
    path.write_text('{"ref": 0, "label": "Maybe", "basis": []}\n')
    with pytest.raises(SchemaError):
        read_verdicts(str(path))


@pytest.mark.parametrize("seed", range(10))
def test_classifying_a_samples_file_twice_gives_the_same_result(tmp_path, seed):
    rng = np.random.default_rng(100 + seed)
    path = str(tmp_path / "samples.jsonl")
    with SamplesWriter(path) as writer:
        writer.write_all(_random_corpus(rng, int(rng.integers(1, 200))))
    classifier = Classifier(intel=_intel(SCANNER))
    first = classifier.classify(list(read_samples(path)))
    second = classifier.classify(list(read_samples(path)))
    assert first.accounting.as_dict() == second.accounting.as_dict()
    assert first.verdicts == second.verdicts


@pytest.mark.parametrize("seed", range(20))
def test_intel_never_adds_legitimate_packets(seed):
    rng = np.random.default_rng(200 + seed)
    packets = _random_corpus(rng, int(rng.integers(1, 200)))
    baseline = Classifier().classify(packets).accounting
    for host in (CLIENT, SERVER, SCANNER, BROKER, SENSOR):
        flagged = Classifier(intel=_intel(host)).classify(packets).accounting
        assert flagged.s1_legitimate <= baseline.s1_legitimate
        assert flagged.s3_total_scanners >= baseline.s3_total_scanners


def test_atg_query_counts_on_tcp_only():
    query = bytes.fromhex("014932303130300d0a")
    over_udp = Classifier().classify([make_packet(query, dport=10001, transport="udp")])
    assert over_udp.verdicts == []
    assert over_udp.accounting.after_port_filter == 0
    verdict, _ = _only(make_packet(query, dport=10001))
    assert verdict.label is VerdictLabel.ICS_SCANNER
    assert verdict.protocol is ProtocolId.ATG
    assert verdict.probe is ProbeKind.PROTOCOL_SPECIFIC_REQUEST
