import math
import os
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from conftest import CLIENT, SCANNER, SERVER, make_packet
from src.classifier import Classifier, HostRole, VerdictLabel, host_roles
from src.errors import InputNotFoundError, SchemaError
from src.flows import (POPULATION_ICS_PAIRS, BreakdownBasis, FlowRecord, IanaMapping,
                       IanaServices, aggregate, breakdown, ics_pairs_of, it_coexistence,
                       _evict_idle, map_iana, port_churn, quadrants)
from src.it_recognizer import ItProtocolLabel
from src.model import FlowKey, HostId, TcpFlags, Transport
from src.registry import ProtocolId

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
IANA_TABLE = os.path.join(ROOT, "data", "iana_services.csv")

HTTP_GET = b"GET / HTTP/1.1\r\nHost: plc\r\n\r\n"
TLS_RECORD = bytes.fromhex("1703030020") + bytes(32)
MODBUS_REQUEST = bytes.fromhex("000100000006010600010003")
ACK = int(TcpFlags.ACK)


def _flow(a, b, ports, count, label, transport=Transport.TCP):
    key = FlowKey(*sorted([(a, ports[0]), (b, ports[1])]), transport)
    return FlowRecord(key, count, 0.0, 1.0, label)


@pytest.fixture(scope="module")
def services():
    return IanaServices.from_file(IANA_TABLE)


def test_elephant_flow_dominates_packets_not_flows():
    flows = [_flow("a", "b", (50000, 80), 10 ** 6, ItProtocolLabel.HTTP)]
    flows += [_flow("a", "c%d" % i, (50001 + i, 443), 1, ItProtocolLabel.TLS) for i in range(9)]
    by_packets = dict(breakdown(flows, BreakdownBasis.PACKET_BASED, IanaMapping.BEFORE_IANA).shares)
    by_flows = dict(breakdown(flows, BreakdownBasis.FLOW_BASED, IanaMapping.BEFORE_IANA).shares)
    assert by_packets["HTTP"] == pytest.approx(100.0 * 10 ** 6 / (10 ** 6 + 9))
    assert by_flows == {"TLS": 90.0, "HTTP": 10.0}


def test_iana_table(services):
    assert len(services) >= 50
    assert services.lookup(502, "tcp") == "mbap"
    assert services.lookup(443, "udp") == "https"
    assert services.lookup(65000, "tcp") is None


def test_lower_port_mapping(services):
    assert map_iana(_flow("a", "b", (50000, 8443), 1, ItProtocolLabel.GENERIC_TCP),
                    services) == "pcsync-https"
    assert map_iana(_flow("a", "b", (443, 8443), 1, ItProtocolLabel.GENERIC_TCP),
                    services) == "https"
    assert map_iana(_flow("a", "b", (50000, 60000), 1, ItProtocolLabel.GENERIC_TCP),
                    services) is None


def test_mapping_only_renames_generic_labels(services):
    flows = [_flow("a", "b", (50000, 8443), 3, ItProtocolLabel.GENERIC_TCP),
             _flow("a", "c", (50000, 443), 1, ItProtocolLabel.TLS)]
    for flow in flows:
        flow.iana_service = map_iana(flow, services)
    before = dict(breakdown(flows, BreakdownBasis.PACKET_BASED, IanaMapping.BEFORE_IANA).shares)
    after = dict(breakdown(flows, BreakdownBasis.PACKET_BASED, IanaMapping.AFTER_IANA).shares)
    assert before == {"GenericTCP": 75.0, "TLS": 25.0}
    assert after == {"pcsync-https": 75.0, "TLS": 25.0}


def test_iana_table_problems(tmp_path):
    with pytest.raises(InputNotFoundError):
        IanaServices.from_file(str(tmp_path / "none.csv"))
    path = tmp_path / "bad.csv"
    path.write_text("port,transport,service\neighty,tcp,http\n")
    with pytest.raises(SchemaError):
        IanaServices.from_file(str(path))


def test_idle_timeout_splits_flows(services):
    packets = [
        make_packet(HTTP_GET, dport=80, ts=0.0),
        make_packet(b"HTTP/1.1 200 OK\r\n", sport=80, dport=50000, src=SERVER, dst=CLIENT,
                    ts=100.0),
        make_packet(HTTP_GET, dport=80, ts=500.0),
    ]
    flows = aggregate(packets, services=services)
    assert [f.packet_count for f in flows] == [2, 1]
    assert all(f.label is ItProtocolLabel.HTTP for f in flows)
    assert flows[0].iana_service == "http"
    assert (flows[0].first_seen, flows[0].last_seen) == (0.0, 100.0)
    assert len(aggregate(packets, timeout=1000.0)) == 1


def test_flow_label_upgrades_from_generic():
    packets = [make_packet(b"", dport=8080, flags=ACK, ts=0.0),
               make_packet(HTTP_GET, dport=8080, ts=1.0),
               make_packet(b"", dport=8080, flags=ACK, ts=2.0)]
    (flow,) = aggregate(packets)
    assert flow.label is ItProtocolLabel.HTTP


def test_industrial_flows_are_excluded_from_breakdowns():
    packets = [make_packet(MODBUS_REQUEST, ts=0.0), make_packet(HTTP_GET, dport=80, ts=1.0)]
    verdicts = Classifier().classify(packets).verdicts
    flows = aggregate(packets, verdicts)
    assert [f.label for f in flows] == [ProtocolId.MODBUS_TCP, ItProtocolLabel.HTTP]
    assert flows[0].industrial and not flows[1].industrial
    result = breakdown(flows, BreakdownBasis.FLOW_BASED, IanaMapping.BEFORE_IANA)
    assert result.shares == [("HTTP", 100.0)]
    assert result.total == 1


def _ics_and_it_traffic():
    third = HostId("h00000003", 64500, True)
    return [
        make_packet(MODBUS_REQUEST, src=CLIENT, dst=SERVER, ts=0.0),
        make_packet(TLS_RECORD, dport=443, src=CLIENT, dst=SERVER, ts=1.0),
        make_packet(HTTP_GET, dport=80, src=CLIENT, dst=third, ts=2.0),
        make_packet(HTTP_GET, dport=80, sport=50001, src=CLIENT, dst=third, ts=3.0),
    ]


def test_ics_to_ics_population():
    packets = _ics_and_it_traffic()
    verdicts = Classifier().classify(packets).verdicts
    pairs = ics_pairs_of(packets, verdicts)
    assert pairs == {frozenset((CLIENT.pseudonym, SERVER.pseudonym))}
    flows = aggregate(packets, verdicts)
    result = breakdown(flows, BreakdownBasis.PACKET_BASED, IanaMapping.BEFORE_IANA,
                       population=POPULATION_ICS_PAIRS, ics_pairs=pairs)
    assert result.shares == [("TLS", 100.0)]
    overall = dict(breakdown(flows, BreakdownBasis.PACKET_BASED, IanaMapping.BEFORE_IANA).shares)
    assert overall == pytest.approx({"HTTP": 200 / 3, "TLS": 100 / 3})


def test_quadrants():
    packets = _ics_and_it_traffic()
    flows = aggregate(packets, Classifier().classify(packets).verdicts)
    results = quadrants(flows)
    assert len(results) == 4
    assert {(r.basis, r.mapping) for r in results} == {
        (basis, mapping) for basis in BreakdownBasis for mapping in IanaMapping}


def test_port_churn():
    flows = [_flow("a", "b", (50000, 80), 1, ItProtocolLabel.HTTP),
             _flow("a", "b", (50001, 443), 1, ItProtocolLabel.TLS),
             _flow("a", "c", (50000, 443), 1, ItProtocolLabel.TLS),
             _flow("a", "d", (50000, 502), 1, ProtocolId.MODBUS_TCP),
             _flow("a", "d", (50000, 80), 1, ItProtocolLabel.HTTP)]
    assert port_churn(flows) == {frozenset(("a", "b")): {80, 443}}


def test_it_coexistence():
    packets = _ics_and_it_traffic()
    verdicts = Classifier().classify(packets).verdicts
    flows = aggregate(packets, verdicts)
    roles = [HostRole(CLIENT, {ProtocolId.MODBUS_TCP}, has_it_traffic=True),
             HostRole(SERVER, {ProtocolId.MODBUS_TCP}, has_it_traffic=True),
             HostRole(SCANNER, set(), {ProtocolId.MODBUS_TCP})]
    report = it_coexistence(roles, flows, ics_pairs_of(packets, verdicts))
    assert report.ics_hosts == 2
    assert report.hosts_with_it == 2 and report.host_share == 100.0
    assert report.ics_pairs == 1 and report.pairs_with_it == 1
    assert report.flagged_hosts == (CLIENT.pseudonym, SERVER.pseudonym)


def test_indeterminate_packets_stay_on_the_industrial_side():
    packets = [make_packet(MODBUS_REQUEST, ts=0.0),
               make_packet(b"", flags=ACK, ts=1000.0)]
    verdicts = Classifier().classify(packets).verdicts
    assert verdicts[1].label is VerdictLabel.INDETERMINATE
    flows = aggregate(packets, verdicts)
    assert [f.label for f in flows] == [ProtocolId.MODBUS_TCP, ProtocolId.MODBUS_TCP]
    assert breakdown(flows, BreakdownBasis.FLOW_BASED, IanaMapping.BEFORE_IANA).total == 0
    roles = host_roles(packets, verdicts)
    assert not any(role.has_it_traffic for role in roles)
    report = it_coexistence(roles, flows, ics_pairs_of(packets, verdicts))
    assert report.hosts_with_it == 0 and report.pairs_with_it == 0


def _random_traffic(rng, size):
    third = HostId("h00000003", 64500, True)
    hosts = [CLIENT, SERVER, SCANNER, third]
    templates = [
        lambda: (MODBUS_REQUEST, 502, "tcp", None),
        lambda: (HTTP_GET, 80, "tcp", None),
        lambda: (HTTP_GET, 8080, "tcp", None),
        lambda: (TLS_RECORD, 443, "tcp", None),
        lambda: (b"", 8443, "tcp", ACK),
        lambda: (b"", 502, "tcp", ACK),
        lambda: (bytes(8), 53, "udp", None),
        lambda: (bytes(8), int(rng.integers(1024, 65536)), "udp", None),
    ]
    packets = []
    for ts in np.sort(rng.uniform(0.0, 3600.0, size)):
        src, dst = rng.choice(len(hosts), size=2, replace=False)
        payload, port, transport, flags = templates[int(rng.integers(len(templates)))]()
        sport = 50000 + int(rng.integers(4))
        if rng.random() < 0.5:
            packets.append(make_packet(payload, dport=port, sport=sport, transport=transport,
                                       flags=flags, src=hosts[src], dst=hosts[dst], ts=ts))
        else:
            packets.append(make_packet(payload, dport=sport, sport=port, transport=transport,
                                       flags=flags, src=hosts[dst], dst=hosts[src], ts=ts))
    return packets


@pytest.mark.parametrize("seed", range(20))
def test_every_packet_lands_in_exactly_one_flow(seed):
    rng = np.random.default_rng(seed)
    packets = _random_traffic(rng, int(rng.integers(1, 300)))
    verdicts = Classifier().classify(packets).verdicts
    for timeout in (1.0, 300.0, math.inf):
        flows = aggregate(packets, verdicts, timeout=timeout)
        assert sum(f.packet_count for f in flows) == len(packets)
        assert all(f.first_seen <= f.last_seen for f in flows)


@pytest.mark.parametrize("seed", range(10))
def test_iana_mapping_ignores_direction(seed, services):
    rng = np.random.default_rng(50 + seed)
    packets = _random_traffic(rng, 100)
    reversed_packets = [replace(p, src=p.dst, dst=p.src, src_port=p.dst_port,
                                dst_port=p.src_port) for p in packets]
    forward = aggregate(packets, services=services)
    backward = aggregate(reversed_packets, services=services)
    assert [(f.key, f.iana_service) for f in forward] == \
        [(f.key, f.iana_service) for f in backward]
    for packet, mirrored in zip(packets, reversed_packets):
        (flow,) = aggregate([packet], services=services)
        (mirrored_flow,) = aggregate([mirrored], services=services)
        assert map_iana(flow, services) == map_iana(mirrored_flow, services)


@pytest.mark.parametrize("seed", range(20))
def test_packet_based_shares_match_per_packet_tallies(seed, services):
    rng = np.random.default_rng(100 + seed)
    packets = _random_traffic(rng, int(rng.integers(1, 300)))
    verdicts = Classifier().classify(packets).verdicts
    flows = aggregate(packets, verdicts, timeout=math.inf, services=services)
    by_key = {f.key: f for f in flows}
    assert len(by_key) == len(flows)
    for mapping in IanaMapping:
        tally = Counter()
        for packet in packets:
            flow = by_key[FlowKey.of(packet)]
            if flow.industrial:
                continue
            generic = flow.label in (ItProtocolLabel.GENERIC_TCP, ItProtocolLabel.GENERIC_UDP)
            if mapping is IanaMapping.AFTER_IANA and generic and flow.iana_service:
                tally[flow.iana_service] += 1
            else:
                tally[flow.label.value] += 1
        result = breakdown(flows, BreakdownBasis.PACKET_BASED, mapping, top_k=len(flows) + 1)
        assert result.total == sum(tally.values())
        expected = {label: 100.0 * count / result.total for label, count in tally.items()}
        assert dict(result.shares) == pytest.approx(expected)


def test_idle_flows_are_dropped_from_the_open_table():
    open_flows = {"old": _flow("a", "b", (50000, 80), 1, ItProtocolLabel.HTTP),
                  "new": _flow("a", "c", (50000, 80), 1, ItProtocolLabel.HTTP)}
    open_flows["old"].last_seen = 0.0
    open_flows["new"].last_seen = 900.0
    assert _evict_idle(open_flows, 1000.0, 300.0) == 1
    assert list(open_flows) == ["new"]
    assert _evict_idle(open_flows, 1000.0, math.inf) == 0


def test_eviction_keeps_long_captures_intact():
    packets = [make_packet(HTTP_GET, dport=80, sport=50000 + (i % 3), ts=100.0 * i)
               for i in range(60)]
    flows = aggregate(packets, timeout=250.0)
    assert [f.packet_count for f in flows] == [1] * 60
    assert [f.packet_count for f in aggregate(packets, timeout=301.0)] == [20, 20, 20]
