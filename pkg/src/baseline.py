"""
Active-scan baseline: import of search-engine host exports, comparison of
passively observed industrial hosts with the baseline, and exposure / CVE
statistics.
"""
import enum
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field

from .anonymize import tag_host
from .errors import DomainError, InputNotFoundError, SchemaError
from .model import HostId
from .registry import DEFAULT_REGISTRY, ProtocolId, report_group

logger = logging.getLogger(__name__)

BASELINE_SCHEMA = 1
DEFAULT_TOP_K = 5
ATG_MARKER = "I20100"

# Search queries the baseline was collected with; {country} is the ISO code.
SHODAN_QUERIES = {
    "category": 'category:"industrial-control-systems" country:"{country}"',
    ProtocolId.AMQP: 'port:5672 country:"{country}"',
    ProtocolId.ANSI_C12_22: 'port:1153 country:"{country}"',
    ProtocolId.ATG: 'port:10001 country:"{country}" I20100',
    ProtocolId.BACNET_IP: 'port:47808 country:"{country}"',
    ProtocolId.COAP: 'port:5683 country:"{country}"',
    ProtocolId.CODESYS: 'port:2455 country:"{country}"',
    ProtocolId.CRIMSON_V3: 'port:789 country:"{country}"',
    ProtocolId.DNP3: 'port:20000 country:"{country}"',
    ProtocolId.ETHERCAT: 'port:34980 country:"{country}"',
    ProtocolId.ETHERNET_IP: 'port:44818 country:"{country}"',
    ProtocolId.FL_NET: 'port:55000 country:"{country}"',
    ProtocolId.FF_HSE: 'port:1089,1090,1091 country:"{country}"',
    ProtocolId.GE_SRTP: 'port:18245,18246 country:"{country}"',
    ProtocolId.HART_IP: 'port:5094 country:"{country}"',
    ProtocolId.ICCP: 'port:102 country:"{country}"',
    ProtocolId.IEC_60870_5_104: 'port:2404 country:"{country}"',
    ProtocolId.IEC_61850: 'port:102 country:"{country}"',
    ProtocolId.MODBUS_TCP: 'port:502 country:"{country}"',
    ProtocolId.MELSEC_Q: 'port:5006,5007 country:"{country}"',
    ProtocolId.MQTT: 'port:1883 country:"{country}"',
    ProtocolId.NIAGARA_FOX: 'port:1911,4911 country:"{country}"',
    ProtocolId.OMRON_FINS: 'port:9600 country:"{country}"',
    ProtocolId.OPC_UA: 'port:4840 country:"{country}"',
    ProtocolId.PCWORX: 'port:1962 country:"{country}"',
    ProtocolId.PROCONOS: 'port:20547 country:"{country}"',
    ProtocolId.PROFINET: 'port:34962,34963,34964 country:"{country}"',
    ProtocolId.S7COMM: 'port:102 country:"{country}"',
    ProtocolId.ZIGBEE_IP: 'port:17754,17755,17756 country:"{country}"',
}

# Export tags naming an industrial protocol explicitly
TAG_PROTOCOLS = {
    "amqp": ProtocolId.AMQP,
    "c12.22": ProtocolId.ANSI_C12_22,
    "atg": ProtocolId.ATG,
    "bacnet": ProtocolId.BACNET_IP,
    "coap": ProtocolId.COAP,
    "codesys": ProtocolId.CODESYS,
    "crimson": ProtocolId.CRIMSON_V3,
    "dnp3": ProtocolId.DNP3,
    "ethercat": ProtocolId.ETHERCAT,
    "ethernetip": ProtocolId.ETHERNET_IP,
    "fl-net": ProtocolId.FL_NET,
    "ff-hse": ProtocolId.FF_HSE,
    "ge-srtp": ProtocolId.GE_SRTP,
    "hart-ip": ProtocolId.HART_IP,
    "iccp": ProtocolId.ICCP,
    "iec-104": ProtocolId.IEC_60870_5_104,
    "iec-61850": ProtocolId.IEC_61850,
    "modbus": ProtocolId.MODBUS_TCP,
    "melsec-q": ProtocolId.MELSEC_Q,
    "mqtt": ProtocolId.MQTT,
    "niagara-fox": ProtocolId.NIAGARA_FOX,
    "omron-fins": ProtocolId.OMRON_FINS,
    "opc-ua": ProtocolId.OPC_UA,
    "pcworx": ProtocolId.PCWORX,
    "proconos": ProtocolId.PROCONOS,
    "profinet": ProtocolId.PROFINET,
    "s7": ProtocolId.S7COMM,
    "zigbee": ProtocolId.ZIGBEE_IP,
}


def shodan_queries(country="IT"):
    """Return (name, query) pairs with the country filled in."""
    return [(key if isinstance(key, str) else key.value, query.format(country=country))
            for key, query in SHODAN_QUERIES.items()]


class SeverityBucket(enum.Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"


def cvss_bucket(score):
    """Map a CVSS v2 base score to its severity bucket."""
    if not 0.0 <= score <= 10.0:
        raise DomainError(f"CVSS score {score} outside [0.0, 10.0]")
    if score < 4.0:
        return SeverityBucket.LOW
    if score < 7.0:
        return SeverityBucket.MEDIUM
    return SeverityBucket.HIGH


@dataclass(frozen=True)
class BaselineHost:
    host: HostId
    protocols: frozenset = frozenset()
    open_ports: frozenset = frozenset()
    products: tuple = ()
    cves: tuple = ()

    @property
    def groups(self):
        return {report_group(p) for p in self.protocols}

    def merge(self, other):
        return BaselineHost(
            self.host,
            self.protocols | other.protocols,
            self.open_ports | other.open_ports,
            tuple(dict.fromkeys(self.products + other.products)),
            tuple(dict.fromkeys(self.cves + other.cves)),
        )


def _protocols(record, ports, registry):
    protocols = set()
    banner = str(record.get("banner") or "")
    for port, transport in ports:
        for protocol in registry.lookup(port, transport):
            if protocol is ProtocolId.ATG and ATG_MARKER not in banner:
                continue
            protocols.add(protocol)
    for tag in record.get("tags") or ():
        protocol = TAG_PROTOCOLS.get(str(tag).lower())
        if protocol is not None:
            protocols.add(protocol)
    return frozenset(protocols)


def parse_baseline_record(record, as_map, pseudonymizer, registry=DEFAULT_REGISTRY):
    """
    Convert one export record to a BaselineHost.

    Raises:
        ValueError / KeyError / TypeError on schema violations
    """
    if record.get("schema") != BASELINE_SCHEMA:
        raise ValueError(f"unsupported schema {record.get('schema')!r}")
    ip = str(record["ip"])
    host = tag_host(ip, as_map, pseudonymizer)
    if host.asn == 0 and record.get("asn"):
        host = HostId(host.pseudonym, int(str(record["asn"]).upper().lstrip("AS")),
                      host.in_ixp_area)
    ports = frozenset((int(p["port"]), str(p.get("transport", "tcp")).lower())
                      for p in record.get("ports") or ())
    for port, transport in ports:
        if not 0 <= port <= 65535 or transport not in ("tcp", "udp"):
            raise ValueError(f"bad port {port}/{transport}")
    cves = []
    for vuln in record.get("vulns") or ():
        score = float(vuln["cvss"])
        cvss_bucket(score)
        cves.append((str(vuln["cve"]), score))
    products = record.get("product") or ()
    if isinstance(products, str):
        products = (products,)
    return BaselineHost(host, _protocols(record, ports, registry), ports,
                        tuple(str(p) for p in products), tuple(cves))


def import_baseline(path, as_map, pseudonymizer, registry=DEFAULT_REGISTRY, area_only=False):
    """
    Import a baseline export.

    Args:
        path: JSON-lines export (schema 1)
        as_map: AsMap used by ingest
        pseudonymizer: Pseudonymizer keyed like ingest
        registry: ProtocolRegistry for the port mapping
        area_only: Drop hosts outside the IXP-area ASes

    Returns:
        list of BaselineHost, one per IP, sorted by host
    """
    if not os.path.exists(path):
        raise InputNotFoundError(f"baseline export not found: {path}")
    hosts, skipped, dropped = {}, 0, 0
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                host = parse_baseline_record(record, as_map, pseudonymizer, registry)
            except (ValueError, KeyError, TypeError, DomainError) as exc:
                logger.warning("%s: %s", path, SchemaError(f"bad baseline record: {exc}", number))
                skipped += 1
                continue
            if area_only and not host.host.in_ixp_area:
                dropped += 1
                continue
            key = host.host.pseudonym
            hosts[key] = hosts[key].merge(host) if key in hosts else host
    logger.info("Imported %d baseline hosts from %s (%d outside area, %d records skipped)",
                len(hosts), path, dropped, skipped)
    return [hosts[key] for key in sorted(hosts)]


@dataclass
class BaselineComparison:
    per_protocol: dict = field(default_factory=dict)  # group -> (h, h_S, i)
    overall: tuple = (0, 0, 0)

    def rows(self):
        return [(group, h, h_s, i) for group, (h, h_s, i) in self.per_protocol.items()]


def _by_group(pairs):
    groups = {}
    for pseudonym, protocols in pairs:
        for protocol in protocols:
            groups.setdefault(report_group(protocol), set()).add(pseudonym)
    return groups


def compare(observed, baseline):
    """
    Compare observed industrial hosts (H) with the baseline (H_S).

    Args:
        observed: list of HostRole; hosts with legitimate protocols form H
        baseline: list of BaselineHost; hosts with protocols form H_S

    Returns:
        BaselineComparison keyed by reporting group
    """
    seen = _by_group((r.host.pseudonym, r.protocols_legitimate) for r in observed)
    indexed = _by_group((b.host.pseudonym, b.protocols) for b in baseline)
    per_protocol = {}
    for group in sorted(set(seen) | set(indexed), key=str.lower):
        h, h_s = seen.get(group, set()), indexed.get(group, set())
        per_protocol[group] = (len(h), len(h_s), len(h & h_s))
    all_h = {r.host.pseudonym for r in observed if r.protocols_legitimate}
    all_h_s = {b.host.pseudonym for b in baseline if b.protocols}
    return BaselineComparison(per_protocol, (len(all_h), len(all_h_s), len(all_h & all_h_s)))


def baseline_protocol_table(hosts):
    """
    Hosts per protocol group in the whole export and in the IXP area.

    Returns:
        list of (protocol, hosts, % of all, area hosts, % of area)
    """
    total = [b for b in hosts if b.protocols]
    area = [b for b in total if b.host.in_ixp_area]
    counts = Counter(g for b in total for g in b.groups)
    area_counts = Counter(g for b in area for g in b.groups)
    rows = []
    for group, count in sorted(counts.items(), key=lambda item: (-item[1], item[0])):
        rows.append((group, count, 100.0 * count / len(total),
                     area_counts[group], 100.0 * area_counts[group] / len(area) if area else 0.0))
    return rows


def silent_baseline_hosts(baseline, sample_hosts, observed_ics_hosts):
    """
    Baseline hosts present in the capture that never showed legitimate ICS traffic.

    Returns:
        (count, % of H_S)
    """
    indexed = {b.host.pseudonym for b in baseline if b.protocols}
    present = {h.pseudonym if isinstance(h, HostId) else h for h in sample_hosts}
    ics = {h.pseudonym if isinstance(h, HostId) else h for h in observed_ics_hosts}
    silent = (indexed & present) - ics
    return len(silent), 100.0 * len(silent) / len(indexed) if indexed else 0.0


@dataclass
class ExposureReport:
    observed: int = 0
    identified: int = 0
    identified_share: float = 0.0
    ics_exposed: int = 0
    ics_exposed_share: float = 0.0
    exposed_protocols: list = field(default_factory=list)
    top_products: list = field(default_factory=list)
    top_ports: list = field(default_factory=list)
    vulnerable_hosts: int = 0
    vulnerable_share: float = 0.0
    cve_count: int = 0
    buckets: dict = field(default_factory=dict)
    thresholds: list = field(default_factory=list)


def _ranked(counter, total, top_k):
    ordered = sorted(counter.items(), key=lambda item: (-item[1], str(item[0])))
    return [(name, count, 100.0 * count / total if total else 0.0)
            for name, count in ordered[:top_k]]


def exposure_report(observed, baseline, top_k=DEFAULT_TOP_K):
    """
    Exposure of the observed legitimate industrial hosts according to the baseline.

    Args:
        observed: list of HostRole
        baseline: list of BaselineHost
        top_k: Length of the product and port rankings

    Returns:
        ExposureReport; CVE thresholds are rows of
        (label, % of CVEs, % of vulnerable hosts)
    """
    legit = {r.host.pseudonym for r in observed if r.protocols_legitimate}
    matched = [b for b in baseline if b.host.pseudonym in legit]
    report = ExposureReport(observed=len(legit), identified=len(matched),
                            buckets={bucket.value: 0 for bucket in SeverityBucket})
    if not legit:
        return report
    report.identified_share = 100.0 * len(matched) / len(legit)

    exposed = [b for b in matched if b.protocols]
    report.ics_exposed = len(exposed)
    report.ics_exposed_share = 100.0 * len(exposed) / len(legit)
    report.exposed_protocols = _ranked(Counter(g for b in exposed for g in b.groups),
                                       len(exposed), len(SHODAN_QUERIES))
    report.top_products = _ranked(Counter(p for b in matched for p in set(b.products)),
                                  len(matched), top_k)
    report.top_ports = _ranked(Counter(f"{port}/{transport}" for b in matched
                                       for port, transport in b.open_ports),
                               len(matched), top_k)

    vulnerable = [b for b in matched if b.cves]
    scores = [score for b in vulnerable for _, score in b.cves]
    report.vulnerable_hosts = len(vulnerable)
    report.vulnerable_share = 100.0 * len(vulnerable) / len(matched) if matched else 0.0
    report.cve_count = len(scores)
    for score in scores:
        report.buckets[cvss_bucket(score).value] += 1
    for label, predicate in (("> 7.0", lambda s: s > 7.0), ("> 8.0", lambda s: s > 8.0),
                             ("> 9.0", lambda s: s > 9.0), ("= 10.0", lambda s: s == 10.0)):
        hit_hosts = sum(1 for b in vulnerable if any(predicate(s) for _, s in b.cves))
        report.thresholds.append((
            label,
            100.0 * sum(1 for s in scores if predicate(s)) / len(scores) if scores else 0.0,
            100.0 * hit_hosts / len(vulnerable) if vulnerable else 0.0,
        ))
    return report
