"""
Flow aggregation of sampled packets and packet-based / flow-based
statistics of the non-industrial traffic.
"""
import csv
import enum
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass

from .classifier import VerdictLabel
from .errors import InputNotFoundError, SchemaError
from .it_recognizer import ItRecognizer, ItProtocolLabel
from .model import FlowKey
from .registry import ProtocolId

logger = logging.getLogger(__name__)

DEFAULT_IDLE_TIMEOUT = 300.0
EPHEMERAL_PORT_START = 49152
DEFAULT_TOP_K = 5

POPULATION_OVERALL = "overall"
POPULATION_ICS_PAIRS = "ics-to-ics"

_GENERIC = (ItProtocolLabel.GENERIC_TCP, ItProtocolLabel.GENERIC_UDP)


class BreakdownBasis(enum.Enum):
    PACKET_BASED = "PacketBased"
    FLOW_BASED = "FlowBased"


class IanaMapping(enum.Enum):
    BEFORE_IANA = "BeforeIana"
    AFTER_IANA = "AfterIana"


@dataclass
class FlowRecord:
    key: FlowKey
    packet_count: int
    first_seen: float
    last_seen: float
    label: object
    iana_service: str = None

    @property
    def industrial(self):
        return isinstance(self.label, ProtocolId)

    @property
    def hosts(self):
        return frozenset(self.key.hosts)


@dataclass(frozen=True)
class TrafficBreakdown:
    basis: BreakdownBasis
    mapping: IanaMapping
    shares: list
    population: str = POPULATION_OVERALL
    total: int = 0


class IanaServices:
    """Registered service names by (port, transport)."""

    def __init__(self, entries=None):
        self._services = dict(entries or {})

    @classmethod
    def from_file(cls, path):
        """Load a ``port,transport,service`` CSV file (header row optional)."""
        if not os.path.exists(path):
            raise InputNotFoundError(f"IANA services table not found: {path}")
        entries = {}
        with open(path, newline="", encoding="utf-8") as handle:
            for number, row in enumerate(csv.reader(handle), 1):
                if not row or row[0].startswith("#") or row[0].strip() == "port":
                    continue
                try:
                    port, transport, service = (cell.strip() for cell in row)
                    entries[(int(port), transport.lower())] = service
                except ValueError as exc:
                    raise SchemaError(f"{path}: {exc}", number) from exc
        logger.info("Loaded %d IANA service entries from %s", len(entries), path)
        return cls(entries)

    def __len__(self):
        return len(self._services)

    def lookup(self, port, transport):
        return self._services.get((port, transport))


def _rank(label):
    if isinstance(label, ProtocolId):
        return 2
    return 1 if label.confident else 0


def packet_label(packet, verdict, recognizer):
    """
    Industrial protocol for port-matched packets that are not NonICS, else the IT label.

    Indeterminate packets keep their port-matched protocol, so they never
    count as IT traffic; host_roles applies the same rule.
    """
    if verdict is not None and verdict.label is not VerdictLabel.NON_ICS:
        return verdict.protocol
    if verdict is not None and verdict.it_label is not None:
        return verdict.it_label
    return recognizer.recognize(packet)


def _evict_idle(open_flows, now, timeout):
    """Drop flows idle for longer than timeout; returns how many were dropped."""
    idle = [key for key, flow in open_flows.items() if now - flow.last_seen > timeout]
    for key in idle:
        del open_flows[key]
    return len(idle)


def aggregate(packets, verdicts=(), timeout=DEFAULT_IDLE_TIMEOUT, services=None,
              recognizer=None):
    """
    Group packets into direction-free flows split on idle timeout.

    Args:
        packets: Sequence of SampledPacket (position = ref)
        verdicts: Verdicts of the port-matched packets
        timeout: Idle seconds after which a new flow starts
        services: IanaServices used to fill iana_service
        recognizer: ItRecognizer for packets without a verdict

    Returns:
        list of FlowRecord sorted by first_seen
    """
    recognizer = recognizer or ItRecognizer()
    by_ref = {v.ref: v for v in verdicts}
    order = sorted(range(len(packets)), key=lambda ref: packets[ref].timestamp)
    open_flows, flows = {}, []
    next_sweep = packets[order[0]].timestamp + timeout if order else 0.0
    for ref in order:
        packet = packets[ref]
        if packet.timestamp > next_sweep:
            _evict_idle(open_flows, packet.timestamp, timeout)
            next_sweep = packet.timestamp + timeout
        key = FlowKey.of(packet)
        label = packet_label(packet, by_ref.get(ref), recognizer)
        flow = open_flows.get(key)
        if flow is None or packet.timestamp - flow.last_seen > timeout:
            flow = FlowRecord(key, 0, packet.timestamp, packet.timestamp, label)
            open_flows[key] = flow
            flows.append(flow)
        flow.packet_count += 1
        flow.last_seen = packet.timestamp
        if _rank(label) > _rank(flow.label):
            flow.label = label
    if services is not None:
        for flow in flows:
            flow.iana_service = map_iana(flow, services)
    flows.sort(key=lambda f: (f.first_seen, f.key))
    return flows


def map_iana(flow, services):
    """Registered service of the lower port of the flow, or None."""
    ports = [port for port in flow.key.ports if port]
    if not ports:
        return None
    lower = min(ports)
    if lower >= EPHEMERAL_PORT_START:
        return None
    return services.lookup(lower, flow.key.transport.value)


def port_churn(flows):
    """
    Host pairs whose non-industrial flows use more than one lower port.

    The lower-port rule attributes such pairs to several services.
    """
    lower_ports = defaultdict(set)
    for flow in flows:
        ports = [port for port in flow.key.ports if port]
        if ports and not flow.industrial:
            lower_ports[flow.hosts].add(min(ports))
    churned = {pair: ports for pair, ports in lower_ports.items() if len(ports) > 1}
    if churned:
        logger.warning("%d host pairs change their lower port across flows; "
                       "IANA mapping may split their traffic", len(churned))
    return churned


def _label_name(flow, mapping):
    if mapping is IanaMapping.AFTER_IANA and flow.label in _GENERIC and flow.iana_service:
        return flow.iana_service
    return flow.label.value


def breakdown(flows, basis, mapping, population=POPULATION_OVERALL, ics_pairs=(),
              top_k=DEFAULT_TOP_K):
    """
    Shares of the non-industrial traffic per label.

    Args:
        flows: list of FlowRecord
        basis: BreakdownBasis; packet-based weights flows by packet_count
        mapping: IanaMapping; after mapping, generic labels take the IANA service
        population: 'overall' or 'ics-to-ics' (flows between the endpoints of a
            legitimate industrial communication)
        ics_pairs: set of frozenset host pairs for the ics-to-ics population
        top_k: Number of labels kept

    Returns:
        TrafficBreakdown with (label, %) shares in descending order
    """
    selected = [f for f in flows if not f.industrial]
    if population == POPULATION_ICS_PAIRS:
        pairs = set(ics_pairs)
        selected = [f for f in selected if f.hosts in pairs]
    weights = Counter()
    for flow in selected:
        weights[_label_name(flow, mapping)] += (
            flow.packet_count if basis is BreakdownBasis.PACKET_BASED else 1)
    total = sum(weights.values())
    ranked = sorted(weights.items(), key=lambda item: (-item[1], item[0]))[:top_k]
    shares = [(label, 100.0 * weight / total) for label, weight in ranked]
    return TrafficBreakdown(basis, mapping, shares, population, total)


def quadrants(flows, population=POPULATION_OVERALL, ics_pairs=(), top_k=DEFAULT_TOP_K):
    """The four basis x mapping breakdowns of one population."""
    return [breakdown(flows, basis, mapping, population, ics_pairs, top_k)
            for mapping in IanaMapping for basis in BreakdownBasis]


def ics_pairs_of(packets, verdicts):
    """Endpoint pairs of the legitimate industrial packets."""
    return {frozenset((packets[v.ref].src.pseudonym, packets[v.ref].dst.pseudonym))
            for v in verdicts if v.label is VerdictLabel.LEGITIMATE_ICS}


@dataclass(frozen=True)
class CoexistenceReport:
    ics_hosts: int
    hosts_with_it: int
    host_share: float
    ics_pairs: int
    pairs_with_it: int
    pair_share: float
    flagged_hosts: tuple


def it_coexistence(roles, flows, ics_pairs):
    """
    Coexistence of industrial and IT traffic on the same hosts and host pairs.

    Hosts exchanging both are flagged as possible NAT or multi-service hosts.
    """
    ics_roles = [r for r in roles if r.protocols_legitimate]
    flagged = tuple(sorted(r.host.pseudonym for r in ics_roles if r.has_it_traffic))
    it_pairs = {f.hosts for f in flows if not f.industrial}
    pairs_with_it = sum(1 for pair in ics_pairs if pair in it_pairs)
    return CoexistenceReport(
        ics_hosts=len(ics_roles),
        hosts_with_it=len(flagged),
        host_share=100.0 * len(flagged) / len(ics_roles) if ics_roles else 0.0,
        ics_pairs=len(ics_pairs),
        pairs_with_it=pairs_with_it,
        pair_share=100.0 * pairs_with_it / len(ics_pairs) if ics_pairs else 0.0,
        flagged_hosts=flagged,
    )
