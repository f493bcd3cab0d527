"""
Three-step classification of sampled packets into legitimate industrial
traffic, industrial scanners, non-industrial traffic and indeterminate
port-matched traffic, with step-by-step packet accounting.
"""
import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, fields

from .dissectors import dissect_ics
from .errors import InconsistentLabelError, SchemaError
from .intel import IntelStore
from .it_recognizer import ItProtocolLabel, ItRecognizer
from .model import HostId, NO_HOST, Transport
from .probes import SCANNER_KINDS, ProbeKind, match_probe
from .registry import DEFAULT_REGISTRY, DissectorTier, ProtocolId, report_group

logger = logging.getLogger(__name__)

SCANNER_BASIS_INTEL = "intel"
SCANNER_BASIS_SIGNATURES = "intel+sig"


class VerdictLabel(enum.Enum):
    LEGITIMATE_ICS = "LegitimateICS"
    ICS_SCANNER = "IcsScanner"
    NON_ICS = "NonICS"
    INDETERMINATE = "Indeterminate"


class Basis(enum.Enum):
    PORT_MATCH = "PortMatch"
    DISSECT_OK = "DissectOk"
    CROSS_VALIDATED = "CrossValidated"
    INTEL_SCANNER = "IntelScanner"
    PROBE_SIGNATURE = "ProbeSignature"
    IT_RECOGNIZED = "ItRecognized"


@dataclass(frozen=True)
class Verdict:
    """Final label of one port-matched packet (``ref`` = index in the samples file)."""

    ref: int
    label: VerdictLabel
    protocol: ProtocolId = None
    basis: tuple = ()
    probe: ProbeKind = None
    it_label: ItProtocolLabel = None

    def __post_init__(self):
        basis = set(self.basis)
        if self.label is VerdictLabel.LEGITIMATE_ICS:
            required = {Basis.PORT_MATCH, Basis.DISSECT_OK, Basis.CROSS_VALIDATED}
            if not required <= basis or Basis.INTEL_SCANNER in basis:
                raise ValueError(f"packet {self.ref}: LegitimateICS with basis {self.basis}")
        elif self.label is VerdictLabel.ICS_SCANNER:
            if Basis.PORT_MATCH not in basis or not basis & {Basis.INTEL_SCANNER,
                                                             Basis.PROBE_SIGNATURE}:
                raise ValueError(f"packet {self.ref}: IcsScanner with basis {self.basis}")

    def to_record(self):
        return {
            "ref": self.ref,
            "label": self.label.value,
            "protocol": self.protocol.value if self.protocol else None,
            "basis": [b.value for b in self.basis],
            "probe": self.probe.value if self.probe else None,
            "it": self.it_label.value if self.it_label else None,
        }

    @classmethod
    def from_record(cls, record, line=None):
        try:
            return cls(
                ref=int(record["ref"]),
                label=VerdictLabel(record["label"]),
                protocol=ProtocolId(record["protocol"]) if record.get("protocol") else None,
                basis=tuple(Basis(b) for b in record["basis"]),
                probe=ProbeKind(record["probe"]) if record.get("probe") else None,
                it_label=ItProtocolLabel(record["it"]) if record.get("it") else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad verdict record: {exc}", line) from exc


@dataclass
class PipelineAccounting:
    """Packet counters of every filtering stage."""

    total: int = 0
    after_port_filter: int = 0
    s1_dissected: int = 0
    s1_crossvalidated: int = 0
    s1_scanner: int = 0
    s1_legitimate: int = 0
    s2_residual: int = 0
    s2_crossvalidated: int = 0
    s2_scanner: int = 0
    s3_total_scanners: int = 0
    s3_total_ics: int = 0

    def __add__(self, other):
        return PipelineAccounting(**{
            f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)
        })

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def violations(self):
        """Return the accounting identities that do not hold (empty when consistent)."""
        problems = []
        if self.s1_legitimate != self.s1_crossvalidated - self.s1_scanner:
            problems.append("s1_legitimate != s1_crossvalidated - s1_scanner")
        if self.s3_total_scanners != self.s1_scanner + self.s2_scanner:
            problems.append("s3_total_scanners != s1_scanner + s2_scanner")
        if self.s3_total_ics != self.s1_legitimate + self.s3_total_scanners:
            problems.append("s3_total_ics != s1_legitimate + s3_total_scanners")
        if self.s1_dissected + self.s2_residual != self.after_port_filter:
            problems.append("step inputs do not partition after_port_filter")
        chains = (
            ("total", "after_port_filter", "s1_dissected", "s1_crossvalidated", "s1_scanner"),
            ("s1_crossvalidated", "s1_legitimate"),
            ("after_port_filter", "s2_residual", "s2_crossvalidated", "s2_scanner"),
        )
        for chain in chains:
            for earlier, later in zip(chain, chain[1:]):
                if getattr(self, later) > getattr(self, earlier):
                    problems.append(f"{later} exceeds {earlier}")
        return problems

    def check(self):
        problems = self.violations()
        if problems:
            raise InconsistentLabelError("accounting identities violated: " + "; ".join(problems))
        return self

    def rows(self):
        """
        Stage rows as (stage, packets, percent).

        Step rows are relative to the step's input row; the port filter row
        is relative to the total; step 3 rows are relative to the port filter.
        """
        def pct(part, whole):
            return 100.0 * part / whole if whole else 0.0

        return [
            ("Total sampled packets", self.total, 100.0 if self.total else 0.0),
            ("After port-based filtering", self.after_port_filter,
             pct(self.after_port_filter, self.total)),
            ("Step 1 (a) correctly dissected", self.s1_dissected,
             pct(self.s1_dissected, self.after_port_filter)),
            ("Step 1 (b) cross-validated", self.s1_crossvalidated,
             pct(self.s1_crossvalidated, self.s1_dissected)),
            ("Step 1 (c) scanners", self.s1_scanner, pct(self.s1_scanner, self.s1_dissected)),
            ("Step 1 (d) legitimate ICS traffic", self.s1_legitimate,
             pct(self.s1_legitimate, self.s1_dissected)),
            ("Step 2 (a) residual port-matched", self.s2_residual,
             pct(self.s2_residual, self.after_port_filter)),
            ("Step 2 (b) cross-validated", self.s2_crossvalidated,
             pct(self.s2_crossvalidated, self.s2_residual)),
            ("Step 2 (c) scanners", self.s2_scanner, pct(self.s2_scanner, self.s2_residual)),
            ("Step 3 total scanners", self.s3_total_scanners,
             pct(self.s3_total_scanners, self.after_port_filter)),
            ("Step 3 total ICS traffic", self.s3_total_ics,
             pct(self.s3_total_ics, self.after_port_filter)),
        ]


@dataclass(frozen=True)
class Candidate:
    """A port-matched packet with its candidate protocols (dst-port matches first)."""

    ref: int
    packet: object
    protocols: tuple


@dataclass
class HostRole:
    host: HostId
    protocols_legitimate: set = field(default_factory=set)
    protocols_scanned: set = field(default_factory=set)
    has_it_traffic: bool = False

    @property
    def is_ics(self):
        return bool(self.protocols_legitimate)


@dataclass
class ClassificationResult:
    accounting: PipelineAccounting
    verdicts: list


class Classifier:
    """Port pre-filter, step 1 (dissection), step 2 (residual) and step 3 (merge)."""

    def __init__(self, registry=DEFAULT_REGISTRY, intel=None, scanner_basis=SCANNER_BASIS_SIGNATURES,
                 recognizer=None):
        """
        Args:
            registry: ProtocolRegistry snapshot
            intel: IntelStore snapshot (empty when None)
            scanner_basis: 'intel' or 'intel+sig'; whether probe signatures alone
                mark a step-2 packet as scanner
            recognizer: ItRecognizer used for cross-validation
        """
        if scanner_basis not in (SCANNER_BASIS_INTEL, SCANNER_BASIS_SIGNATURES):
            raise ValueError(f"unknown scanner basis {scanner_basis!r}")
        self.registry = registry
        self.intel = intel if intel is not None else IntelStore()
        self.scanner_basis = scanner_basis
        self.recognizer = recognizer or ItRecognizer()

    def candidates_of(self, packet):
        if packet.transport not in (Transport.TCP, Transport.UDP):
            return ()
        transport = packet.transport.value
        by_dst = sorted(self.registry.lookup(packet.dst_port, transport))
        by_src = sorted(self.registry.lookup(packet.src_port, transport) - set(by_dst))
        return tuple(by_dst + by_src)

    def port_prefilter(self, packets):
        """
        Keep packets whose src or dst port lies in a registry range.

        Args:
            packets: Iterable of SampledPacket (position = ref)

        Returns:
            (list of Candidate, PipelineAccounting delta with total and after_port_filter)
        """
        delta = PipelineAccounting()
        candidates = []
        for ref, packet in enumerate(packets):
            delta.total += 1
            protocols = self.candidates_of(packet)
            if protocols:
                candidates.append(Candidate(ref, packet, protocols))
        delta.after_port_filter = len(candidates)
        return candidates, delta

    def _dissect(self, candidate):
        for protocol in candidate.protocols:
            if self.registry.tier(protocol) is not DissectorTier.FULL:
                continue
            result = dissect_ics(candidate.packet, protocol, self.registry)
            if result.well_formed:
                return result
        return None

    def _probe(self, candidate):
        for protocol in candidate.protocols:
            kind = match_probe(candidate.packet, protocol, self.registry)
            if kind is not None:
                return protocol, kind
        return candidate.protocols[0], None

    def step1(self, candidates):
        """
        Step 1 on the well-formed Full-tier packets.

        Returns:
            (verdicts, residual candidates, PipelineAccounting delta)
        """
        delta = PipelineAccounting()
        verdicts, residual = [], []
        for candidate in candidates:
            result = self._dissect(candidate)
            if result is None:
                residual.append(candidate)
                continue
            delta.s1_dissected += 1
            packet = candidate.packet
            label = self.recognizer.recognize(packet)
            if label.confident:
                verdicts.append(Verdict(candidate.ref, VerdictLabel.NON_ICS, None,
                                        (Basis.PORT_MATCH, Basis.DISSECT_OK, Basis.IT_RECOGNIZED),
                                        it_label=label))
                continue
            delta.s1_crossvalidated += 1
            basis = (Basis.PORT_MATCH, Basis.DISSECT_OK, Basis.CROSS_VALIDATED)
            if self.intel.is_scanner(packet.src):
                delta.s1_scanner += 1
                verdicts.append(Verdict(candidate.ref, VerdictLabel.ICS_SCANNER, result.protocol,
                                        basis + (Basis.INTEL_SCANNER,),
                                        probe=match_probe(packet, result.protocol, self.registry)))
            else:
                delta.s1_legitimate += 1
                verdicts.append(Verdict(candidate.ref, VerdictLabel.LEGITIMATE_ICS,
                                        result.protocol, basis))
        return verdicts, residual, delta

    def step2(self, residual):
        """
        Step 2 on port-matched packets step 1 did not dissect as well formed.

        Returns:
            (verdicts, PipelineAccounting delta)
        """
        delta = PipelineAccounting()
        verdicts = []
        for candidate in residual:
            delta.s2_residual += 1
            packet = candidate.packet
            label = self.recognizer.recognize(packet)
            if label.confident:
                verdicts.append(Verdict(candidate.ref, VerdictLabel.NON_ICS, None,
                                        (Basis.PORT_MATCH, Basis.IT_RECOGNIZED), it_label=label))
                continue
            delta.s2_crossvalidated += 1
            protocol, kind = self._probe(candidate)
            basis = [Basis.PORT_MATCH, Basis.CROSS_VALIDATED]
            if self.intel.is_scanner(packet.src):
                basis.append(Basis.INTEL_SCANNER)
            if kind in SCANNER_KINDS and self.scanner_basis == SCANNER_BASIS_SIGNATURES:
                basis.append(Basis.PROBE_SIGNATURE)
            if len(basis) > 2:
                delta.s2_scanner += 1
                verdicts.append(Verdict(candidate.ref, VerdictLabel.ICS_SCANNER, protocol,
                                        tuple(basis), probe=kind))
            else:
                verdicts.append(Verdict(candidate.ref, VerdictLabel.INDETERMINATE, protocol,
                                        tuple(basis), probe=kind))
        return verdicts, delta

    @staticmethod
    def step3_merge(accounting, *verdict_sets):
        """
        Merge step outputs into one verdict per packet and close the accounting.

        Raises:
            InconsistentLabelError: a packet got two different labels, or an
                accounting identity fails
        """
        merged = {}
        for verdicts in verdict_sets:
            for verdict in verdicts:
                previous = merged.get(verdict.ref)
                if previous is not None and previous != verdict:
                    raise InconsistentLabelError(
                        f"packet {verdict.ref} labelled {previous.label.value} "
                        f"and {verdict.label.value}")
                merged[verdict.ref] = verdict
        accounting.s3_total_scanners = accounting.s1_scanner + accounting.s2_scanner
        accounting.s3_total_ics = accounting.s1_legitimate + accounting.s3_total_scanners
        if len(merged) != accounting.after_port_filter:
            raise InconsistentLabelError(
                f"{len(merged)} verdicts for {accounting.after_port_filter} port-matched packets")
        accounting.check()
        return accounting, [merged[ref] for ref in sorted(merged)]

    def classify(self, packets):
        """
        Run the whole pipeline.

        Args:
            packets: Iterable of SampledPacket in samples-file order

        Returns:
            ClassificationResult with accounting and verdicts sorted by ref
        """
        candidates, accounting = self.port_prefilter(packets)
        step1_verdicts, residual, delta1 = self.step1(candidates)
        step2_verdicts, delta2 = self.step2(residual)
        accounting, verdicts = self.step3_merge(accounting + delta1 + delta2,
                                                step1_verdicts, step2_verdicts)
        logger.info("Classified %d packets: %d port-matched, %d legitimate, %d scanner",
                    accounting.total, accounting.after_port_filter,
                    accounting.s1_legitimate, accounting.s3_total_scanners)
        return ClassificationResult(accounting, verdicts)


def host_roles(packets, verdicts):
    """
    Aggregate verdicts per host.

    Both endpoints of a legitimate packet are industrial endpoints; the
    source of a scanner packet is the scanner. Any packet without a port
    match, or labelled NonICS, is IT traffic for both its endpoints.
    Indeterminate packets are neither: they mark no industrial endpoint
    and no IT traffic, and flows keep them on the industrial side.

    Args:
        packets: Sequence of SampledPacket indexed by ref
        verdicts: Iterable of Verdict

    Returns:
        list of HostRole for hosts with legitimate or scanned protocols,
        sorted by host
    """
    by_ref = {v.ref: v for v in verdicts}
    roles = {}
    it_hosts = set()

    def role(host):
        if host not in roles:
            roles[host] = HostRole(host)
        return roles[host]

    for ref, packet in enumerate(packets):
        verdict = by_ref.get(ref)
        endpoints = [h for h in (packet.src, packet.dst) if h != NO_HOST]
        if verdict is None or verdict.label is VerdictLabel.NON_ICS:
            it_hosts.update(endpoints)
        elif verdict.label is VerdictLabel.LEGITIMATE_ICS:
            for host in endpoints:
                role(host).protocols_legitimate.add(verdict.protocol)
        elif verdict.label is VerdictLabel.ICS_SCANNER and packet.src != NO_HOST:
            role(packet.src).protocols_scanned.add(verdict.protocol)

    for host, host_role in roles.items():
        host_role.has_it_traffic = host in it_hosts
    return [roles[host] for host in sorted(roles)]


def host_packet_counts(packets):
    """Sampled packets per host, counting both endpoints."""
    counts = Counter()
    for packet in packets:
        for host in (packet.src, packet.dst):
            if host != NO_HOST:
                counts[host] += 1
    return counts


def filter_active_hosts(roles, counts, model, min_rate):
    """
    Keep the roles whose estimated packet rate reaches min_rate packets/minute.

    Args:
        roles: list of HostRole
        counts: host -> sampled packet count
        model: SamplingModel giving the observation period and sampling rate
        min_rate: packets per minute; 0 keeps every role
    """
    if min_rate <= 0:
        return list(roles)
    return [r for r in roles if model.estimated_host_rate(counts.get(r.host, 0)) >= min_rate]


def scan_kind_breakdown(packets, verdicts):
    """
    Shares of scanner packets per probe kind and per targeted protocol.

    Returns:
        dict with 'packets', 'hosts', 'kinds' [(kind, count, %)] and
        'protocols' [(protocol group, count, %)]
    """
    scanners = [v for v in verdicts if v.label is VerdictLabel.ICS_SCANNER]
    total = len(scanners)
    kinds = Counter(v.probe.value if v.probe else "IntelOnly" for v in scanners)
    targets = Counter(report_group(v.protocol) for v in scanners)
    hosts = {packets[v.ref].src for v in scanners} - {NO_HOST}

    def ranked(counter):
        return [(name, count, 100.0 * count / total)
                for name, count in sorted(counter.items(), key=lambda item: (-item[1], item[0]))]

    return {"packets": total, "hosts": len(hosts), "kinds": ranked(kinds),
            "protocols": ranked(targets)}


def security_summary(packets, verdicts, registry=DEFAULT_REGISTRY):
    """
    Reliance on insecure industrial communication.

    A host is insecure when at least one of its legitimate packets used a
    port that is not a secure port of the protocol.

    Returns:
        dict with 'hosts', 'insecure_hosts', 'insecure_share' and
        'protocols' [(protocol group, packets, % of legitimate packets)]
    """
    hosts, insecure = set(), set()
    per_protocol = Counter()
    legitimate = [v for v in verdicts if v.label is VerdictLabel.LEGITIMATE_ICS]
    for verdict in legitimate:
        packet = packets[verdict.ref]
        entry = registry.entry(verdict.protocol)
        transport = packet.transport.value
        port = packet.dst_port if entry.covers(packet.dst_port, transport) else packet.src_port
        endpoints = {h for h in (packet.src, packet.dst) if h != NO_HOST}
        hosts |= endpoints
        if not registry.is_secure_port(verdict.protocol, port):
            insecure |= endpoints
        per_protocol[report_group(verdict.protocol)] += 1
    total = len(legitimate)
    return {
        "hosts": len(hosts),
        "insecure_hosts": len(insecure),
        "insecure_share": 100.0 * len(insecure) / len(hosts) if hosts else 0.0,
        "protocols": [(name, count, 100.0 * count / total) for name, count in
                      sorted(per_protocol.items(), key=lambda item: (-item[1], item[0]))],
    }


def write_verdicts(verdicts, path):
    with open(path, "w", encoding="utf-8") as handle:
        for verdict in verdicts:
            handle.write(json.dumps(verdict.to_record(), sort_keys=True) + "\n")


def read_verdicts(path):
    verdicts = []
    with open(path, encoding="utf-8") as handle:
        for number, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", number) from exc
            verdicts.append(Verdict.from_record(record, number))
    return verdicts
