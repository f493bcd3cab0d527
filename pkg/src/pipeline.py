"""
Run configuration and orchestration of the analysis stages.

Stages exchange data only through files (samples, verdicts, intel,
baseline); every run leaves its reports and a manifest in the output
directory.
"""
import logging
import os
from dataclasses import dataclass, fields

from .anonymize import AsMap, Pseudonymizer, key_fingerprint, load_key
from .baseline import (baseline_protocol_table, compare, exposure_report, import_baseline,
                       shodan_queries, silent_baseline_hosts)
from .classifier import (SCANNER_BASIS_SIGNATURES, Classifier, VerdictLabel, filter_active_hosts,
                         host_packet_counts, host_roles, read_verdicts, scan_kind_breakdown,
                         security_summary, write_verdicts)
from .errors import DomainError, InputNotFoundError
from .flows import (DEFAULT_IDLE_TIMEOUT, POPULATION_ICS_PAIRS, POPULATION_OVERALL, IanaServices,
                    aggregate, ics_pairs_of, it_coexistence, port_churn, quadrants)
from .heatmap import CountryHeatmap
from .ingest import SflowIngestor, decode_pcap
from .intel import Classification, IntelStore
from .it_recognizer import ItRecognizer
from .model import NO_HOST, SamplesWriter, read_samples
from .probes import probe_patterns
from .registry import DEFAULT_REGISTRY, ProtocolRegistry
from .reports import emit_report, report_path, write_manifest
from .sampling_model import SamplingModel, monte_carlo_detection
from .sflow import SFLOW_PORT
from .synth import (SamplerConfig, SamplingMode, Transaction, TrafficProfile, TransactionKind,
                    emit, generate, sample, validate_end_to_end)

logger = logging.getLogger(__name__)

VERSION = "1.0.0"
DEFAULT_IANA_TABLE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                                  "data", "iana_services.csv")
EMIT_FILES = {"pcap": "synth.pcap", "sflow": "synth_sflow.pcap", "samples": "samples.jsonl"}


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs; echoed into the run manifest."""

    command: str
    action: str = None
    inputs: tuple = ()
    output_dir: str = "."
    samples: str = None
    verdicts: str = None
    intel: str = None
    baseline: str = None
    as_map: str = None
    registry: str = None
    iana: str = None
    key_file: str = None
    key_env: str = None
    report_format: str = "csv"
    min_rate: float = 0.0
    scanner_basis: str = SCANNER_BASIS_SIGNATURES
    area_only: bool = False
    flow_timeout: float = DEFAULT_IDLE_TIMEOUT
    population: str = None
    top_k: int = 5
    seed: int = 0
    rate_reciprocal: int = 4096
    days: float = None
    sampled_n: int = None
    total_n: float = None
    host_rate: float = 1.0
    k: int = None
    trials: int = 100_000
    shards: int = 8
    strict_model: bool = False
    country: str = "IT"
    profile: str = "modbus+mqtt"
    modbus_rate: float = 10.0
    mqtt_rate: float = 10.0
    duration: int = 86400
    emit: str = None
    validate: bool = False
    via_sflow: bool = True
    every_nth: bool = False
    all_directions: bool = False
    port: int = SFLOW_PORT
    host: str = ""
    count: int = None
    listen_seconds: float = None
    heatmap: bool = True

    @classmethod
    def from_args(cls, args):
        """Build a config from an argparse namespace, ignoring unknown attributes."""
        known = {f.name for f in fields(cls)}
        values = {}
        for name, value in vars(args).items():
            if name in known and value is not None:
                values[name] = tuple(value) if isinstance(value, list) else value
        return cls(**values)

    @property
    def key_reference(self):
        if self.key_file:
            return self.key_file
        return f"env:{self.key_env}" if self.key_env else None


class IcsWatchPipeline:
    """Runs one subcommand of the analysis on files."""

    def __init__(self, config):
        self.config = config
        self._inputs = []
        self._outputs = []
        self._key = None
        self._pseudonymizer = None
        self.registry = DEFAULT_REGISTRY
        if config.registry:
            self.registry = ProtocolRegistry.from_file(self._input(config.registry, "registry"))
            logger.info("Using protocol registry %s (%d TCP, %d UDP ports)", config.registry,
                        self.registry.port_count("tcp"), self.registry.port_count("udp"))

    # -- inputs ---------------------------------------------------------

    def _input(self, path, what):
        if not path:
            raise DomainError(f"no {what} file given")
        if not os.path.exists(path):
            raise InputNotFoundError(f"{what} file not found: {path}")
        self._inputs.append(path)
        return path

    @property
    def pseudonymizer(self):
        if self._pseudonymizer is None:
            self._key = load_key(self.config.key_file, self.config.key_env)
            self._pseudonymizer = Pseudonymizer(self._key)
        return self._pseudonymizer

    @property
    def has_key(self):
        return bool(self.config.key_file or self.config.key_env)

    def as_map(self):
        if not self.config.as_map:
            logger.warning("No AS map given; every host gets ASN 0 outside the IXP area")
            return AsMap()
        return AsMap.from_file(self._input(self.config.as_map, "AS map"))

    def load_samples(self):
        path = self._input(self.config.samples, "samples")
        logger.info("Loading samples from %s", path)
        packets = list(read_samples(path))
        logger.info("Loaded %d sampled packets", len(packets))
        return packets

    def load_verdicts(self):
        return read_verdicts(self._input(self.config.verdicts, "verdicts"))

    def load_intel(self):
        if not self.config.intel:
            return IntelStore()
        path = self._input(self.config.intel, "intel")
        return IntelStore.from_file(path, self.pseudonymizer if self.has_key else None)

    def load_baseline(self):
        path = self.config.baseline or (self.config.inputs[0] if self.config.inputs else None)
        return import_baseline(self._input(path, "baseline export"), self.as_map(),
                               self.pseudonymizer, self.registry, self.config.area_only)

    def sampling_model(self, sampled_n):
        if self.config.days is None:
            raise DomainError("--days is needed to relate sampled counts to packet rates")
        return SamplingModel(days=self.config.days, sampled_n=max(1, sampled_n),
                             rate_reciprocal=self.config.rate_reciprocal,
                             total_n=self.config.total_n, host_rate_per_min=self.config.host_rate,
                             strict=self.config.strict_model)

    # -- outputs --------------------------------------------------------

    def output(self, name):
        os.makedirs(self.config.output_dir, exist_ok=True)
        path = os.path.join(self.config.output_dir, name)
        self._outputs.append(path)
        return path

    def report(self, name, rows, headers, title=None):
        os.makedirs(self.config.output_dir, exist_ok=True)
        path = report_path(self.config.output_dir, name, self.config.report_format)
        emit_report(rows, headers, path, self.config.report_format, title or name)
        self._outputs.append(path)
        return path

    def write_manifest(self):
        os.makedirs(self.config.output_dir, exist_ok=True)
        return write_manifest(self.config.output_dir, self.config, self._inputs, VERSION,
                              self.config.key_reference,
                              key_fingerprint(self._key) if self._key else None,
                              self._outputs)

    # -- run ------------------------------------------------------------

    def run(self):
        """Execute the configured subcommand; the manifest is written even on failure."""
        command = self.config.command
        handler = getattr(self, f"run_{command}", None)
        if handler is None:
            raise DomainError(f"unknown command {command!r}")
        try:
            result = handler()
        finally:
            self.write_manifest()
        logger.info("Success! %s finished, reports in %s", command, self.config.output_dir)
        return result

    def run_ingest(self):
        config = self.config
        samples = config.samples or self.output("samples.jsonl")
        as_map, pseudonymizer = self.as_map(), self.pseudonymizer
        if config.action == "listen":
            ingestor = SflowIngestor(as_map, pseudonymizer, config.port)
            with SamplesWriter(samples, append=True) as writer:
                written = writer.write_all(ingestor.listen(config.host, config.count,
                                                           config.listen_seconds))
            self.report("ingest_stats", ingestor.stats.as_dict().items(), ("metric", "value"))
        elif config.action == "sflow":
            ingestor = SflowIngestor(as_map, pseudonymizer, config.port)
            with SamplesWriter(samples) as writer:
                for path in config.inputs:
                    logger.info("Reading sFlow datagrams from %s", path)
                    writer.write_all(ingestor.decode_capture(self._input(path, "capture")))
                written = writer.count
            self.report("ingest_stats", ingestor.stats.as_dict().items(), ("metric", "value"))
        elif config.action == "pcap":
            with SamplesWriter(samples) as writer:
                for path in config.inputs:
                    logger.info("Replaying %s at 1/%d", path, config.rate_reciprocal)
                    writer.write_all(decode_pcap(self._input(path, "capture"), as_map,
                                                 pseudonymizer, config.rate_reciprocal))
                written = writer.count
        else:
            raise DomainError(f"unknown ingest source {config.action!r}")
        logger.info("Wrote %d samples to %s", written, samples)
        return written

    def classify(self, packets, intel):
        result = Classifier(self.registry, intel, self.config.scanner_basis).classify(packets)
        if self.config.verdicts:
            verdicts_path = self.config.verdicts
            self._outputs.append(verdicts_path)
        else:
            verdicts_path = self.output("verdicts.jsonl")
        write_verdicts(result.verdicts, verdicts_path)
        self.report("accounting", result.accounting.rows(), ("stage", "packets", "%"),
                    "Packets after each filtering step")
        return result

    def roles(self, packets, verdicts):
        roles = host_roles(packets, verdicts)
        if self.config.min_rate > 0:
            model = self.sampling_model(len(packets))
            kept = filter_active_hosts(roles, host_packet_counts(packets), model,
                                       self.config.min_rate)
            logger.info("%d of %d hosts reach %.2f packets/minute", len(kept), len(roles),
                        self.config.min_rate)
            roles = kept
        return roles

    def host_reports(self, packets, verdicts):
        roles = self.roles(packets, verdicts)
        self.report("hosts", [(r.host.pseudonym, r.host.asn, r.host.in_ixp_area,
                               r.protocols_legitimate, r.protocols_scanned, r.has_it_traffic)
                              for r in roles],
                    ("host", "asn", "ixp_area", "legitimate", "scanned", "it_traffic"))
        security = security_summary(packets, verdicts, self.registry)
        self.report("security", [("ics hosts", security["hosts"], 100.0),
                                 ("insecure hosts", security["insecure_hosts"],
                                  security["insecure_share"])],
                    ("hosts", "count", "%"), "Reliance on insecure communication")
        self.report("legitimate_protocols", security["protocols"], ("protocol", "packets", "%"))
        scans = scan_kind_breakdown(packets, verdicts)
        self.report("scan_kinds", scans["kinds"], ("kind", "packets", "%"))
        self.report("scanned_protocols", scans["protocols"], ("protocol", "packets", "%"))
        logger.info("%d scanner packets from %d hosts", scans["packets"], scans["hosts"])
        return roles

    def run_classify(self):
        packets = self.load_samples()
        result = self.classify(packets, self.load_intel())
        self.host_reports(packets, result.verdicts)
        return result

    def run_dissect(self):
        if self.config.action != "patterns":
            raise DomainError(f"unknown dissect action {self.config.action!r}")
        self.report("probe_patterns", probe_patterns(), ("protocol", "kind", "pattern"),
                    "Probe signatures")
        self.report("it_patterns", ItRecognizer().patterns(), ("label", "pattern"),
                    "IT protocol patterns")

    def run_stats(self):
        config = self.config
        if config.sampled_n is None:
            raise DomainError("--sampled-n is needed")
        model = self.sampling_model(config.sampled_n)
        rows = [("p_hat", model.p_hat()), ("expected sampled", model.expected_sampled()),
                ("P(X>=1)", model.prob_at_least_one()), ("model valid", model.valid)]
        if config.action == "prob":
            if config.k is not None:
                rows.insert(2, (f"P(X={config.k})", model.prob_k(config.k)))
            self.report("stats_prob", rows, ("metric", "value"), "Detection probability")
        elif config.action == "montecarlo":
            result = monte_carlo_detection(model, config.trials, config.seed, config.shards)
            rows += [("P(X>=1) simulated", result.probability),
                     ("half-width (95%)", result.half_width),
                     ("trials", result.trials), ("seed", result.seed)]
            self.report("stats_montecarlo", rows, ("metric", "value"), "Monte Carlo check")
        else:
            raise DomainError(f"unknown stats action {config.action!r}")
        for metric, value in rows:
            logger.info("%s = %s", metric, value)
        return rows

    def run_baseline(self):
        if self.config.action == "queries":
            return self.report("baseline_queries", shodan_queries(self.config.country),
                               ("protocol", "query"))
        if self.config.action != "import":
            raise DomainError(f"unknown baseline action {self.config.action!r}")
        hosts = self.load_baseline()
        self.report("baseline_protocols", baseline_protocol_table(hosts),
                    ("protocol", "hosts", "% of hosts", "area hosts", "% of area hosts"),
                    "Hosts exposing industrial protocols")
        return hosts

    def compare_reports(self, packets, verdicts, roles, baseline):
        comparison = compare(roles, baseline)
        self.report("comparison", comparison.rows() + [("overall",) + comparison.overall],
                    ("protocol", "h", "h_S", "i"), "Observed hosts against the baseline")
        report = exposure_report(roles, baseline, self.config.top_k)
        silent, silent_share = silent_baseline_hosts(
            baseline, {h for p in packets for h in (p.src, p.dst) if h != NO_HOST},
            [r.host for r in roles if r.protocols_legitimate])
        self.report("exposure", [
            ("observed ics hosts", report.observed, 100.0),
            ("identified by baseline", report.identified, report.identified_share),
            ("ics ports exposed", report.ics_exposed, report.ics_exposed_share),
            ("vulnerable hosts", report.vulnerable_hosts, report.vulnerable_share),
            ("cves", report.cve_count, None),
            ("baseline hosts without ics traffic", silent, silent_share),
        ], ("metric", "count", "%"), "Exposure of observed hosts")
        self.report("exposed_protocols", report.exposed_protocols, ("protocol", "hosts", "%"))
        self.report("top_products", report.top_products, ("product", "hosts", "%"))
        self.report("top_ports", report.top_ports, ("port", "hosts", "%"))
        self.report("cve_severity", sorted(report.buckets.items()), ("severity", "cves"))
        self.report("cve_thresholds", report.thresholds,
                    ("cvss", "% of cves", "% of vulnerable hosts"))
        return comparison

    def run_compare(self):
        packets, verdicts = self.load_samples(), self.load_verdicts()
        return self.compare_reports(packets, verdicts, self.roles(packets, verdicts),
                                    self.load_baseline())

    def flow_reports(self, packets, verdicts):
        iana = self.config.iana or (DEFAULT_IANA_TABLE if os.path.exists(DEFAULT_IANA_TABLE)
                                    else None)
        services = IanaServices.from_file(self._input(iana, "IANA services")) if iana \
            else IanaServices()
        flows = aggregate(packets, verdicts, self.config.flow_timeout, services)
        port_churn(flows)
        pairs = ics_pairs_of(packets, verdicts)
        populations = [self.config.population] if self.config.population \
            else [POPULATION_OVERALL, POPULATION_ICS_PAIRS]
        rows = []
        for population in populations:
            for result in quadrants(flows, population, pairs, self.config.top_k):
                rows += [(population, result.basis, result.mapping, rank, label, share)
                         for rank, (label, share) in enumerate(result.shares, 1)]
        self.report("flows_breakdown", rows,
                    ("population", "basis", "mapping", "rank", "label", "%"),
                    "Top non-industrial protocols")
        coexistence = it_coexistence(host_roles(packets, verdicts), flows, pairs)
        self.report("it_coexistence", [
            ("ics hosts with it traffic", coexistence.hosts_with_it, coexistence.host_share),
            ("ics pairs with it traffic", coexistence.pairs_with_it, coexistence.pair_share),
        ], ("metric", "count", "%"), "Industrial and IT traffic on the same hosts")
        logger.info("Aggregated %d flows", len(flows))
        return flows

    def run_flows(self):
        return self.flow_reports(self.load_samples(), self.load_verdicts())

    def intel_reports(self, packets, verdicts, intel, actions=("actors", "geo")):
        scanners = {packets[v.ref].src for v in verdicts
                    if v.label is VerdictLabel.ICS_SCANNER} - {NO_HOST}
        if "actors" in actions:
            breakdown = intel.actor_breakdown(scanners, self.config.top_k)
            self.report("actors", breakdown.top_actors, ("actor", "% of scanners"),
                        "Scanner actors")
            self.report("scanner_classes",
                        [(c.value, share) for c, share in zip(Classification,
                                                              breakdown.class_shares)],
                        ("classification", "% of scanners"))
        if "geo" in actions:
            counts = list(intel.geo_counts(scanners).items())
            self.report("geo", counts, ("country", "count"), "Malicious scanners per country")
            if self.config.heatmap:
                if counts:
                    CountryHeatmap().save(counts, self.output("geo.png"))
                else:
                    logger.warning("No malicious scanners with intel; heatmap skipped")
        return scanners

    def run_intel(self):
        if self.config.action not in ("actors", "geo"):
            raise DomainError(f"unknown intel action {self.config.action!r}")
        packets, verdicts = self.load_samples(), self.load_verdicts()
        return self.intel_reports(packets, verdicts, self.load_intel(), (self.config.action,))

    def profile(self):
        config = self.config
        transactions = []
        for part in config.profile.split("+"):
            if part == "modbus":
                transactions.append(Transaction(TransactionKind.MODBUS_WRITE_SINGLE_REGISTER,
                                                config.modbus_rate))
            elif part == "mqtt":
                transactions.append(Transaction(TransactionKind.MQTT_PUBLISH, config.mqtt_rate))
            else:
                raise DomainError(f"unknown profile part {part!r}")
        return TrafficProfile(tuple(transactions), config.duration, seed=config.seed)

    def sampler(self):
        return SamplerConfig(
            self.config.rate_reciprocal,
            SamplingMode.DETERMINISTIC_EVERY_NTH if self.config.every_nth else SamplingMode.BERNOULLI,
            not self.config.all_directions)

    def run_synth(self):
        config = self.config
        profile, sampler = self.profile(), self.sampler()
        stream = generate(profile)
        outcome = sample(stream, sampler, config.seed)
        logger.info("Sampled %d of %d eligible packets", outcome.sampled_count,
                    outcome.eligible_count)
        rows = [("transactions", stream.transactions), ("packets", len(stream)),
                ("eligible", outcome.eligible_count), ("sampled", outcome.sampled_count)]
        if config.emit:
            path = self.output(EMIT_FILES[config.emit])
            needs_key = config.emit == "samples"
            written = emit(stream, outcome, config.emit, path,
                           self.as_map() if needs_key else None,
                           self.pseudonymizer if needs_key else None)
            logger.info("Wrote %d records to %s", written, path)
        if config.validate:
            report = validate_end_to_end(profile, sampler, config.seed, self.as_map(),
                                         self.pseudonymizer, self.load_intel(), config.via_sflow)
            rows = list(report.as_dict().items())
            self.report("validation", rows, ("metric", "value"), "End-to-end validation")
            return report.check()
        self.report("synth", rows, ("metric", "value"))
        return outcome

    def run_report(self):
        """Classification, host, flow, intel and (with a baseline) comparison reports."""
        packets = self.load_samples()
        intel = self.load_intel()
        result = self.classify(packets, intel)
        roles = self.host_reports(packets, result.verdicts)
        self.flow_reports(packets, result.verdicts)
        if self.config.intel:
            self.intel_reports(packets, result.verdicts, intel)
        if self.config.baseline:
            self.compare_reports(packets, result.verdicts, roles, self.load_baseline())
        return result
