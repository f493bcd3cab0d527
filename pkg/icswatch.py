#!/usr/bin/env python3
"""
ICSWatch - Main CLI application
Passive analysis of industrial control system traffic in sampled IXP data.
"""

import argparse
import logging
import os
import sys

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from src import IcsWatchPipeline, RunConfig
from src.errors import IcsWatchError
from src.reports import REPORT_FORMATS, error_record

EPILOG = """
Input formats (see FORMATS.md):
  samples    JSON lines, one sampled packet per line (ref = line index)
  verdicts   JSON lines: ref, label, protocol, basis, probe, it
  intel      JSON lines: host, classification, actor, country, last_seen, provenance
  baseline   JSON lines (schema 1): schema, ip, asn, ports, tags, product, banner, vulns
  AS map     "CIDR, ASN, area(0/1)" lines, '#' comments
  registry   "name | tcp ranges | udp ranges | secure ports | tier" lines

Key material is read from --key-file (16 raw bytes or 32 hex chars) or from
the environment variable named by --key-env; never from the command line.

Exit codes:
  0 success, 1 other error, 2 usage, 3 input not found, 4 key material,
  5 format / schema error, 6 domain / model validity, 7 inconsistent labels,
  8 validation failure

Examples:
  # Decode sFlow datagrams recorded at the collector
  python icswatch.py ingest sflow collector.pcap --key-env ICSWATCH_KEY --as-map asmap.txt -o run/

  # Classify the samples with an intel snapshot
  python icswatch.py classify --samples run/samples.jsonl --intel intel.jsonl -o run/

  # Probability of missing a host sending one packet per minute for 31 days
  python icswatch.py stats prob --days 31 --sampled-n 1599431398 --k 0

  # Replay the 24 h self-injection validation
  python icswatch.py synth --validate --key-env ICSWATCH_KEY -o synth/
"""


def add_common(parser):
    parser.add_argument('-o', '--output-dir', default='.',
                        help='Directory for reports and manifest.json (default: .)')
    parser.add_argument('--format', dest='report_format', choices=REPORT_FORMATS, default='csv',
                        help='Report format (default: csv)')
    parser.add_argument('--key-file', help='File with the 128-bit pseudonymization key')
    parser.add_argument('--key-env', help='Environment variable holding the key as hex')
    parser.add_argument('--registry', help='Protocol registry file replacing the built-in one')
    parser.add_argument('--as-map', help='AS map file (CIDR, ASN, area)')
    parser.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='Warnings and errors only')


def add_analysis(parser, verdicts=True):
    parser.add_argument('--samples', required=True, help='Samples file')
    if verdicts:
        parser.add_argument('--verdicts', required=True, help='Verdicts file from classify')
    parser.add_argument('--min-rate', type=float, default=0.0,
                        help='Only report hosts with an estimated rate of at least this many '
                             'packets/minute (needs --days; default: 0 = off)')
    parser.add_argument('--days', type=float, help='Observation period in days')
    parser.add_argument('--rate-reciprocal', type=int, default=4096,
                        help='Sampling rate reciprocal (default: 4096)')
    parser.add_argument('--top-k', type=int, default=5, help='Ranking length (default: 5)')


def add_model(parser):
    parser.add_argument('--days', type=float, required=True, help='Observation period T in days')
    parser.add_argument('--sampled-n', type=int, required=True, help='Sampled packets n')
    parser.add_argument('--rate-reciprocal', type=int, default=4096,
                        help='Sampling rate reciprocal (default: 4096)')
    parser.add_argument('--total-n', type=float,
                        help='Packets crossing the exchange N (default: n * rate)')
    parser.add_argument('--host-rate', type=float, default=1.0,
                        help='Host packets per minute (default: 1)')
    parser.add_argument('--strict-model', action='store_true',
                        help='Fail instead of warning when n*10 > N')


def build_parser():
    parser = argparse.ArgumentParser(
        description='Passive analysis of ICS traffic in sampled IXP data',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    commands = parser.add_subparsers(dest='command', required=True)

    ingest = commands.add_parser('ingest', help='Decode captures into a samples file')
    sources = ingest.add_subparsers(dest='action', required=True)
    for name, text in (('pcap', 'Replay full-packet pcap files'),
                       ('sflow', 'Decode pcap files of sFlow datagrams')):
        source = sources.add_parser(name, help=text)
        source.add_argument('inputs', nargs='+', help='Capture file(s)')
        source.add_argument('--samples', help='Samples file to write (default: OUTPUT/samples.jsonl)')
        source.add_argument('--port', type=int, default=6343, help='sFlow UDP port (default: 6343)')
        source.add_argument('--rate-reciprocal', type=int, default=1,
                            help='Rate reciprocal stamped on replayed frames (default: 1)')
        add_common(source)
    listen = sources.add_parser('listen', help='Receive sFlow datagrams over UDP')
    listen.add_argument('--samples', help='Samples file to append to')
    listen.add_argument('--host', default='', help='Address to bind (default: all)')
    listen.add_argument('--port', type=int, default=6343, help='UDP port (default: 6343)')
    listen.add_argument('--count', type=int, help='Stop after this many datagrams')
    listen.add_argument('--duration', dest='listen_seconds', type=float,
                        help='Stop after this many seconds')
    add_common(listen)

    classify = commands.add_parser('classify', help='Three-step classification of samples')
    add_analysis(classify, verdicts=False)
    classify.add_argument('--intel', help='Intel file of known scanners')
    classify.add_argument('--verdicts', help='Verdicts file to write (default: OUTPUT/verdicts.jsonl)')
    classify.add_argument('--scanner-basis', choices=('intel', 'intel+sig'), default='intel+sig',
                          help='Mark step-2 scanners by intel only or also by probe signatures')
    add_common(classify)

    dissect = commands.add_parser('dissect', help='Dissector tables')
    dissect_actions = dissect.add_subparsers(dest='action', required=True)
    add_common(dissect_actions.add_parser('patterns', help='Dump probe and IT patterns'))

    stats = commands.add_parser('stats', help='Sampling model')
    stats_actions = stats.add_subparsers(dest='action', required=True)
    prob = stats_actions.add_parser('prob', help='Analytic detection probability')
    add_model(prob)
    prob.add_argument('--k', type=int, help='Also report P(X=k)')
    add_common(prob)
    montecarlo = stats_actions.add_parser('montecarlo', help='Monte Carlo check of P(X>=1)')
    add_model(montecarlo)
    montecarlo.add_argument('--trials', type=int, default=100000, help='Trials (default: 100000)')
    montecarlo.add_argument('--seed', type=int, default=0, help='Seed (default: 0)')
    montecarlo.add_argument('--shards', type=int, default=8, help='Random streams (default: 8)')
    add_common(montecarlo)

    baseline = commands.add_parser('baseline', help='Active-scan baseline')
    baseline_actions = baseline.add_subparsers(dest='action', required=True)
    imported = baseline_actions.add_parser('import', help='Per-protocol table of an export')
    imported.add_argument('inputs', nargs=1, help='Baseline export (JSON lines)')
    imported.add_argument('--area-only', action='store_true', help='Keep IXP-area hosts only')
    add_common(imported)
    queries = baseline_actions.add_parser('queries', help='List the baseline search queries')
    queries.add_argument('--country', default='IT', help='ISO country code (default: IT)')
    add_common(queries)

    compare = commands.add_parser('compare', help='Observed hosts against the baseline')
    add_analysis(compare)
    compare.add_argument('--baseline', required=True, help='Baseline export')
    compare.add_argument('--area-only', action='store_true', help='Keep IXP-area hosts only')
    add_common(compare)

    flows = commands.add_parser('flows', help='Flow statistics of non-industrial traffic')
    add_analysis(flows)
    flows.add_argument('--iana', help='IANA services CSV (default: data/iana_services.csv)')
    flows.add_argument('--flow-timeout', type=float, default=300.0,
                       help='Idle seconds closing a flow (default: 300)')
    flows.add_argument('--population', choices=('overall', 'ics-to-ics'),
                       help='Only this population (default: both)')
    add_common(flows)

    intel = commands.add_parser('intel', help='Scanner actors and origins')
    intel_actions = intel.add_subparsers(dest='action', required=True)
    for name, text in (('actors', 'Top actors and classification shares'),
                       ('geo', 'Malicious scanners per country, with heatmap')):
        action = intel_actions.add_parser(name, help=text)
        add_analysis(action)
        action.add_argument('--intel', required=True, help='Intel file')
        action.add_argument('--no-heatmap', dest='heatmap', action='store_false',
                            help='Skip the heatmap image')
        add_common(action)

    synth = commands.add_parser('synth', help='Synthetic traffic and end-to-end validation')
    synth.add_argument('--profile', default='modbus+mqtt',
                       choices=('modbus+mqtt', 'modbus', 'mqtt'), help='Transaction mix')
    synth.add_argument('--modbus-rate', type=float, default=10.0, help='Modbus tx/s (default: 10)')
    synth.add_argument('--mqtt-rate', type=float, default=10.0, help='MQTT tx/s (default: 10)')
    synth.add_argument('--duration', type=int, default=86400, help='Seconds (default: 86400)')
    synth.add_argument('--seed', type=int, default=0, help='Seed (default: 0)')
    synth.add_argument('--rate-reciprocal', type=int, default=4096,
                       help='Sampling rate reciprocal (default: 4096)')
    synth.add_argument('--every-nth', action='store_true',
                       help='Deterministic every-Nth sampling instead of Bernoulli')
    synth.add_argument('--all-directions', action='store_true',
                       help='Sample both directions, not only client traffic')
    synth.add_argument('--emit', choices=('pcap', 'sflow', 'samples'),
                       help='Write the sampled packets in this form')
    synth.add_argument('--validate', action='store_true', help='Run the end-to-end validation')
    synth.add_argument('--direct', dest='via_sflow', action='store_false',
                       help='Validate without the sFlow encode/decode round trip')
    synth.add_argument('--intel', help='Intel file used by the validation')
    add_common(synth)

    report = commands.add_parser('report', help='All tables from one samples file')
    add_analysis(report, verdicts=False)
    report.add_argument('--intel', help='Intel file')
    report.add_argument('--baseline', help='Baseline export')
    report.add_argument('--area-only', action='store_true', help='Keep IXP-area baseline hosts')
    report.add_argument('--iana', help='IANA services CSV')
    report.add_argument('--verdicts', help='Verdicts file to write')
    report.add_argument('--scanner-basis', choices=('intel', 'intel+sig'), default='intel+sig')
    report.add_argument('--flow-timeout', type=float, default=300.0)
    add_common(report)
    return parser


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


def main(argv=None):
    """Main CLI entry point."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    config = RunConfig.from_args(args)

    try:
        IcsWatchPipeline(config).run()
    except IcsWatchError as e:
        print(error_record(e), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logging.getLogger(__name__).debug("Unexpected error", exc_info=True)
        print(error_record(e), file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
