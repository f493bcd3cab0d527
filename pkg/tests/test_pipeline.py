import csv
import json
import os

import pytest

from conftest import TEST_KEY, TEST_KEY_HEX
from icswatch import main
from src import IcsWatchPipeline
from src.anonymize import Pseudonymizer, key_fingerprint
from src.classifier import VerdictLabel, read_verdicts
from src.model import read_samples
from src.pipeline import RunConfig
from src.synth import CLIENT_ADDRESS


def _rows(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def _manifest(directory):
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as handle:
        return json.load(handle)


def test_missing_samples_file(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["classify", "--samples", str(tmp_path / "none.jsonl"), "-o", out, "-q"]) == 3
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "InputNotFoundError"
    assert record["exit_code"] == 3
    assert os.path.exists(os.path.join(out, "manifest.json"))


def test_unexpected_error_gets_an_error_record(tmp_path, monkeypatch, capsys):
    def fail(self):
        raise OSError("disk full")

    monkeypatch.setattr(IcsWatchPipeline, "run", fail)
    assert main(["stats", "prob", "--days", "31", "--sampled-n", "100", "--k", "0",
                 "-o", str(tmp_path), "-q"]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record == {"error": "OSError", "message": "disk full", "exit_code": 1}


def test_missing_key(tmp_path, monkeypatch):
    monkeypatch.delenv("ICSWATCH_TEST_KEY", raising=False)
    assert main(["ingest", "pcap", str(tmp_path / "capture.pcap"), "--key-env",
                 "ICSWATCH_TEST_KEY", "-o", str(tmp_path), "-q"]) == 4


def test_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["stats", "prob", "--days", "31"])
    assert info.value.code == 2


def test_config_from_args():
    args = type("Args", (), {})()
    args.command, args.inputs, args.verbose, args.seed = "ingest", ["a.pcap"], True, None
    config = RunConfig.from_args(args)
    assert config.inputs == ("a.pcap",)
    assert config.seed == 0
    assert RunConfig("classify", key_env="K").key_reference == "env:K"


def test_stats_prob(tmp_path):
    out = str(tmp_path)
    assert main(["stats", "prob", "--days", "31", "--sampled-n", "1599431398", "--k", "0",
                 "-o", out, "-q"]) == 0
    rows = dict((r[0], r[1]) for r in _rows(os.path.join(out, "stats_prob.csv"))[1:])
    assert float(rows["P(X=0)"]) == pytest.approx(1.8487e-5, rel=5e-3)
    assert float(rows["P(X>=1)"]) >= 0.999
    assert rows["model valid"] == "true"
    manifest = _manifest(out)
    assert manifest["outputs"] == ["stats_prob.csv"]
    assert manifest["key"] == {"reference": None, "fingerprint": None}
    assert manifest["config"]["sampled_n"] == 1599431398


def test_dissect_patterns(tmp_path):
    assert main(["dissect", "patterns", "-o", str(tmp_path), "--format", "json-lines",
                 "-q"]) == 0
    for name in ("probe_patterns.jsonl", "it_patterns.jsonl"):
        assert os.path.getsize(tmp_path / name) > 0


def test_baseline_queries(tmp_path):
    assert main(["baseline", "queries", "--country", "NL", "-o", str(tmp_path), "-q"]) == 0
    rows = _rows(tmp_path / "baseline_queries.csv")
    assert rows[0] == ["protocol", "query"]
    assert len(rows) > 1
    assert all("NL" in row[1] for row in rows[1:])


def test_synth_ingest_classify_report(tmp_path, key_file, as_map_file):
    keys = ["--key-file", key_file, "--as-map", as_map_file, "-q"]
    synth_dir = str(tmp_path / "synth")
    assert main(["synth", "--duration", "60", "--rate-reciprocal", "8", "--seed", "3",
                 "--emit", "pcap", "-o", synth_dir, "-q"]) == 0
    capture = os.path.join(synth_dir, "synth.pcap")
    assert os.path.exists(capture)

    run = str(tmp_path / "run")
    assert main(["ingest", "pcap", capture, "--rate-reciprocal", "8", "-o", run] + keys) == 0
    samples = os.path.join(run, "samples.jsonl")
    packets = list(read_samples(samples))
    client = Pseudonymizer(TEST_KEY).pseudonymize(CLIENT_ADDRESS)
    assert packets
    assert all(p.src.pseudonym == client and p.src.in_ixp_area for p in packets)
    assert all(p.sampling_rate_reciprocal == 8 for p in packets)
    manifest = _manifest(run)
    assert manifest["key"] == {"reference": key_file, "fingerprint": key_fingerprint(TEST_KEY)}
    assert TEST_KEY_HEX not in json.dumps(manifest)
    assert capture in manifest["inputs"]

    assert main(["classify", "--samples", samples, "-o", run] + keys) == 0
    verdicts = read_verdicts(os.path.join(run, "verdicts.jsonl"))
    labels = {v.label for v in verdicts}
    assert VerdictLabel.LEGITIMATE_ICS in labels
    assert VerdictLabel.ICS_SCANNER not in labels
    accounting = _rows(os.path.join(run, "accounting.csv"))
    assert accounting[1][:2] == ["Total sampled packets", str(len(packets))]
    hosts = {row[0] for row in _rows(os.path.join(run, "hosts.csv"))[1:]}
    assert client in hosts

    out = str(tmp_path / "report")
    assert main(["report", "--samples", samples, "-o", out] + keys) == 0
    for name in ("accounting", "hosts", "security", "legitimate_protocols", "scan_kinds",
                 "flows_breakdown", "it_coexistence", "manifest"):
        suffix = ".json" if name == "manifest" else ".csv"
        assert os.path.exists(os.path.join(out, name + suffix)), name


def test_synth_validation(tmp_path, key_file, as_map_file):
    assert main(["synth", "--validate", "--duration", "60", "--rate-reciprocal", "8",
                 "--seed", "3", "--key-file", key_file, "--as-map", as_map_file,
                 "-o", str(tmp_path), "-q"]) == 0
    rows = dict((r[0], r[1]) for r in _rows(tmp_path / "validation.csv")[1:])
    assert rows["passed"] == "true"
    assert rows["eligible"] == "1800"
