"""
Report emission (CSV, JSON lines, rich tables) and run manifests.
"""
import csv
import dataclasses
import enum
import hashlib
import json
import logging
import os
import sys

from rich.console import Console
from rich.table import Table

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("csv", "json-lines", "pretty-table")
EXTENSIONS = {"csv": ".csv", "json-lines": ".jsonl", "pretty-table": ".txt"}
TABLE_WIDTH = 120


def _is_percent(header):
    return "%" in header or header.endswith("share")


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (set, frozenset, list, tuple)):
        return ";".join(sorted(str(_plain(v)) for v in value))
    return value


def format_cell(value, header=""):
    """Text of one report cell; percentages get one decimal."""
    value = _plain(value)
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.1f}" if _is_percent(header) else f"{value:.6g}"
    return str(value)


def _json_cell(value, header):
    value = _plain(value)
    if isinstance(value, float) and _is_percent(header):
        return round(value, 1)
    return value


def report_path(output_dir, name, report_format):
    return os.path.join(output_dir, name + EXTENSIONS[report_format])


def emit_report(rows, headers, path=None, report_format="csv", title=None):
    """
    Write a table of results.

    Args:
        rows: Sequence of row tuples in column order
        headers: Column names
        path: Output file; stdout when None
        report_format: 'csv', 'json-lines' or 'pretty-table'
        title: Caption of the pretty table

    Returns:
        The path written, or None for stdout
    """
    if report_format not in REPORT_FORMATS:
        raise ValueError(f"unknown report format {report_format!r}")
    headers = list(headers)
    handle = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        if report_format == "csv":
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(headers)
            for row in rows:
                writer.writerow([format_cell(v, h) for v, h in zip(row, headers)])
        elif report_format == "json-lines":
            for row in rows:
                record = {h: _json_cell(v, h) for h, v in zip(headers, row)}
                handle.write(json.dumps(record) + "\n")
        else:
            table = Table(title=title)
            for header in headers:
                table.add_column(header, justify="right" if _is_percent(header) else "left")
            for row in rows:
                table.add_row(*(format_cell(v, h) for v, h in zip(row, headers)))
            Console(file=handle, width=TABLE_WIDTH, color_system=None).print(table)
    finally:
        if path:
            handle.close()
    if path:
        logger.debug("Wrote report %s", path)
    return path


def file_digest(path):
    """SHA-256 of a file, read in 1 MiB blocks."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1024 * 1024), b""):
            digest.update(block)
    return digest.hexdigest()


def _jsonable(value):
    if isinstance(value, enum.Enum):
        return value.value
    if dataclasses.is_dataclass(value):
        return _jsonable(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_manifest(output_dir, config, inputs, version, key_reference=None, fingerprint=None,
                   outputs=()):
    """
    Write ``manifest.json`` describing one run.

    Args:
        output_dir: Directory of the run's artifacts
        config: RunConfig (or any dataclass / dict)
        inputs: Paths of the input files; each gets its SHA-256 digest
        version: Software version string
        key_reference: Where the key came from (file path or env variable name)
        fingerprint: Key fingerprint; the key itself is never written
        outputs: Paths of the files the run produced

    Returns:
        Path of the manifest
    """
    manifest = {
        "version": version,
        "config": _jsonable(config),
        "inputs": {path: file_digest(path) for path in sorted(set(inputs)) if os.path.isfile(path)},
        "outputs": sorted(os.path.relpath(p, output_dir) for p in set(outputs) if p),
        "key": {"reference": key_reference, "fingerprint": fingerprint},
    }
    path = os.path.join(output_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")
    return path


def error_record(exc):
    """One-line JSON error record for stderr."""
    return json.dumps({"error": type(exc).__name__, "message": str(exc),
                       "exit_code": getattr(exc, "exit_code", 1)})
