"""
Offline scanner-intelligence snapshot: per-host classification, actor and
country, loaded from a JSON-lines file.
"""
import enum
import ipaddress
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone

from .errors import InputNotFoundError, SchemaError
from .model import HostId

logger = logging.getLogger(__name__)

UNKNOWN_ACTOR = "unknown"
UNKNOWN_COUNTRY = "??"


class Classification(enum.Enum):
    MALICIOUS = "Malicious"
    BENIGN = "Benign"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class IntelRecord:
    host: str
    classification: Classification
    actor: str = None
    country_code: str = None
    last_seen: float = 0.0
    provenance: str = ""

    def __post_init__(self):
        if self.classification is not Classification.UNKNOWN and not self.provenance:
            raise ValueError(f"{self.classification.value} record needs a provenance note")
        if self.country_code is not None and (len(self.country_code) != 2
                                              or not self.country_code.isalpha()):
            raise ValueError(f"country code {self.country_code!r} is not ISO-3166 alpha-2")


@dataclass(frozen=True)
class ActorBreakdown:
    top_actors: list
    class_shares: tuple  # (malicious %, benign %, unknown %)
    hosts: int = 0


def _timestamp(value):
    if value is None or value == "":
        return 0.0
    if isinstance(value, (int, float)):
        return float(value)
    parsed = datetime.fromisoformat(str(value).replace("Z", "+00:00"))
    if parsed.tzinfo is None:
        parsed = parsed.replace(tzinfo=timezone.utc)
    return parsed.timestamp()


def _host_key(host):
    return host.pseudonym if isinstance(host, HostId) else host


class IntelStore:
    """Read-only intel snapshot indexed by host pseudonym."""

    def __init__(self, records=()):
        self._records = {}
        for record in records:
            self.add(record)

    def add(self, record):
        """Insert a record; on duplicates the latest last_seen wins."""
        current = self._records.get(record.host)
        if current is None or record.last_seen >= current.last_seen:
            self._records[record.host] = record

    @classmethod
    def from_file(cls, path, pseudonymizer=None):
        """
        Load an intel file.

        Args:
            path: JSON-lines file with host, classification, actor, country,
                last_seen and provenance fields
            pseudonymizer: Pseudonymizer applied to hosts given as dotted IPv4

        Returns:
            IntelStore; records violating the schema are logged and skipped
        """
        if not os.path.exists(path):
            raise InputNotFoundError(f"intel file not found: {path}")
        store, skipped = cls(), 0
        with open(path, encoding="utf-8") as handle:
            for number, line in enumerate(handle, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    store.add(cls._parse(line, number, pseudonymizer))
                except SchemaError as exc:
                    logger.warning("%s: %s", path, exc)
                    skipped += 1
        logger.info("Loaded %d intel hosts from %s (%d records skipped)",
                    len(store), path, skipped)
        return store

    @staticmethod
    def _parse(line, number, pseudonymizer):
        try:
            raw = json.loads(line)
            host = str(raw["host"])
            try:
                ipaddress.IPv4Address(host)
            except ValueError:
                pass
            else:
                if pseudonymizer is None:
                    raise ValueError("dotted IPv4 host needs the run key")
                host = pseudonymizer.pseudonymize(host)
            return IntelRecord(
                host=host,
                classification=Classification(raw.get("classification", "Unknown")),
                actor=raw.get("actor") or None,
                country_code=(raw.get("country") or None),
                last_seen=_timestamp(raw.get("last_seen")),
                provenance=str(raw.get("provenance") or ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad intel record: {exc}", number) from exc

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(sorted(self._records.values(), key=lambda r: r.host))

    def lookup(self, host):
        """Return the IntelRecord of a host (HostId or pseudonym), or None."""
        return self._records.get(_host_key(host))

    def is_scanner(self, host):
        """Any intel record marks the host as a known scanner."""
        return _host_key(host) in self._records

    def actor_breakdown(self, scanner_hosts, top_k=5):
        """
        Actor and classification shares over a set of scanner hosts.

        Hosts without intel count as Unknown with an unknown actor.
        """
        hosts = sorted({_host_key(h) for h in scanner_hosts})
        if not hosts:
            return ActorBreakdown([], (0.0, 0.0, 0.0), 0)
        actors, classes = Counter(), Counter()
        for host in hosts:
            record = self.lookup(host)
            actors[record.actor if record and record.actor else UNKNOWN_ACTOR] += 1
            classes[record.classification if record else Classification.UNKNOWN] += 1
        total = len(hosts)
        ranked = sorted(actors.items(), key=lambda item: (-item[1], item[0]))
        return ActorBreakdown(
            top_actors=[(actor, 100.0 * count / total) for actor, count in ranked[:top_k]],
            class_shares=tuple(100.0 * classes[c] / total for c in Classification),
            hosts=total,
        )

    def geo_counts(self, scanner_hosts):
        """Country -> host count over the Malicious hosts among scanner_hosts."""
        counts = Counter()
        for host in {_host_key(h) for h in scanner_hosts}:
            record = self.lookup(host)
            if record is not None and record.classification is Classification.MALICIOUS:
                counts[record.country_code or UNKNOWN_COUNTRY] += 1
        return dict(sorted(counts.items(), key=lambda item: (-item[1], item[0])))


def write_intel(records, path):
    """Write IntelRecords as an intel file."""
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps({
                "host": record.host,
                "classification": record.classification.value,
                "actor": record.actor,
                "country": record.country_code,
                "last_seen": datetime.fromtimestamp(record.last_seen, timezone.utc)
                .strftime("%Y-%m-%dT%H:%M:%SZ"),
                "provenance": record.provenance,
            }, sort_keys=True) + "\n")
