"""
Industrial protocol registry.

Holds the catalogue of industrial protocols, the TCP/UDP port ranges they
use, the ports reserved for their transport-encrypted variants and whether
a header dissector exists for them.
"""
import enum
import logging
from dataclasses import dataclass, field

from .errors import DomainError, RegistryError

logger = logging.getLogger(__name__)


class ProtocolId(enum.Enum):
    """Closed set of industrial protocols known to the analysis."""

    AMQP = "AMQP"
    ANSI_C12_22 = "ANSI C12.22"
    ATG = "ATG"
    BACNET_IP = "BACnet/IP"
    COAP = "CoAP"
    CODESYS = "Codesys"
    CRIMSON_V3 = "Crimson v3"
    DNP3 = "DNP3"
    ETHERCAT = "EtherCAT"
    ETHERNET_IP = "Ethernet/IP"
    FL_NET = "FL-net"
    FF_HSE = "FF HSE"
    GE_SRTP = "GE-SRTP"
    HART_IP = "HART IP"
    ICCP = "ICCP"
    IEC_60870_5_104 = "IEC60870-5-104"
    IEC_61850 = "IEC61850"
    MODBUS_TCP = "Modbus/TCP"
    MELSEC_Q = "MELSEC-Q"
    MQTT = "MQTT"
    NIAGARA_FOX = "Niagara Fox"
    OMRON_FINS = "OMRON FINS"
    OPC_UA = "OPC UA"
    PCWORX = "PCWorx"
    PROCONOS = "ProConOS"
    PROFINET = "PROFINET"
    S7COMM = "S7comm"
    ZIGBEE_IP = "Zigbee IP"

    @classmethod
    def from_name(cls, name):
        """Resolve a display name (or enum member name) to a ProtocolId."""
        for member in cls:
            if name in (member.value, member.name):
                return member
        raise RegistryError(f"unknown protocol name: {name!r}")

    def __lt__(self, other):
        if not isinstance(other, ProtocolId):
            return NotImplemented
        return self.value.lower() < other.value.lower()


class DissectorTier(enum.Enum):
    FULL = "Full"
    PORT_ONLY = "PortOnly"


# Protocols sharing TCP 102 are reported as one group.
PORT_102_GROUP = "ICCP/IEC61850/s7"
_PORT_102_MEMBERS = frozenset({ProtocolId.ICCP, ProtocolId.IEC_61850, ProtocolId.S7COMM})


def report_group(protocol):
    """Return the reporting label of a protocol (port-102 protocols share one)."""
    if protocol in _PORT_102_MEMBERS:
        return PORT_102_GROUP
    return protocol.value


@dataclass(frozen=True)
class RegistryEntry:
    """One registry row: ports, secure ports and dissector tier of a protocol."""

    protocol: ProtocolId
    tcp_ports: tuple = ()
    udp_ports: tuple = ()
    secure_ports: frozenset = field(default_factory=frozenset)
    dissector_tier: DissectorTier = DissectorTier.PORT_ONLY

    def __post_init__(self):
        for lo, hi in self.tcp_ports + self.udp_ports:
            if not 0 <= lo <= hi <= 65535:
                raise RegistryError(f"{self.protocol.value}: bad port range {lo}-{hi}")
        for port in self.secure_ports:
            if not (self.covers(port, "tcp") or self.covers(port, "udp")):
                raise RegistryError(
                    f"{self.protocol.value}: secure port {port} outside its ranges")

    def ranges(self, transport):
        return self.tcp_ports if transport == "tcp" else self.udp_ports

    def covers(self, port, transport):
        return any(lo <= port <= hi for lo, hi in self.ranges(transport))

    def port_count(self, transport):
        return sum(hi - lo + 1 for lo, hi in self.ranges(transport))


_F = DissectorTier.FULL
_P = DissectorTier.PORT_ONLY

BUILTIN_ENTRIES = (
    RegistryEntry(ProtocolId.AMQP, ((5671, 5672),), (), frozenset({5671}), _F),
    RegistryEntry(ProtocolId.ANSI_C12_22, ((1153, 1153),), ((1153, 1153),), frozenset(), _F),
    RegistryEntry(ProtocolId.ATG, ((10001, 10001),), (), frozenset(), _F),
    RegistryEntry(ProtocolId.BACNET_IP, (), ((47808, 47808),), frozenset(), _F),
    RegistryEntry(ProtocolId.COAP, ((5683, 5683),), ((5683, 5683),), frozenset(), _F),
    RegistryEntry(ProtocolId.CODESYS, ((2455, 2455),), (), frozenset(), _P),
    RegistryEntry(ProtocolId.CRIMSON_V3, ((789, 789),), (), frozenset(), _P),
    RegistryEntry(ProtocolId.DNP3, ((20000, 20000),), ((20000, 20000),), frozenset(), _F),
    RegistryEntry(ProtocolId.ETHERCAT, ((34980, 34980),), ((34980, 34980),), frozenset(), _F),
    RegistryEntry(ProtocolId.ETHERNET_IP, ((44818, 44818),), ((2222, 2222),), frozenset(), _F),
    RegistryEntry(ProtocolId.FL_NET, (), ((55000, 55003),), frozenset(), _P),
    RegistryEntry(ProtocolId.FF_HSE, ((1089, 1091),), ((1089, 1091),), frozenset(), _F),
    RegistryEntry(ProtocolId.GE_SRTP, ((18245, 18246),), (), frozenset(), _P),
    RegistryEntry(ProtocolId.HART_IP, ((5094, 5094),), ((5094, 5094),), frozenset(), _F),
    RegistryEntry(ProtocolId.ICCP, ((102, 102),), (), frozenset(), _F),
    RegistryEntry(ProtocolId.IEC_60870_5_104, ((2404, 2404),), (), frozenset(), _F),
    RegistryEntry(ProtocolId.IEC_61850, ((102, 102),), (), frozenset(), _F),
    RegistryEntry(ProtocolId.MODBUS_TCP, ((502, 502),), (), frozenset(), _F),
    RegistryEntry(ProtocolId.MELSEC_Q, ((5007, 5007),), ((5006, 5006),), frozenset(), _P),
    RegistryEntry(ProtocolId.MQTT, ((1883, 1883), (8883, 8883)), (), frozenset({8883}), _F),
    RegistryEntry(ProtocolId.NIAGARA_FOX, ((1911, 1911), (4911, 4911)), (), frozenset(), _P),
    RegistryEntry(ProtocolId.OMRON_FINS, (), ((9600, 9600),), frozenset(), _F),
    RegistryEntry(ProtocolId.OPC_UA, ((4840, 4840),), (), frozenset(), _F),
    RegistryEntry(ProtocolId.PCWORX, ((1962, 1962),), (), frozenset(), _P),
    RegistryEntry(ProtocolId.PROCONOS, ((20547, 20547),), ((20547, 20547),), frozenset(), _P),
    RegistryEntry(ProtocolId.PROFINET, ((34962, 34964),), ((34962, 34964),), frozenset(), _F),
    RegistryEntry(ProtocolId.S7COMM, ((102, 102),), (), frozenset(), _F),
    RegistryEntry(ProtocolId.ZIGBEE_IP, ((17754, 17756),), ((17754, 17756),), frozenset(), _F),
)


class ProtocolRegistry:
    """Read-only port-to-protocol index over a set of registry entries."""

    def __init__(self, entries=BUILTIN_ENTRIES):
        """
        Build the registry index.

        Args:
            entries: Iterable of RegistryEntry, at most one per protocol
        """
        self._entries = {}
        for entry in entries:
            if entry.protocol in self._entries:
                raise RegistryError(f"duplicate registry entry for {entry.protocol.value}")
            self._entries[entry.protocol] = entry

        self._index = {"tcp": {}, "udp": {}}
        for entry in self._entries.values():
            for transport in ("tcp", "udp"):
                for lo, hi in entry.ranges(transport):
                    for port in range(lo, hi + 1):
                        self._index[transport].setdefault(port, set()).add(entry.protocol)
        self._index = {
            transport: {port: frozenset(protos) for port, protos in ports.items()}
            for transport, ports in self._index.items()
        }

    @classmethod
    def from_file(cls, path):
        """
        Load a registry from a text file.

        Each non-comment line reads ``name | tcp | udp | secure | tier`` where
        port lists are comma separated ports or ``lo-hi`` ranges and ``-``
        means empty.
        """
        entries = []
        with open(path, encoding="utf-8") as handle:
            for number, line in enumerate(handle, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = [part.strip() for part in line.split("|")]
                if len(parts) != 5:
                    raise RegistryError(f"{path}:{number}: expected 5 fields, got {len(parts)}")
                name, tcp, udp, secure, tier = parts
                try:
                    tier_value = DissectorTier(tier)
                except ValueError:
                    raise RegistryError(f"{path}:{number}: unknown tier {tier!r}") from None
                secure_ports = frozenset(
                    port for lo, hi in _parse_ranges(secure, path, number)
                    for port in range(lo, hi + 1)
                )
                entries.append(RegistryEntry(
                    ProtocolId.from_name(name),
                    _parse_ranges(tcp, path, number),
                    _parse_ranges(udp, path, number),
                    secure_ports,
                    tier_value,
                ))
        logger.info("Loaded %d registry entries from %s", len(entries), path)
        return cls(entries)

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(sorted(self._entries.values(), key=lambda e: e.protocol))

    def entry(self, protocol):
        try:
            return self._entries[protocol]
        except KeyError:
            raise RegistryError(f"{protocol.value} not in registry") from None

    def lookup(self, port, transport):
        """
        Return every protocol whose range for the transport contains the port.

        Args:
            port: Transport port 0-65535
            transport: 'tcp' or 'udp' (anything else yields an empty set)

        Returns:
            frozenset of ProtocolId, empty when no range matches
        """
        return self._index.get(transport, {}).get(port, frozenset())

    def is_secure_port(self, protocol, port):
        entry = self.entry(protocol)
        if not (entry.covers(port, "tcp") or entry.covers(port, "udp")):
            raise DomainError(f"port {port} is not a {protocol.value} port")
        return port in entry.secure_ports

    def tier(self, protocol):
        return self.entry(protocol).dissector_tier

    def port_count(self, transport):
        return sum(entry.port_count(transport) for entry in self._entries.values())


def _parse_ranges(text, path, number):
    if text in ("", "-"):
        return ()
    ranges = []
    for item in text.split(","):
        item = item.strip()
        try:
            if "-" in item:
                lo, hi = (int(x) for x in item.split("-", 1))
            else:
                lo = hi = int(item)
        except ValueError:
            raise RegistryError(f"{path}:{number}: bad port range {item!r}") from None
        ranges.append((lo, hi))
    return tuple(ranges)


DEFAULT_REGISTRY = ProtocolRegistry()
