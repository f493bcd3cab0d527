"""
Probe signatures: payloads and TCP flag shapes typical of scans of
industrial ports.
"""
import enum
import struct
from dataclasses import dataclass

from .model import TcpFlags, Transport
from .registry import DEFAULT_REGISTRY, ProtocolId


class ProbeKind(enum.Enum):
    PROTOCOL_SPECIFIC_REQUEST = "ProtocolSpecificRequest"
    SYN_ONLY = "SynOnly"
    RST_ONLY = "RstOnly"
    UDP_PROBE = "UdpProbe"
    ESTABLISHED_HANDSHAKE = "EstablishedHandshake"


# Kinds that mark the sender as a scanner on their own.
SCANNER_KINDS = frozenset({
    ProbeKind.PROTOCOL_SPECIFIC_REQUEST, ProbeKind.SYN_ONLY, ProbeKind.UDP_PROBE,
})

# UDP payloads shorter than this are treated as bare reachability probes.
UDP_PROBE_MAX_PAYLOAD = 4


@dataclass(frozen=True)
class ProbeSignature:
    protocol: ProtocolId
    kind: ProbeKind
    description: str
    matcher: object

    def matches(self, packet):
        return self.matcher(packet.payload_prefix)


def _bacnet_read_property(payload):
    if len(payload) < 6 or payload[0] != 0x81 or payload[1] not in (0x04, 0x0A, 0x0B):
        return False
    offset = 10 if payload[1] == 0x04 else 4  # Forwarded-NPDU carries the origin address
    if len(payload) < offset + 2 or payload[offset] != 0x01:
        return False
    control = payload[offset + 1]
    if control & 0x80:
        return False  # network layer message, no APDU
    offset += 2
    if control & 0x20:
        if len(payload) < offset + 3:
            return False
        offset += 3 + payload[offset + 2]
    if control & 0x08:
        if len(payload) < offset + 3:
            return False
        offset += 3 + payload[offset + 2]
    if control & 0x20:
        offset += 1  # hop count
    if len(payload) < offset + 4 or payload[offset] >> 4 != 0:
        return False
    service = offset + (5 if payload[offset] & 0x08 else 3)
    return len(payload) > service and payload[service] == 0x0C


def _coap_options(payload, offset):
    """Yield (number, value) of CoAP options starting at offset."""
    number = 0
    while offset < len(payload) and payload[offset] != 0xFF:
        delta, length = payload[offset] >> 4, payload[offset] & 0x0F
        offset += 1
        values = []
        for nibble in (delta, length):
            if nibble == 13:
                values.append(payload[offset] + 13 if offset < len(payload) else None)
                offset += 1
            elif nibble == 14:
                values.append(struct.unpack_from("!H", payload, offset)[0] + 269
                              if offset + 2 <= len(payload) else None)
                offset += 2
            elif nibble == 15:
                return
            else:
                values.append(nibble)
        if None in values:
            return
        number += values[0]
        yield number, payload[offset:offset + values[1]]
        offset += values[1]


def _coap_well_known_core(payload):
    if len(payload) < 4 or payload[0] >> 6 != 1 or payload[1] != 0x01:
        return False
    token_length = payload[0] & 0x0F
    path = [value for number, value in _coap_options(payload, 4 + token_length) if number == 11]
    return path == [b".well-known", b"core"]


def _enip_list_identity(payload):
    if len(payload) < 24:
        return False
    command, length = struct.unpack_from("<HH", payload)
    return command == 0x0063 and length == 0


def _hart_session_initiate(payload):
    return len(payload) >= 8 and payload[0] in (1, 2) and payload[1] == 0 and payload[2] == 0


def _fins_controller_data_read(payload):
    return len(payload) >= 12 and payload[0] & 0xC0 == 0x80 and payload[10:12] == b"\x05\x01"


def _atg_inventory_query(payload):
    body = payload.lstrip(b"\x01")
    return body.startswith(b"I20100") and not body[6:].strip(b"\r\n\x03 ")


PROTOCOL_REQUESTS = (
    ProbeSignature(ProtocolId.BACNET_IP, ProbeKind.PROTOCOL_SPECIFIC_REQUEST,
                   "BVLC unicast/broadcast, confirmed request readProperty (service 0x0c)",
                   _bacnet_read_property),
    ProbeSignature(ProtocolId.COAP, ProbeKind.PROTOCOL_SPECIFIC_REQUEST,
                   "CON/NON GET with Uri-Path .well-known/core", _coap_well_known_core),
    ProbeSignature(ProtocolId.ETHERNET_IP, ProbeKind.PROTOCOL_SPECIFIC_REQUEST,
                   "encapsulation command 0x0063 List Identity, length 0", _enip_list_identity),
    ProbeSignature(ProtocolId.HART_IP, ProbeKind.PROTOCOL_SPECIFIC_REQUEST,
                   "request message id 0 Session Initiate", _hart_session_initiate),
    ProbeSignature(ProtocolId.OMRON_FINS, ProbeKind.PROTOCOL_SPECIFIC_REQUEST,
                   "command frame 0501 Controller Data Read", _fins_controller_data_read),
    ProbeSignature(ProtocolId.ATG, ProbeKind.PROTOCOL_SPECIFIC_REQUEST,
                   "inventory query I20100 without report body", _atg_inventory_query),
)


def match_probe(packet, candidate, registry=DEFAULT_REGISTRY):
    """
    Match a packet against the probe signatures of a candidate protocol.

    Args:
        packet: SampledPacket
        candidate: ProtocolId the packet's ports matched

    Returns:
        ProbeKind or None
    """
    if packet.payload_prefix:
        for signature in PROTOCOL_REQUESTS:
            if signature.protocol is candidate and signature.matches(packet):
                return signature.kind

    if packet.transport == Transport.TCP:
        flags = TcpFlags(packet.tcp_flags)
        if flags & TcpFlags.RST:
            return ProbeKind.RST_ONLY
        if flags & (TcpFlags.SYN | TcpFlags.ACK) == TcpFlags.SYN | TcpFlags.ACK:
            return ProbeKind.ESTABLISHED_HANDSHAKE
        if flags == TcpFlags.SYN and not packet.payload_prefix:
            return ProbeKind.SYN_ONLY
    elif packet.transport == Transport.UDP:
        if len(packet.payload_prefix) < UDP_PROBE_MAX_PAYLOAD \
                and registry.entry(candidate).covers(packet.dst_port, "udp"):
            return ProbeKind.UDP_PROBE
    return None


def probe_patterns():
    """Describe the compiled-in probe signatures as (protocol, kind, pattern) rows."""
    rows = [(s.protocol.value, s.kind.value, s.description) for s in PROTOCOL_REQUESTS]
    rows += [
        ("*", ProbeKind.RST_ONLY.value, "TCP with RST set"),
        ("*", ProbeKind.ESTABLISHED_HANDSHAKE.value, "TCP with SYN and ACK set"),
        ("*", ProbeKind.SYN_ONLY.value, "TCP flags exactly SYN, no payload"),
        ("*", ProbeKind.UDP_PROBE.value,
         f"UDP payload under {UDP_PROBE_MAX_PAYLOAD} bytes to an industrial port"),
    ]
    return rows
