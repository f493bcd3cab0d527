"""
Minimal-header dissectors for the industrial protocols with a Full tier.

Each dissector looks only at the header fields its protocol standard
fixes, so a sampled, truncated, single-direction packet can still be judged.
A dissector never reports Malformed when the captured bytes stop before the
end of the minimal header; it reports InsufficientData instead.
"""
import enum
import logging
import re
import struct
from dataclasses import dataclass

from .errors import DomainError
from .registry import DEFAULT_REGISTRY, DissectorTier, ProtocolId

logger = logging.getLogger(__name__)


class DissectionStatus(enum.Enum):
    WELL_FORMED = "WellFormed"
    MALFORMED = "Malformed"
    INSUFFICIENT_DATA = "InsufficientData"
    NOT_APPLICABLE = "NotApplicable"


@dataclass(frozen=True)
class DissectionResult:
    status: DissectionStatus
    protocol: ProtocolId
    detail: str = ""

    @property
    def well_formed(self):
        return self.status is DissectionStatus.WELL_FORMED


_OK = DissectionStatus.WELL_FORMED
_BAD = DissectionStatus.MALFORMED
_SHORT = DissectionStatus.INSUFFICIENT_DATA
_NA = DissectionStatus.NOT_APPLICABLE


def _need(payload, size):
    return len(payload) < size


# --- Modbus/TCP -------------------------------------------------------------

def dissect_modbus(payload, transport, complete):
    if _need(payload, 7):
        return _SHORT, "MBAP header needs 7 bytes"
    _, protocol_id, length = struct.unpack_from("!HHH", payload)
    if protocol_id != 0:
        return _BAD, "protocol id nonzero"
    if not 2 <= length <= 254:
        return _BAD, f"MBAP length {length} out of range"
    if len(payload) >= 8 and payload[7] & 0x7F == 0:
        return _BAD, "function code zero"
    if complete and len(payload) < 6 + length:
        return _BAD, "MBAP length exceeds segment"
    if len(payload) < 8:
        return _SHORT, "function code not captured"
    return _OK, f"function {payload[7]:#04x}"


# --- MQTT -------------------------------------------------------------------

_MQTT_FLAGS_TWO = {6, 8, 10}  # PUBREL, SUBSCRIBE, UNSUBSCRIBE


def dissect_mqtt(payload, transport, complete):
    if _need(payload, 2):
        return _SHORT, "fixed header needs 2 bytes"
    packet_type, flags = payload[0] >> 4, payload[0] & 0x0F
    if packet_type in (0, 15):
        return _BAD, f"reserved packet type {packet_type}"
    if packet_type == 3:
        if (flags >> 1) & 0x03 == 3:
            return _BAD, "PUBLISH with QoS 3"
    elif packet_type in _MQTT_FLAGS_TWO:
        if flags != 0x02:
            return _BAD, f"type {packet_type} requires flags 0x2"
    elif flags != 0:
        return _BAD, f"type {packet_type} requires flags 0x0"

    remaining, offset = 0, 1
    for shift in range(4):
        if offset >= len(payload):
            if complete:
                return _BAD, "remaining length cut short"
            return _SHORT, "remaining length not captured"
        byte = payload[offset]
        offset += 1
        remaining |= (byte & 0x7F) << (7 * shift)
        if not byte & 0x80:
            break
    else:
        return _BAD, "remaining length longer than 4 bytes"

    if packet_type == 1 and len(payload) >= offset + 2:
        (name_length,) = struct.unpack_from("!H", payload, offset)
        name = payload[offset + 2:offset + 2 + name_length]
        if len(name) == name_length and name not in (b"MQTT", b"MQIsdp"):
            return _BAD, "CONNECT protocol name"
    return _OK, f"type {packet_type} remaining {remaining}"


# --- CoAP -------------------------------------------------------------------

_COAP_CLASSES = {0, 2, 4, 5}


def _coap_code(code):
    if code >> 5 not in _COAP_CLASSES:
        return f"code class {code >> 5} reserved"
    return None


def dissect_coap(payload, transport, complete):
    if transport == "tcp":
        if _need(payload, 2):
            return _SHORT, "CoAP-over-TCP header needs 2 bytes"
        length_nibble, token_length = payload[0] >> 4, payload[0] & 0x0F
        extended = {13: 1, 14: 2, 15: 4}.get(length_nibble, 0)
        if _need(payload, 2 + extended):
            return _SHORT, "extended length not captured"
        if token_length > 8:
            return _BAD, f"token length {token_length}"
        problem = _coap_code(payload[1 + extended])
        return (_BAD, problem) if problem else (_OK, "CoAP over TCP")

    if _need(payload, 4):
        return _SHORT, "CoAP header needs 4 bytes"
    version, token_length = payload[0] >> 6, payload[0] & 0x0F
    if version != 1:
        return _BAD, f"version {version}"
    if token_length > 8:
        return _BAD, f"token length {token_length}"
    code = payload[1]
    problem = _coap_code(code)
    if problem:
        return _BAD, problem
    if code == 0 and (token_length or (complete and len(payload) > 4)):
        return _BAD, "empty message with content"
    return _OK, f"code {code >> 5}.{code & 0x1F:02d}"


# --- IEC 60870-5-104 --------------------------------------------------------

_IEC104_U_FUNCTIONS = {0x07, 0x0B, 0x13, 0x23, 0x43, 0x83}


def dissect_iec104(payload, transport, complete):
    if _need(payload, 6):
        return _SHORT, "APCI needs 6 bytes"
    if payload[0] != 0x68:
        return _BAD, "start byte not 0x68"
    length = payload[1]
    if not 4 <= length <= 253:
        return _BAD, f"APDU length {length}"
    c1, c2, c3, c4 = payload[2:6]
    if c1 & 0x01 == 0:
        if length <= 4:
            return _BAD, "I-format without ASDU"
        if c3 & 0x01:
            return _BAD, "I-format receive sequence LSB set"
        return _OK, "I-format"
    if c1 & 0x03 == 0x01:
        if c1 != 0x01 or c2 != 0 or c3 & 0x01 or length != 4:
            return _BAD, "S-format control field"
        return _OK, "S-format"
    if c1 not in _IEC104_U_FUNCTIONS or c2 or c3 or c4 or length != 4:
        return _BAD, "U-format control field"
    return _OK, "U-format"


# --- DNP3 -------------------------------------------------------------------

def dissect_dnp3(payload, transport, complete):
    # Header block CRCs are not verified.
    if _need(payload, 10):
        return _SHORT, "link header needs 10 bytes"
    if payload[0:2] != b"\x05\x64":
        return _BAD, "start bytes not 0x05 0x64"
    if payload[2] < 5:
        return _BAD, f"link length {payload[2]}"
    return _OK, f"link function {payload[3] & 0x0F}"


# --- TPKT / COTP (TCP 102) --------------------------------------------------

_COTP_TYPES = {0xE0: "CR", 0xD0: "CC", 0x80: "DR", 0xC0: "DC", 0xF0: "DT", 0x10: "ED",
               0x20: "EA", 0x60: "AK", 0x50: "RJ", 0x70: "ER"}
_SESSION_SPDUS = {0x01, 0x05, 0x09, 0x0A, 0x0C, 0x0D, 0x0E, 0x19}


def _cotp(payload, complete):
    """Check TPKT and COTP; returns (status, detail, user data or None)."""
    if _need(payload, 6):
        return _SHORT, "TPKT/COTP header needs 6 bytes", None
    if payload[0] != 3:
        return _BAD, f"TPKT version {payload[0]}", None
    if payload[1] != 0:
        return _BAD, "TPKT reserved byte nonzero", None
    (tpkt_length,) = struct.unpack_from("!H", payload, 2)
    if tpkt_length < 7:
        return _BAD, f"TPKT length {tpkt_length}", None
    indicator, pdu_type = payload[4], payload[5] & 0xF0
    if indicator in (0, 255) or 5 + indicator > tpkt_length:
        return _BAD, f"COTP length indicator {indicator}", None
    kind = _COTP_TYPES.get(pdu_type)
    if kind is None:
        return _BAD, f"COTP PDU type {pdu_type:#04x}", None
    if kind != "DT":
        return _OK, f"COTP {kind}", None
    user = payload[5 + indicator:]
    if not user:
        if complete:
            return _BAD, "COTP DT without user data", None
        return _SHORT, "COTP user data not captured", None
    return _OK, "COTP DT", user


def dissect_s7comm(payload, transport, complete):
    status, detail, user = _cotp(payload, complete)
    if user is None:
        return status, detail
    if user[0] == 0x32:
        return _OK, "S7 protocol id 0x32"
    if user[0] == 0x72:
        return _OK, "S7comm-plus protocol id 0x72"
    return _BAD, f"S7 protocol id {user[0]:#04x}"


def dissect_mms(payload, transport, complete):
    status, detail, user = _cotp(payload, complete)
    if user is None:
        return status, detail
    if user[0] in _SESSION_SPDUS:
        return _OK, f"session SPDU {user[0]}"
    return _BAD, f"session SPDU {user[0]:#04x}"


# --- EtherNet/IP ------------------------------------------------------------

_ENIP_COMMANDS = {0x0000, 0x0004, 0x0063, 0x0064, 0x0065, 0x0066, 0x006F,
                  0x0070, 0x0072, 0x0073}
_CPF_ADDRESS_ITEMS = {0x0000: 0, 0x00A1: 4, 0x8002: 8}


def dissect_enip(payload, transport, complete):
    if transport == "udp":
        # Implicit I/O on UDP 2222: a common packet format address item first.
        if _need(payload, 6):
            return _SHORT, "CPF header needs 6 bytes"
        count, item_type, item_length = struct.unpack_from("<HHH", payload)
        if not 1 <= count <= 8:
            return _BAD, f"CPF item count {count}"
        expected = _CPF_ADDRESS_ITEMS.get(item_type)
        if expected is None:
            return _BAD, f"CPF address item {item_type:#06x}"
        if item_length != expected:
            return _BAD, "CPF address item length"
        return _OK, f"CPF {count} items"

    if _need(payload, 24):
        return _SHORT, "encapsulation header needs 24 bytes"
    command, length = struct.unpack_from("<HH", payload)
    if command not in _ENIP_COMMANDS:
        return _BAD, f"encapsulation command {command:#06x}"
    (options,) = struct.unpack_from("<I", payload, 20)
    if options:
        return _BAD, "options nonzero"
    if complete and len(payload) < 24 + length:
        return _BAD, "encapsulation length exceeds segment"
    return _OK, f"command {command:#06x}"


# --- BACnet/IP --------------------------------------------------------------

def dissect_bacnet(payload, transport, complete):
    if _need(payload, 4):
        return _SHORT, "BVLC header needs 4 bytes"
    if payload[0] != 0x81:
        return _BAD, f"BVLC type {payload[0]:#04x}"
    if payload[1] > 0x0C:
        return _BAD, f"BVLC function {payload[1]:#04x}"
    (length,) = struct.unpack_from("!H", payload, 2)
    if length < 4:
        return _BAD, f"BVLC length {length}"
    if complete and length != len(payload):
        return _BAD, "BVLC length mismatch"
    return _OK, f"BVLC function {payload[1]:#04x}"


# --- OPC UA -----------------------------------------------------------------

_OPCUA_TYPES = {b"HEL", b"ACK", b"ERR", b"MSG", b"OPN", b"CLO", b"RHE"}
_OPCUA_FINAL_ONLY = {b"HEL", b"ACK", b"ERR", b"RHE"}


def dissect_opcua(payload, transport, complete):
    if _need(payload, 8):
        return _SHORT, "message header needs 8 bytes"
    message_type, chunk = payload[:3], payload[3:4]
    if message_type not in _OPCUA_TYPES:
        return _BAD, "message type"
    if chunk not in (b"F", b"C", b"A"):
        return _BAD, "chunk type"
    if message_type in _OPCUA_FINAL_ONLY and chunk != b"F":
        return _BAD, "chunked handshake message"
    (size,) = struct.unpack_from("<I", payload, 4)
    if size < 8:
        return _BAD, f"message size {size}"
    return _OK, message_type.decode()


# --- AMQP -------------------------------------------------------------------

def dissect_amqp(payload, transport, complete):
    if _need(payload, 8):
        return _SHORT, "frame header needs 8 bytes"
    if payload[:4] == b"AMQP":
        if payload[4] > 3:
            return _BAD, f"protocol id {payload[4]}"
        return _OK, "protocol header"
    frame_type = payload[0]
    if frame_type in (1, 2, 3, 8):
        (size,) = struct.unpack_from("!I", payload, 3)
        end = 7 + size
        if complete and end < len(payload) and payload[end] != 0xCE:
            return _BAD, "frame-end octet"
        return _OK, f"0-9-1 frame type {frame_type}"
    (size,) = struct.unpack_from("!I", payload)
    if size >= 8 and payload[4] >= 2 and payload[5] in (0, 1):
        return _OK, "1.0 frame"
    return _BAD, "neither protocol header nor frame"


# --- OMRON FINS -------------------------------------------------------------

_FINS_MRC = {0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0x07, 0x09, 0x0C, 0x21,
             0x22, 0x23, 0x26, 0x28}


def dissect_fins(payload, transport, complete):
    if _need(payload, 12):
        return _SHORT, "FINS header and command need 12 bytes"
    icf, reserved, gateway_count = payload[0], payload[1], payload[2]
    if not icf & 0x80 or icf & 0x3E:
        return _BAD, f"ICF {icf:#04x}"
    if reserved:
        return _BAD, "RSV nonzero"
    if gateway_count > 7:
        return _BAD, f"gateway count {gateway_count}"
    if payload[10] not in _FINS_MRC:
        return _BAD, f"main request code {payload[10]:#04x}"
    return _OK, f"command {payload[10]:02x}{payload[11]:02x}"


# --- ANSI C12.22 ------------------------------------------------------------

def dissect_c1222(payload, transport, complete):
    if _need(payload, 2):
        return _SHORT, "ACSE tag and length need 2 bytes"
    if payload[0] != 0x60:
        return _BAD, f"ACSE tag {payload[0]:#04x}"
    first = payload[1]
    if first == 0x80 or first > 0x84:
        return _BAD, "BER length form"
    extra = first & 0x7F if first & 0x80 else 0
    if _need(payload, 2 + extra):
        return _SHORT, "BER length not captured"
    return _OK, "ACSE APDU"


# --- EtherCAT (UDP encapsulation) -------------------------------------------

def dissect_ethercat(payload, transport, complete):
    if _need(payload, 2):
        return _SHORT, "EtherCAT header needs 2 bytes"
    (header,) = struct.unpack_from("<H", payload)
    length, reserved, frame_type = header & 0x07FF, (header >> 11) & 1, header >> 12
    if reserved:
        return _BAD, "reserved bit set"
    if frame_type not in (1, 4, 5):
        return _BAD, f"frame type {frame_type}"
    if length == 0:
        return _BAD, "zero length"
    if frame_type == 1 and len(payload) > 2 and payload[2] > 14:
        return _BAD, f"datagram command {payload[2]}"
    return _OK, f"frame type {frame_type}"


# --- Foundation Fieldbus HSE ------------------------------------------------

def dissect_ff_hse(payload, transport, complete):
    if _need(payload, 12):
        return _SHORT, "FDA header needs 12 bytes"
    if payload[0] != 1:
        return _BAD, f"FDA version {payload[0]}"
    if payload[2] >> 6 == 3:
        return _BAD, "reserved message type"
    (length,) = struct.unpack_from("!I", payload, 8)
    if length < 12:
        return _BAD, f"message length {length}"
    return _OK, f"service {payload[3]}"


# --- HART-IP ----------------------------------------------------------------

_HART_MESSAGE_TYPES = {0, 1, 2, 3, 15}


def dissect_hart_ip(payload, transport, complete):
    if _need(payload, 8):
        return _SHORT, "HART-IP header needs 8 bytes"
    version, message_type, message_id = payload[0], payload[1], payload[2]
    if version not in (1, 2):
        return _BAD, f"version {version}"
    if message_type not in _HART_MESSAGE_TYPES:
        return _BAD, f"message type {message_type}"
    if message_id > 5:
        return _BAD, f"message id {message_id}"
    (byte_count,) = struct.unpack_from("!H", payload, 6)
    if byte_count < 8:
        return _BAD, f"byte count {byte_count}"
    return _OK, f"message id {message_id}"


# --- PROFINET (DCE/RPC) -----------------------------------------------------

def dissect_profinet(payload, transport, complete):
    if _need(payload, 8):
        return _SHORT, "RPC header needs 8 bytes"
    version, packet_type = payload[0], payload[1]
    if transport == "udp":
        if version != 4:
            return _BAD, f"connectionless RPC version {version}"
        if packet_type > 10:
            return _BAD, f"RPC packet type {packet_type}"
        if payload[4] & 0xEE:
            return _BAD, "data representation"
        return _OK, f"CL RPC type {packet_type}"
    if version != 5 or payload[1] > 1:
        return _BAD, "connection-oriented RPC version"
    if payload[2] > 19:
        return _BAD, f"RPC packet type {payload[2]}"
    return _OK, f"CO RPC type {payload[2]}"


# --- Zigbee IP (ZEP) --------------------------------------------------------

def dissect_zigbee(payload, transport, complete):
    if _need(payload, 4):
        return _SHORT, "ZEP header needs 4 bytes"
    if payload[:2] != b"EX":
        return _BAD, "ZEP preamble"
    version = payload[2]
    if version == 1:
        if not 11 <= payload[3] <= 26:
            return _BAD, f"channel {payload[3]}"
        return _OK, "ZEP v1"
    if version == 2:
        if payload[3] not in (1, 2):
            return _BAD, f"ZEP type {payload[3]}"
        return _OK, "ZEP v2"
    return _BAD, f"ZEP version {version}"


# --- ATG (TLS-350 serial-over-TCP) ------------------------------------------

ATG_COMMAND = re.compile(rb"^[IS]\d{5}")


def dissect_atg(payload, transport, complete):
    if _need(payload, 7):
        return _SHORT, "ATG function code needs 7 bytes"
    body = payload.lstrip(b"\x01\r\n")
    match = ATG_COMMAND.match(body)
    if match is None:
        if payload[:1] == b"\x01":
            return _BAD, "unknown function code"
        return _BAD, "no ATG banner"
    if not body[match.end():].strip(b"\r\n\x03 "):
        if payload[:1] == b"\x01":
            # A bare query is a request, not a report.
            return _NA, "function request"
        return _SHORT, "report body not captured"
    return _OK, f"report {match.group().decode()}"


DISSECTORS = {
    ProtocolId.AMQP: dissect_amqp,
    ProtocolId.ANSI_C12_22: dissect_c1222,
    ProtocolId.ATG: dissect_atg,
    ProtocolId.BACNET_IP: dissect_bacnet,
    ProtocolId.COAP: dissect_coap,
    ProtocolId.DNP3: dissect_dnp3,
    ProtocolId.ETHERCAT: dissect_ethercat,
    ProtocolId.ETHERNET_IP: dissect_enip,
    ProtocolId.FF_HSE: dissect_ff_hse,
    ProtocolId.HART_IP: dissect_hart_ip,
    ProtocolId.ICCP: dissect_mms,
    ProtocolId.IEC_60870_5_104: dissect_iec104,
    ProtocolId.IEC_61850: dissect_mms,
    ProtocolId.MODBUS_TCP: dissect_modbus,
    ProtocolId.MQTT: dissect_mqtt,
    ProtocolId.OMRON_FINS: dissect_fins,
    ProtocolId.OPC_UA: dissect_opcua,
    ProtocolId.PROFINET: dissect_profinet,
    ProtocolId.S7COMM: dissect_s7comm,
    ProtocolId.ZIGBEE_IP: dissect_zigbee,
}


# Captured bytes a dissector needs before it judges a payload.
_MINIMAL_HEADER = {
    ProtocolId.AMQP: 8, ProtocolId.ANSI_C12_22: 2, ProtocolId.ATG: 7,
    ProtocolId.BACNET_IP: 4, ProtocolId.DNP3: 10, ProtocolId.ETHERCAT: 2,
    ProtocolId.FF_HSE: 12, ProtocolId.HART_IP: 8, ProtocolId.ICCP: 6,
    ProtocolId.IEC_60870_5_104: 6, ProtocolId.IEC_61850: 6, ProtocolId.MODBUS_TCP: 7,
    ProtocolId.MQTT: 2, ProtocolId.OMRON_FINS: 12, ProtocolId.OPC_UA: 8,
    ProtocolId.PROFINET: 8, ProtocolId.S7COMM: 6, ProtocolId.ZIGBEE_IP: 4,
}


def minimal_header(candidate, transport="tcp"):
    if candidate is ProtocolId.COAP:
        return 2 if transport == "tcp" else 4
    if candidate is ProtocolId.ETHERNET_IP:
        return 24 if transport == "tcp" else 6
    return _MINIMAL_HEADER[candidate]


def dissect_payload(payload, candidate, transport="tcp", complete=True):
    """
    Dissect raw application bytes as the candidate protocol.

    Args:
        payload: Application bytes (after the transport header)
        candidate: ProtocolId with a dissector
        transport: 'tcp' or 'udp'
        complete: False when the capture cut the frame short

    Returns:
        DissectionResult
    """
    dissector = DISSECTORS.get(candidate)
    if dissector is None:
        raise DomainError(f"no dissector for {candidate.value}")
    if not payload:
        return DissectionResult(_NA, candidate, "no payload")
    status, detail = dissector(bytes(payload), transport, complete)
    return DissectionResult(status, candidate, detail)


def dissect_ics(packet, candidate, registry=DEFAULT_REGISTRY):
    """
    Validate a packet's payload against the candidate protocol's minimal header.

    Args:
        packet: SampledPacket whose ports matched the candidate
        candidate: ProtocolId with tier Full in the registry

    Returns:
        DissectionResult

    Raises:
        DomainError: the candidate has no Full-tier dissector
    """
    if registry.tier(candidate) is not DissectorTier.FULL:
        raise DomainError(f"{candidate.value} has no dissector (PortOnly tier)")
    return dissect_payload(packet.payload_prefix, candidate, packet.transport.value,
                           complete=not packet.truncated)
