"""
Heuristic recognition of non-industrial (IT) protocols.

Cheap checks on ports and payload prefixes, used to cross-validate port
matched packets. Only specific labels count as confident; the Generic*
fallbacks never remove a packet from the industrial pipeline.
"""
import enum
import re
import struct

from .model import Transport


class ItProtocolLabel(enum.Enum):
    TLS = "TLS"
    HTTP = "HTTP"
    DNS = "DNS"
    STUN = "STUN"
    XMPP = "XMPP"
    SIP = "SIP"
    OPENVPN = "OpenVPN"
    RTCP = "RTCP"
    FTP = "FTP"
    TELNET = "Telnet"
    BITTORRENT = "BitTorrent"
    SSH = "SSH"
    GENERIC_TCP = "GenericTCP"
    GENERIC_UDP = "GenericUDP"
    ICMP = "ICMP"
    OTHER = "Other"

    @property
    def confident(self):
        """True for specific labels, False for the transport fallbacks."""
        return self not in FALLBACK_LABELS


FALLBACK_LABELS = frozenset({
    ItProtocolLabel.GENERIC_TCP, ItProtocolLabel.GENERIC_UDP,
    ItProtocolLabel.ICMP, ItProtocolLabel.OTHER,
})

STUN_MAGIC_COOKIE = 0x2112A442


class ItRecognizer:
    """Label a packet with the IT protocol its ports and payload suggest."""

    # Leading tokens of text protocols, checked in this order
    TEXT_PREFIXES = {
        ItProtocolLabel.SSH: [b"SSH-1.", b"SSH-2."],
        ItProtocolLabel.SIP: [b"SIP/2.0 ", b"INVITE sip:", b"REGISTER sip:", b"OPTIONS sip:",
                              b"ACK sip:", b"BYE sip:", b"CANCEL sip:", b"SUBSCRIBE sip:",
                              b"NOTIFY sip:", b"MESSAGE sip:"],
        ItProtocolLabel.HTTP: [b"GET ", b"POST ", b"HEAD ", b"PUT ", b"DELETE ", b"OPTIONS ",
                               b"CONNECT ", b"PATCH ", b"TRACE ", b"HTTP/1.", b"HTTP/2"],
        ItProtocolLabel.XMPP: [b"<?xml version", b"<stream:stream", b"<iq ", b"<presence",
                               b"<message ", b"</stream:stream>"],
        ItProtocolLabel.BITTORRENT: [b"\x13BitTorrent protocol", b"d1:ad2:id20:",
                                     b"d1:rd2:id20:", b"d1:q"],
    }

    # Protocols recognised only next to their well-known port
    PORT_BOUND = {
        ItProtocolLabel.DNS: [53],
        ItProtocolLabel.OPENVPN: [1194],
        ItProtocolLabel.FTP: [20, 21],
        ItProtocolLabel.TELNET: [23],
    }

    FTP_LINE = re.compile(rb"^(\d{3}[ -]|(USER|PASS|RETR|STOR|LIST|PASV|PORT|QUIT|SYST|TYPE|"
                          rb"FEAT|AUTH|CWD|PWD)\b)")

    def recognize(self, packet):
        """
        Recognize the IT protocol of a packet.

        Args:
            packet: SampledPacket

        Returns:
            ItProtocolLabel (total: falls back to GenericTCP/GenericUDP/ICMP/Other)
        """
        transport = packet.transport
        if transport == Transport.ICMP:
            return ItProtocolLabel.ICMP
        if transport not in (Transport.TCP, Transport.UDP):
            return ItProtocolLabel.OTHER

        payload = packet.payload_prefix
        ports = (packet.src_port, packet.dst_port)
        label = self._by_payload(payload, transport) or self._by_port(payload, ports, transport)
        if label is not None:
            return label
        return ItProtocolLabel.GENERIC_TCP if transport == Transport.TCP \
            else ItProtocolLabel.GENERIC_UDP

    def _by_payload(self, payload, transport):
        if transport == Transport.TCP and self._is_tls(payload):
            return ItProtocolLabel.TLS
        for label, prefixes in self.TEXT_PREFIXES.items():
            if any(payload.startswith(prefix) for prefix in prefixes):
                return label
        if transport == Transport.UDP:
            if self._is_stun(payload):
                return ItProtocolLabel.STUN
            if self._is_rtcp(payload):
                return ItProtocolLabel.RTCP
        return None

    def _by_port(self, payload, ports, transport):
        for label, well_known in self.PORT_BOUND.items():
            if not any(port in well_known for port in ports):
                continue
            check = getattr(self, f"_is_{label.name.lower()}")
            if check(payload, transport):
                return label
        return None

    @staticmethod
    def _is_tls(payload):
        if len(payload) < 5:
            return False
        content_type, major, minor = payload[0], payload[1], payload[2]
        (length,) = struct.unpack_from("!H", payload, 3)
        return 0x14 <= content_type <= 0x17 and major == 3 and minor <= 4 \
            and 1 <= length <= 18432

    @staticmethod
    def _is_stun(payload):
        if len(payload) < 20 or payload[0] & 0xC0:
            return False
        return struct.unpack_from("!I", payload, 4)[0] == STUN_MAGIC_COOKIE

    @staticmethod
    def _is_rtcp(payload):
        return len(payload) >= 8 and payload[0] >> 6 == 2 and 200 <= payload[1] <= 204

    @staticmethod
    def _is_dns(payload, transport):
        if transport == Transport.TCP:
            payload = payload[2:]
        if len(payload) < 12:
            return False
        flags, qdcount, ancount, nscount, arcount = struct.unpack_from("!HHHHH", payload, 2)
        opcode = (flags >> 11) & 0x0F
        return opcode in (0, 1, 2, 4, 5) and qdcount <= 16 \
            and max(ancount, nscount, arcount) <= 256

    @staticmethod
    def _is_openvpn(payload, transport):
        if transport == Transport.TCP:
            payload = payload[2:]
        return len(payload) >= 1 and 1 <= payload[0] >> 3 <= 10

    def _is_ftp(self, payload, transport):
        return transport == Transport.TCP and bool(self.FTP_LINE.match(payload))

    @staticmethod
    def _is_telnet(payload, transport):
        return transport == Transport.TCP and len(payload) >= 2 and payload[0] == 0xFF \
            and 0xFB <= payload[1] <= 0xFE

    def patterns(self):
        """Describe the compiled-in recognizer patterns as (label, pattern) rows."""
        rows = [(ItProtocolLabel.TLS.value,
                 "record type 0x14-0x17, version 0x03 0x00-0x04, record length >= 1")]
        for label, prefixes in self.TEXT_PREFIXES.items():
            rows.append((label.value, " | ".join(repr(prefix)[2:-1] for prefix in prefixes)))
        rows.append((ItProtocolLabel.STUN.value, f"UDP, magic cookie {STUN_MAGIC_COOKIE:#010x}"))
        rows.append((ItProtocolLabel.RTCP.value, "UDP, version 2, packet type 200-204"))
        for label, well_known in self.PORT_BOUND.items():
            rows.append((label.value, "header check on port " + ",".join(map(str, well_known))))
        return rows


_RECOGNIZER = ItRecognizer()


def recognize_it(packet):
    return _RECOGNIZER.recognize(packet)
