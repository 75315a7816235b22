"""Classic pcap reading/writing and in-order TCP stream reassembly.

Only Ethernet II + IPv4 + TCP is understood. Reassembly is deliberately
simple: segments of a flow are concatenated in capture order, and a flow whose
sequence numbers do not line up (gaps, overlaps, retransmissions) is flagged
and dropped rather than repaired.
"""

from __future__ import annotations

import bisect
import ipaddress
import logging
import struct
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from os import PathLike
from typing import Iterable, Optional

from iotfuzz import Protocol
from iotfuzz.codecs import (
    HTTP_METHOD_TOKENS,
    RTSP_METHOD_TOKENS,
    message_length,
    tplink_decode,
)

log = logging.getLogger(__name__)

LINKTYPE_ETHERNET = 1
TPLINK_PORT = 9999

_MAGIC_USEC = 0xA1B2C3D4
_MAGIC_NSEC = 0xA1B23C4D
_GLOBAL_HDR = 24
_RECORD_HDR = 16


class CaptureError(Exception):
    """The capture file cannot be read."""


class Direction(str, Enum):
    TO_DEVICE = "to-device"
    FROM_DEVICE = "from-device"
    OTHER = "other"


@dataclass(frozen=True)
class PacketRecord:
    index: int  # 1-based frame number in the capture
    ts_sec: int
    ts_usec: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    direction: Direction
    payload: bytes
    seq: Optional[int] = None

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_usec / 1e6

    @property
    def flow_id(self) -> tuple[str, int, str, int]:
        return (self.src_ip, self.src_port, self.dst_ip, self.dst_port)


class Capture(list):
    """TCP data packets of one capture, plus a tally of what was skipped."""

    def __init__(self, records=(), *, path: str = "", total: int = 0, skipped: Counter | None = None):
        super().__init__(records)
        self.path = path
        self.total = total
        self.skipped = skipped if skipped is not None else Counter()


def load_capture(path: str | PathLike, device_ip: Optional[str] = None) -> Capture:
    """Read every TCP packet with a non-empty payload from a classic pcap file.

    ``device_ip`` decides each record's direction; without it every record is
    ``Direction.OTHER``.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CaptureError(f"cannot read capture {path}: {exc}") from exc
    return parse_capture(data, device_ip, path=str(path))


def parse_capture(data: bytes, device_ip: Optional[str] = None, path: str = "") -> Capture:
    if len(data) < _GLOBAL_HDR:
        raise CaptureError(f"truncated pcap global header at offset 0 ({len(data)} bytes)")
    magic_le = struct.unpack_from("<I", data)[0]
    if magic_le in (_MAGIC_USEC, _MAGIC_NSEC):
        endian = "<"
    elif struct.unpack_from(">I", data)[0] in (_MAGIC_USEC, _MAGIC_NSEC):
        endian = ">"
    else:
        raise CaptureError(f"not a classic pcap file (magic 0x{magic_le:08x})")
    nsec = struct.unpack_from(endian + "I", data)[0] == _MAGIC_NSEC
    linktype = struct.unpack_from(endian + "I", data, 20)[0] & 0x0FFFFFFF
    if linktype != LINKTYPE_ETHERNET:
        raise CaptureError(f"unsupported link type {linktype} (only Ethernet is handled)")
    device = str(ipaddress.IPv4Address(device_ip)) if device_ip else None

    rec_hdr = struct.Struct(endian + "IIII")
    records = []
    skipped: Counter = Counter()
    offset = _GLOBAL_HDR
    index = 0
    end = len(data)
    while offset < end:
        if offset + _RECORD_HDR > end:
            raise CaptureError(f"truncated record header at byte offset {offset}")
        ts_sec, ts_frac, incl_len, _orig = rec_hdr.unpack_from(data, offset)
        body_start = offset + _RECORD_HDR
        if body_start + incl_len > end:
            raise CaptureError(
                f"truncated capture record at byte offset {offset}: "
                f"needs {incl_len} bytes, {end - body_start} left"
            )
        index += 1
        frame = data[body_start: body_start + incl_len]
        offset = body_start + incl_len
        ts_usec = ts_frac // 1000 if nsec else ts_frac
        parsed = _decode_frame(frame)
        if isinstance(parsed, str):
            skipped[parsed] += 1
            continue
        src, dst, sport, dport, seq, payload = parsed
        if device is None:
            direction = Direction.OTHER
        elif dst == device:
            direction = Direction.TO_DEVICE
        elif src == device:
            direction = Direction.FROM_DEVICE
        else:
            direction = Direction.OTHER
        records.append(
            PacketRecord(index, ts_sec, ts_usec, src, dst, sport, dport, direction, payload, seq)
        )
    return Capture(records, path=path, total=index, skipped=skipped)


def _decode_frame(frame: bytes):
    """Return (src, dst, sport, dport, seq, payload) or a skip reason."""
    if len(frame) < 14:
        return "truncated-frame"
    ethertype = struct.unpack_from("!H", frame, 12)[0]
    off = 14
    while ethertype in (0x8100, 0x88A8):
        if len(frame) < off + 4:
            return "truncated-frame"
        ethertype = struct.unpack_from("!H", frame, off + 2)[0]
        off += 4
    if ethertype != 0x0800:
        return "non-ipv4"
    if len(frame) < off + 20:
        return "truncated-frame"
    vihl = frame[off]
    if vihl >> 4 != 4:
        return "non-ipv4"
    ihl = (vihl & 0x0F) * 4
    total_len, frag = struct.unpack_from("!H2xH", frame, off + 2)
    proto = frame[off + 9]
    if proto != 6:
        return "non-tcp"
    if frag & 0x3FFF:
        return "ip-fragment"
    ip_end = min(off + total_len, len(frame))
    tcp = off + ihl
    if ip_end < tcp + 20:
        return "truncated-frame"
    src = ".".join(str(b) for b in frame[off + 12: off + 16])
    dst = ".".join(str(b) for b in frame[off + 16: off + 20])
    sport, dport, seq = struct.unpack_from("!HHI", frame, tcp)
    doff = (frame[tcp + 12] >> 4) * 4
    payload = frame[tcp + doff: ip_end]
    if not payload:
        return "empty-payload"
    return src, dst, sport, dport, seq, bytes(payload)


# ---------------------------------------------------------------------------
# Writing


def ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ethernet_ipv4(src_ip: str, dst_ip: str, proto: int, l4: bytes) -> bytes:
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + b"\x08\x00"
    hdr = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, 20 + len(l4), 0, 0x4000, 64, proto, 0,
        ipaddress.IPv4Address(src_ip).packed, ipaddress.IPv4Address(dst_ip).packed,
    )
    hdr = hdr[:10] + struct.pack("!H", ipv4_checksum(hdr)) + hdr[12:]
    return eth + hdr + l4


def tcp_frame(src_ip, dst_ip, sport, dport, payload=b"", seq=0, ack=0, flags=0x18) -> bytes:
    """Build an Ethernet/IPv4/TCP frame (TCP checksum left zero)."""
    tcp = struct.pack("!HHIIBBHHH", sport, dport, seq & 0xFFFFFFFF, ack, 5 << 4, flags, 65535, 0, 0)
    return ethernet_ipv4(src_ip, dst_ip, 6, tcp + payload)


def udp_frame(src_ip, dst_ip, sport, dport, payload=b"") -> bytes:
    udp = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
    return ethernet_ipv4(src_ip, dst_ip, 17, udp + payload)


def tcp_stream_frames(client_ip: str, server_ip: str, sport: int, dport: int,
                      messages: Iterable[tuple[bool, bytes]], mss: int = 1460) -> list[bytes]:
    """Frames for one TCP conversation; ``messages`` holds (from_client, payload).

    Payloads longer than ``mss`` are split over several segments. Sequence
    numbers advance per direction so the stream reassembles cleanly.
    """
    seq = {True: 1000, False: 5000}
    frames = []
    for from_client, payload in messages:
        src, dst, sp, dp = ((client_ip, server_ip, sport, dport) if from_client
                            else (server_ip, client_ip, dport, sport))
        for off in range(0, len(payload), mss):
            chunk = payload[off:off + mss]
            frames.append(tcp_frame(src, dst, sp, dp, chunk, seq[from_client], seq[not from_client]))
            seq[from_client] += len(chunk)
    return frames


class PcapWriter:
    """Write frames to a classic microsecond pcap file."""

    def __init__(self, fh, linktype: int = LINKTYPE_ETHERNET, big_endian: bool = False):
        self._fh = fh
        self._endian = ">" if big_endian else "<"
        fh.write(struct.pack(self._endian + "IHHiIII", _MAGIC_USEC, 2, 4, 0, 0, 65535, linktype))

    def write(self, frame: bytes, ts: float = 0.0) -> None:
        sec = int(ts)
        usec = int(round((ts - sec) * 1e6))
        self._fh.write(struct.pack(self._endian + "IIII", sec, usec, len(frame), len(frame)))
        self._fh.write(frame)


def write_pcap(path: str | PathLike, frames: Iterable[bytes], start: float = 1_700_000_000.0,
               step: float = 0.001, big_endian: bool = False) -> None:
    with open(path, "wb") as fh:
        w = PcapWriter(fh, big_endian=big_endian)
        for i, frame in enumerate(frames):
            w.write(frame, start + i * step)


# ---------------------------------------------------------------------------
# Reassembly


@dataclass(frozen=True)
class FlowMessage:
    flow_id: tuple[str, int, str, int]
    protocol_guess: Protocol
    data: bytes
    first_packet_index: int
    direction: Direction = Direction.OTHER

    @property
    def is_request(self) -> bool:
        return self.protocol_guess in (Protocol.HTTP, Protocol.RTSP) and not self.data.startswith(
            (b"HTTP/", b"RTSP/")
        )


def guess_protocol(buf: bytes, ports: tuple[int, int]) -> Protocol:
    """Classify the message starting at ``buf`` (which may be incomplete)."""
    if TPLINK_PORT in ports:
        return Protocol.TPLINK_SMARTHOME
    if buf.startswith(b"HTTP/"):
        return Protocol.HTTP
    if buf.startswith(b"RTSP/"):
        return Protocol.RTSP
    sp = buf.find(b" ")
    if sp > 0:
        method = buf[:sp]
        nl = buf.find(b"\n")
        line = buf[:nl].rstrip(b"\r") if nl >= 0 else b""
        if line.endswith((b"RTSP/1.0", b"RTSP/2.0")):
            return Protocol.RTSP
        if line.endswith((b"HTTP/1.0", b"HTTP/1.1")):
            return Protocol.HTTP
        if method in RTSP_METHOD_TOKENS and method not in HTTP_METHOD_TOKENS:
            return Protocol.RTSP
        if method in HTTP_METHOD_TOKENS:
            return Protocol.HTTP
    if _tplink_framed(buf):
        return Protocol.TPLINK_SMARTHOME
    return Protocol.UNKNOWN


def _tplink_framed(buf: bytes) -> bool:
    if len(buf) < 5:
        return False
    n = int.from_bytes(buf[:4], "big")
    return 0 < n <= len(buf) - 4 and tplink_decode(buf[4:5]) == b"{"


class Reassembler:
    """Concatenate each flow's segments in order and cut them into messages.

    ``flagged`` maps flow ids excluded for sequence anomalies to a reason.
    """

    def __init__(self):
        self.flagged: dict[tuple, str] = {}

    def run(self, records: Iterable[PacketRecord]) -> list[FlowMessage]:
        flows: dict[tuple, list[PacketRecord]] = {}
        for rec in records:
            flows.setdefault(rec.flow_id, []).append(rec)
        out: list[tuple[int, FlowMessage]] = []
        for fid, recs in flows.items():
            reason = _sequence_anomaly(recs)
            if reason:
                self.flagged[fid] = reason
                log.warning("flow %s excluded: %s", fid, reason)
                continue
            out.extend((m.first_packet_index, m) for m in _split_flow(fid, recs))
        out.sort(key=lambda pair: pair[0])
        return [m for _, m in out]


def reassemble(records: Iterable[PacketRecord]) -> list[FlowMessage]:
    return Reassembler().run(records)


def _sequence_anomaly(recs: list[PacketRecord]) -> Optional[str]:
    expected = None
    for rec in recs:
        if rec.seq is None:
            return None
        if expected is not None and rec.seq != expected:
            return f"sequence break at packet {rec.index} (seq {rec.seq}, expected {expected})"
        expected = (rec.seq + len(rec.payload)) & 0xFFFFFFFF
    return None


def _split_flow(fid, recs: list[PacketRecord]) -> list[FlowMessage]:
    buf = b"".join(r.payload for r in recs)
    offsets = []
    pos = 0
    for r in recs:
        offsets.append(pos)
        pos += len(r.payload)
    direction = recs[0].direction
    ports = (fid[1], fid[3])

    def first_index(offset: int) -> int:
        return recs[max(bisect.bisect_right(offsets, offset) - 1, 0)].index

    msgs = []
    pos = 0
    while pos < len(buf):
        rest = buf[pos:]
        proto = guess_protocol(rest, ports)
        n = None
        if proto is not Protocol.UNKNOWN:
            response = rest.startswith((b"HTTP/", b"RTSP/"))
            n = message_length(rest, proto, response=response)
            if n is None and response and proto is Protocol.HTTP and message_length(rest, proto) is not None:
                n = len(rest)  # body runs to connection close
        if n is None:
            msgs.append(FlowMessage(fid, Protocol.UNKNOWN, rest, first_index(pos), direction))
            break
        msgs.append(FlowMessage(fid, proto, rest[:n], first_index(pos), direction))
        pos += n
    return msgs


__all__ = [
    "Capture", "CaptureError", "Direction", "FlowMessage", "PacketRecord", "PcapWriter",
    "Reassembler", "guess_protocol", "load_capture", "parse_capture", "reassemble",
    "tcp_frame", "udp_frame", "write_pcap",
]
