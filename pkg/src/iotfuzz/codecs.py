"""Wire codecs for the three protocols the fuzzer speaks.

HTTP and RTSP requests are decomposed losslessly into the fields the mutation
engine works on: ``serialize(parse(b)) == b`` for every well-formed request.
Parsers never raise; malformed input comes back with ``well_formed=False`` and
the raw bytes attached.

The TP-Link SmartHome transport is a 4-byte big-endian length prefix followed
by a JSON command obfuscated with an autokey XOR stream.
"""

from __future__ import annotations

import base64
import binascii
import copy
import re
from dataclasses import dataclass, field
from typing import ClassVar, Optional

import numpy as np

from iotfuzz import Protocol

# Initial key of the SmartHome autokey stream. Recovered by known-plaintext
# analysis: every captured command frame starts with '{' (0x7b) and its first
# cipher byte is 0xd0, so key0 = 0xd0 ^ 0x7b = 0xab. tests/test_codecs.py
# re-derives it from all four reference frames.
TPLINK_INITIAL_KEY = 171

HTTP_METHOD_TOKENS = (
    b"GET", b"POST", b"OPTIONS", b"HEAD", b"TRACE", b"CONNECT", b"PUT", b"DELETE",
    b"PATCH",
)
RTSP_METHOD_TOKENS = (
    b"DESCRIBE", b"ANNOUNCE", b"OPTIONS", b"PLAY", b"SETUP", b"PAUSE", b"TEARDOWN",
    b"SET_PARAMETER", b"GET_PARAMETER", b"RECORD", b"REDIRECT",
)

_REQUEST_LINE = re.compile(rb"([^ \r\n]+)( +)([^ \r\n]+)( +)([^ \r\n]+)")
_VERSION = re.compile(rb"(HTTP|RTSP)/\d+\.\d+")
_STATUS_LINE = re.compile(rb"((?:HTTP|RTSP)/\d+\.\d+) +(\d{3})(?: +(.*))?")
_SCHEME = re.compile(rb"[A-Za-z][A-Za-z0-9+.\-]*://")
_HEADER_END = re.compile(rb"\r?\n\r?\n")
_HEADER_NAME = re.compile(rb"[^\x00-\x20:\x7f]+")


class FrameError(ValueError):
    """A TP-Link frame whose length prefix disagrees with its body."""


class CredentialError(ValueError):
    """An Authorization value that cannot be decoded."""


# ---------------------------------------------------------------------------
# HTTP / RTSP requests


@dataclass
class HeaderLine:
    name: bytes
    value: bytes
    sep: bytes = b" "  # whitespace between ':' and the value

    def serialize(self) -> bytes:
        return self.name + b":" + self.sep + self.value + b"\r\n"


def split_uri(uri: bytes) -> tuple[Optional[bytes], Optional[bytes], bytes, Optional[bytes]]:
    """Split a request URI into (scheme, netloc:port, path, query).

    The scheme keeps its ``://`` and the query excludes the ``?``, so the
    pieces concatenate back to the original (see :func:`join_uri`).
    """
    scheme = netloc = query = None
    rest = uri
    m = _SCHEME.match(rest)
    if m:
        scheme = m.group(0)
        rest = rest[m.end():]
        cut = len(rest)
        for delim in (b"/", b"?"):
            pos = rest.find(delim)
            if pos >= 0:
                cut = min(cut, pos)
        netloc, rest = rest[:cut], rest[cut:]
    q = rest.find(b"?")
    if q >= 0:
        rest, query = rest[:q], rest[q + 1:]
    return scheme, netloc, rest, query


def join_uri(scheme, netloc, path, query) -> bytes:
    out = (scheme or b"") + (netloc or b"") + path
    if query is not None:
        out += b"?" + query
    return out


@dataclass
class HttpRequestTemplate:
    """One request split into its fuzzable fields."""

    protocol: ClassVar[Protocol] = Protocol.HTTP

    method: bytes = b"GET"
    sp_left: bytes = b" "
    uri_scheme: Optional[bytes] = None
    uri_netloc_port: Optional[bytes] = None
    uri_path: bytes = b"/"
    uri_query: Optional[bytes] = None
    sp_right: bytes = b" "
    version: bytes = b"HTTP/1.1"
    crlf: bytes = b"\r\n"
    headers: list[HeaderLine] = field(default_factory=list)
    body: bytes = b""
    well_formed: bool = True
    raw: Optional[bytes] = None

    @property
    def request_uri(self) -> bytes:
        return join_uri(self.uri_scheme, self.uri_netloc_port, self.uri_path, self.uri_query)

    @request_uri.setter
    def request_uri(self, uri: bytes) -> None:
        self.uri_scheme, self.uri_netloc_port, self.uri_path, self.uri_query = split_uri(uri)

    @property
    def request_line(self) -> bytes:
        if not self.well_formed:
            return (self.raw or b"").split(b"\n", 1)[0].rstrip(b"\r")
        return self.method + self.sp_left + self.request_uri + self.sp_right + self.version

    def header(self, name: str | bytes) -> Optional[bytes]:
        key = _lower(name)
        for h in self.headers:
            if h.name.lower() == key:
                return h.value
        return None

    def set_header(self, name: str | bytes, value: bytes) -> None:
        key = _lower(name)
        for h in self.headers:
            if h.name.lower() == key:
                h.value = value
                return
        self.headers.append(HeaderLine(_bytes(name), value))

    def fields(self) -> list[str]:
        """Names of the grammar fields present in this request, in wire order."""
        names = ["method", "sp_left"]
        if self.uri_scheme is not None:
            names.append("uri_scheme")
        if self.uri_netloc_port is not None:
            names.append("uri_netloc_port")
        names.append("uri_path")
        if self.uri_query is not None:
            names.append("uri_query")
        names += ["sp_right", "version", "crlf"]
        names += [f"header({h.name.decode('latin-1')})" for h in self.headers]
        return names

    def get_field(self, name: str) -> Optional[bytes]:
        if name.startswith("header("):
            return self.header(name[7:-1])
        if name == "request_uri":
            return self.request_uri
        return getattr(self, name)

    def set_field(self, name: str, value: bytes) -> None:
        if name.startswith("header("):
            self.set_header(name[7:-1], value)
        elif name == "request_uri":
            self.request_uri = value
        else:
            setattr(self, name, value)

    def copy(self):
        return copy.deepcopy(self)

    def serialize(self) -> bytes:
        if not self.well_formed:
            return self.raw or b""
        head = self.request_line + self.crlf
        head += b"".join(h.serialize() for h in self.headers)
        return head + b"\r\n" + self.body


@dataclass
class RtspRequestTemplate(HttpRequestTemplate):
    protocol: ClassVar[Protocol] = Protocol.RTSP

    method: bytes = b"OPTIONS"
    version: bytes = b"RTSP/1.0"

    @property
    def cseq(self) -> Optional[bytes]:
        return self.header("CSeq")

    @cseq.setter
    def cseq(self, value: bytes) -> None:
        self.set_header("CSeq", value)

    def fields(self) -> list[str]:
        names = super().fields()
        return ["cseq" if n.lower() == "header(cseq)" else n for n in names]

    def get_field(self, name: str) -> Optional[bytes]:
        if name == "cseq":
            return self.cseq
        return super().get_field(name)

    def set_field(self, name: str, value: bytes) -> None:
        if name == "cseq":
            self.cseq = value
        else:
            super().set_field(name, value)


def _parse_request(data: bytes, cls):
    bad = cls(well_formed=False, raw=bytes(data))
    nl = data.find(b"\n")
    if nl < 0:
        return bad
    line, crlf = data[:nl], b"\n"
    if line.endswith(b"\r"):
        line, crlf = line[:-1], b"\r\n"
    m = _REQUEST_LINE.fullmatch(line)
    if not m:
        return bad
    method, sp_left, uri, sp_right, version = m.groups()
    vm = _VERSION.fullmatch(version)
    if not vm or vm.group(1).decode() != cls.protocol.value:
        return bad
    headers = []
    pos = nl + 1
    while True:
        end = data.find(b"\r\n", pos)
        if end < 0:
            return bad
        hline = data[pos:end]
        pos = end + 2
        if not hline:
            break
        colon = hline.find(b":")
        if colon <= 0 or not _HEADER_NAME.fullmatch(hline[:colon]):
            return bad
        after = hline[colon + 1:]
        value = after.lstrip(b" \t")
        headers.append(HeaderLine(hline[:colon], value, after[: len(after) - len(value)]))
    scheme, netloc, path, query = split_uri(uri)
    return cls(
        method=method, sp_left=sp_left, uri_scheme=scheme, uri_netloc_port=netloc,
        uri_path=path, uri_query=query, sp_right=sp_right, version=version, crlf=crlf,
        headers=headers, body=data[pos:],
    )


def parse_http_request(data: bytes) -> HttpRequestTemplate:
    return _parse_request(data, HttpRequestTemplate)


def parse_rtsp_request(data: bytes) -> RtspRequestTemplate:
    return _parse_request(data, RtspRequestTemplate)


# ---------------------------------------------------------------------------
# Responses


@dataclass
class HttpResponseView:
    status_code: Optional[int]
    reason: str = ""
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""
    well_formed: bool = True
    raw: bytes = b""
    version: str = ""

    def header(self, name: str) -> Optional[str]:
        key = name.lower()
        for k, v in self.headers:
            if k.lower() == key:
                return v
        return None


def _parse_response(data: bytes, proto: Protocol) -> HttpResponseView:
    bad = HttpResponseView(status_code=None, well_formed=False, raw=bytes(data))
    m = _HEADER_END.search(data)
    if not m:
        return bad
    lines = data[: m.start()].split(b"\n")
    sm = _STATUS_LINE.fullmatch(lines[0].rstrip(b"\r"))
    if not sm or not sm.group(1).startswith(proto.value.encode()):
        return bad
    headers = []
    for line in lines[1:]:
        line = line.rstrip(b"\r")
        name, sep, value = line.partition(b":")
        if not sep or not name.strip():
            return bad
        headers.append((name.strip().decode("latin-1"), value.strip().decode("latin-1")))
    body = data[m.end():]
    view = HttpResponseView(
        status_code=int(sm.group(2)), reason=(sm.group(3) or b"").decode("latin-1"),
        headers=headers, body=body, raw=bytes(data), version=sm.group(1).decode(),
    )
    cl = view.header("Content-Length")
    if cl is not None and cl.isdigit() and len(body) > int(cl):
        view.body = body[: int(cl)]
    return view


def parse_http_response(data: bytes) -> HttpResponseView:
    return _parse_response(data, Protocol.HTTP)


def parse_rtsp_response(data: bytes) -> HttpResponseView:
    return _parse_response(data, Protocol.RTSP)


def message_length(buf: bytes, protocol: Protocol, response: bool = False) -> Optional[int]:
    """Length of the first complete message at the start of ``buf``.

    Returns None while more bytes are needed. HTTP responses without a
    Content-Length are only complete when the peer closes, so they always
    return None here.
    """
    if protocol is Protocol.TPLINK_SMARTHOME:
        if len(buf) < 4:
            return None
        total = 4 + int.from_bytes(buf[:4], "big")
        return total if len(buf) >= total else None
    m = _HEADER_END.search(buf)
    if not m:
        return None
    cl = _content_length(buf[: m.start()])
    if cl is None:
        if response and protocol is Protocol.HTTP:
            return None
        return m.end()
    total = m.end() + cl
    return total if len(buf) >= total else None


def _content_length(head: bytes) -> Optional[int]:
    for line in head.split(b"\n")[1:]:
        name, sep, value = line.partition(b":")
        if sep and name.strip().lower() == b"content-length":
            value = value.strip()
            if value.isdigit():
                return int(value)
    return None


# ---------------------------------------------------------------------------
# Basic credentials


@dataclass(frozen=True)
class CredentialFinding:
    scheme: str
    encoded: bytes
    decoded_user: Optional[str] = None
    decoded_pass: Optional[str] = None
    packet_index: int = -1

    @property
    def decoded(self) -> bool:
        return self.decoded_user is not None


def decode_basic_credential(header_value: bytes, packet_index: int = -1) -> CredentialFinding:
    """Decode an Authorization header value.

    Non-Basic schemes come back undecoded. Raises :class:`CredentialError`
    when a Basic payload is not valid Base64.
    """
    value = header_value.strip()
    scheme, _, encoded = value.partition(b" ")
    encoded = encoded.strip()
    scheme_text = scheme.decode("latin-1")
    if scheme_text.lower() != "basic":
        return CredentialFinding(scheme_text, encoded, packet_index=packet_index)
    try:
        raw = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise CredentialError(f"invalid Base64 in Basic credential: {exc}") from None
    if not encoded:
        raise CredentialError("empty Basic credential")
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        text = raw.decode("latin-1")
    if ":" not in text:
        return CredentialFinding(scheme_text, encoded, packet_index=packet_index)
    user, _, password = text.partition(":")
    return CredentialFinding(scheme_text, encoded, user, password, packet_index)


# ---------------------------------------------------------------------------
# TP-Link SmartHome


def tplink_encode(plain: bytes) -> bytes:
    """Autokey XOR: each output byte becomes the key for the next one.

    The recurrence c[i] = p[i] ^ c[i-1] (c[-1] = initial key) unrolls to a
    running XOR over the plaintext, which numpy computes in one pass.
    """
    if not plain:
        return b""
    p = np.frombuffer(plain, dtype=np.uint8).copy()
    p[0] ^= TPLINK_INITIAL_KEY
    return np.bitwise_xor.accumulate(p).tobytes()


def tplink_decode(cipher: bytes) -> bytes:
    if not cipher:
        return b""
    c = np.frombuffer(cipher, dtype=np.uint8)
    keys = np.empty_like(c)
    keys[0] = TPLINK_INITIAL_KEY
    keys[1:] = c[:-1]
    return (c ^ keys).tobytes()


@dataclass(frozen=True)
class TplinkFrame:
    length: int
    cipher: bytes
    plain: bytes

    @classmethod
    def from_plain(cls, plain: bytes) -> "TplinkFrame":
        return cls(len(plain), tplink_encode(plain), plain)

    @classmethod
    def from_wire(cls, data: bytes) -> "TplinkFrame":
        if len(data) < 4:
            raise FrameError(f"frame shorter than its 4-byte prefix ({len(data)} bytes)")
        length = int.from_bytes(data[:4], "big")
        cipher = data[4:]
        if length != len(cipher):
            raise FrameError(f"length prefix {length} but {len(cipher)} body bytes")
        return cls(length, cipher, tplink_decode(cipher))

    def to_wire(self) -> bytes:
        return self.length.to_bytes(4, "big") + self.cipher


@dataclass
class TplinkRequestTemplate:
    """A SmartHome command frame; ``length=None`` means recompute from the command."""

    protocol: ClassVar[Protocol] = Protocol.TPLINK_SMARTHOME

    command: bytes = b""
    length: Optional[int] = None
    well_formed: bool = True
    raw: Optional[bytes] = None

    @property
    def plain(self) -> bytes:
        return tplink_decode(self.command)

    @property
    def request_line(self) -> bytes:
        return self.plain

    def fields(self) -> list[str]:
        return ["frame_length", "frame_command"]

    def get_field(self, name: str) -> Optional[bytes]:
        if name == "frame_command":
            return self.command
        if name == "frame_length":
            n = len(self.command) if self.length is None else self.length
            return n.to_bytes(4, "big")
        raise KeyError(name)

    def set_field(self, name: str, value: bytes) -> None:
        if name == "frame_command":
            self.command = value
        elif name == "frame_length":
            self.length = int.from_bytes(value, "big")
        else:
            raise KeyError(name)

    def copy(self):
        return copy.deepcopy(self)

    def serialize(self) -> bytes:
        if not self.well_formed:
            return self.raw or b""
        n = len(self.command) if self.length is None else self.length
        return (n & 0xFFFFFFFF).to_bytes(4, "big") + self.command


def parse_tplink_request(data: bytes) -> TplinkRequestTemplate:
    if len(data) < 4:
        return TplinkRequestTemplate(well_formed=False, raw=bytes(data))
    length = int.from_bytes(data[:4], "big")
    command = data[4:]
    return TplinkRequestTemplate(command, None if length == len(command) else length)


def parse_request(data: bytes, protocol: Protocol):
    if protocol is Protocol.HTTP:
        return parse_http_request(data)
    if protocol is Protocol.RTSP:
        return parse_rtsp_request(data)
    if protocol is Protocol.TPLINK_SMARTHOME:
        return parse_tplink_request(data)
    raise ValueError(f"no request codec for {protocol}")


def _lower(name: str | bytes) -> bytes:
    return _bytes(name).lower()


def _bytes(s: str | bytes) -> bytes:
    return s.encode("latin-1") if isinstance(s, str) else s
