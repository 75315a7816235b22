"""Scriptable stand-ins for the D3D camera, the Ezviz camera and the Kasa plug.

Each :class:`MockBehavior` describes one listening service. ``serve`` starts
it on a background thread and returns a handle that can be stopped.

Route matching modes:

``exact``
    the request path must equal a known route.
``lenient``
    the path may be up to ``max_distance`` edits away from a known route
    (the query string is ignored).
``scripted``
    the serialized request must be byte-identical to an entry of
    ``accept_list``; nothing else is accepted.
"""

from __future__ import annotations

import base64
import configparser
import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from os import PathLike
from pathlib import Path
from typing import Optional

from iotfuzz import Protocol
from iotfuzz.codecs import (
    RTSP_METHOD_TOKENS,
    TplinkFrame,
    message_length,
    parse_http_request,
    parse_rtsp_request,
    tplink_decode,
)

log = logging.getLogger(__name__)

DEFAULT_AUTH = b"Basic YWRtaW46YWRtaW4xMjM="  # admin:admin123
SET_OK_BODY = b"[Succeed]set ok."
# Smallest well-formed baseline JPEG: SOI, a comment segment, EOI.
TINY_JPEG = b"\xff\xd8\xff\xfe\x00\x0bmock-frame\xff\xd9"
RTSP_PUBLIC = b"OPTIONS, DESCRIBE, PLAY, PAUSE, SETUP, TEARDOWN, SET_PARAMETER, GET_PARAMETER"

SYSINFO = {
    "sw_ver": "1.0.8 Build 151101 Rel.24452", "hw_ver": "1.0", "type": "IOT.SMARTPLUGSWITCH",
    "model": "HS110(EU)", "mac": "50:C7:BF:00:00:01", "deviceId": "8006" + "0" * 36,
    "hwId": "45E29DA8382494D2E82688B52A0B2EB5", "alias": "mock plug", "relay_state": 0,
    "err_code": 0,
}


class Device(str, Enum):
    D3D = "D3D"
    EZVIZ = "EZVIZ"
    TPLINK = "TPLINK"


# route path -> response kind ("setok", "jpeg", "stream")
DEFAULT_ROUTES = {
    (Device.D3D, Protocol.HTTP): {
        b"/web/cgi-bin/hi3510/ptzctrl.cgi": "setok",
        b"/web/cgi-bin/hi3510/param.cgi": "setok",
        b"/tmpfs/auto.jpg": "jpeg",
        b"/tmpfs/snap.jpg": "jpeg",
    },
    (Device.D3D, Protocol.RTSP): {
        b"/": "stream", b"/11": "stream", b"/12": "stream", b"/13": "stream",
        b"/live/ch00_0": "stream", b"/live/ch00_1": "stream",
    },
    (Device.EZVIZ, Protocol.HTTP): {
        b"/ISAPI/Streaming/channels/101/picture": "jpeg",
        b"/onvif-http/snapshot": "jpeg",
    },
    (Device.EZVIZ, Protocol.RTSP): {
        b"/0": "stream", b"/1": "stream", b"/stream1": "stream", b"/stream2": "stream",
        b"/1/stream1": "stream", b"/1/stream2": "stream",
    },
}


@dataclass
class MockBehavior:
    device: Device
    protocol: Protocol
    listen_port: int = 0
    host: str = "127.0.0.1"
    auth_required: bool = False
    expected_auth: bytes = DEFAULT_AUTH
    route_matcher: str = "exact"
    max_distance: int = 2
    accept_list: frozenset = frozenset()
    routes: Optional[dict] = None
    drop_every: int = 0
    stall_every: int = 0
    drop: frozenset = frozenset()
    stall: frozenset = frozenset()
    stall_seconds: float = 10.0
    on_unknown: str = "reply"  # or "close"
    read_timeout: float = 2.0

    def __post_init__(self):
        if self.route_matcher not in ("exact", "lenient", "scripted"):
            raise ValueError(f"unknown route matcher {self.route_matcher!r}")
        if self.on_unknown not in ("reply", "close"):
            raise ValueError("on_unknown must be 'reply' or 'close'")
        if self.routes is None:
            self.routes = dict(DEFAULT_ROUTES.get((self.device, self.protocol), {}))
        self.accept_list = frozenset(self.accept_list)


def edit_distance(a: bytes, b: bytes) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


# ---------------------------------------------------------------------------
# Response builders


def http_response(code: int, reason: str, body: bytes = b"", ctype: str = "text/html",
                  version: bytes = b"HTTP/1.1") -> bytes:
    head = (
        version + b" " + str(code).encode() + b" " + reason.encode() + b"\r\n"
        + b"Server: Hipcam\r\n"
        + b"Content-Type: " + ctype.encode() + b"\r\n"
        + b"Content-Length: " + str(len(body)).encode() + b"\r\n\r\n"
    )
    return head + body


def rtsp_response(code: int, reason: str, cseq: Optional[bytes], extra: list[bytes] = (),
                  body: bytes = b"") -> bytes:
    lines = [b"RTSP/1.0 " + str(code).encode() + b" " + reason.encode()]
    if cseq is not None:
        lines.append(b"CSeq: " + cseq)
    lines.extend(extra)
    if body:
        lines.append(b"Content-Type: application/sdp")
        lines.append(b"Content-Length: " + str(len(body)).encode())
    return b"\r\n".join(lines) + b"\r\n\r\n" + body


def tplink_response(doc) -> bytes:
    plain = json.dumps(doc, separators=(",", ":")).encode()
    return TplinkFrame.from_plain(plain).to_wire()


class _Device:
    """Request -> response logic, independent of sockets."""

    def __init__(self, behavior: MockBehavior):
        self.b = behavior
        self.relay_state = 0
        self.lock = threading.Lock()

    def _route(self, path: bytes) -> Optional[str]:
        routes = self.b.routes
        if path in routes:
            return routes[path]
        if self.b.route_matcher == "lenient":
            best = min(routes, key=lambda r: (edit_distance(path, r), r), default=None)
            if best is not None and edit_distance(path, best) <= self.b.max_distance:
                return routes[best]
        return None

    def _nearest(self, path: bytes) -> Optional[str]:
        if not self.b.routes:
            return None
        best = min(self.b.routes, key=lambda r: (edit_distance(path, r), r))
        return self.b.routes[best]

    # HTTP -------------------------------------------------------------
    def handle_http(self, raw: bytes) -> Optional[bytes]:
        req = parse_http_request(raw)
        if self.b.route_matcher == "scripted":
            if raw in self.b.accept_list:
                kind = self._nearest(req.uri_path if req.well_formed else b"") or "setok"
                return self._http_ok(kind)
            if not req.well_formed:
                return self._bad_request()
            return http_response(404, "Not Found", b"<html><body>404 Not Found</body></html>")
        if not req.well_formed:
            return self._bad_request()
        if req.method not in (b"GET", b"HEAD", b"POST"):
            return http_response(501, "Not Implemented", b"")
        if self.b.auth_required and (req.header("Authorization") or b"").strip() != self.b.expected_auth:
            return http_response(401, "Unauthorized", b"401 Unauthorized")
        kind = self._route(req.uri_path)
        if kind is None:
            return http_response(404, "Not Found", b"<html><body>404 Not Found</body></html>")
        return self._http_ok(kind)

    def _http_ok(self, kind: str) -> bytes:
        if kind == "jpeg":
            return http_response(200, "OK", TINY_JPEG, "image/jpeg")
        return http_response(200, "OK", SET_OK_BODY)

    def _bad_request(self) -> Optional[bytes]:
        if self.b.on_unknown == "close":
            return None
        if self.b.protocol is Protocol.RTSP:
            return rtsp_response(400, "Bad Request", None)
        return http_response(400, "Bad Request", b"400 Bad Request")

    # RTSP -------------------------------------------------------------
    def handle_rtsp(self, raw: bytes) -> Optional[bytes]:
        req = parse_rtsp_request(raw)
        cseq = req.cseq.strip() if req.well_formed and req.cseq is not None else None
        if self.b.route_matcher == "scripted":
            if raw in self.b.accept_list:
                return self._rtsp_ok(req.method if req.well_formed else b"OPTIONS", cseq)
            if not req.well_formed:
                return self._bad_request()
            return rtsp_response(404, "Not Found", cseq)
        if not req.well_formed or cseq is None:
            return self._bad_request()
        if req.method not in RTSP_METHOD_TOKENS or req.method not in RTSP_PUBLIC.replace(b" ", b"").split(b","):
            return rtsp_response(405, "Method Not Allowed", cseq, [b"Allow: " + RTSP_PUBLIC])
        if self.b.auth_required and (req.header("Authorization") or b"").strip() != self.b.expected_auth:
            return rtsp_response(401, "Unauthorized", cseq)
        if self._route(req.uri_path) is None:
            return rtsp_response(404, "Not Found", cseq)
        return self._rtsp_ok(req.method, cseq)

    def _rtsp_ok(self, method: bytes, cseq: Optional[bytes]) -> bytes:
        if method == b"OPTIONS":
            return rtsp_response(200, "OK", cseq, [b"Public: " + RTSP_PUBLIC])
        if method == b"DESCRIBE":
            sdp = b"v=0\r\no=- 0 0 IN IP4 0.0.0.0\r\ns=mock\r\nm=video 0 RTP/AVP 96\r\n"
            return rtsp_response(200, "OK", cseq, [], sdp)
        if method == b"SETUP":
            return rtsp_response(200, "OK", cseq, [b"Session: 12345678;timeout=60",
                                                   b"Transport: RTP/AVP/TCP;unicast;interleaved=0-1"])
        return rtsp_response(200, "OK", cseq, [b"Session: 12345678"])

    # TP-Link ----------------------------------------------------------
    def handle_tplink(self, raw: bytes) -> Optional[bytes]:
        if self.b.route_matcher == "scripted" and raw not in self.b.accept_list:
            return tplink_response({"err_code": -1, "err_msg": "rejected"})
        plain = tplink_decode(raw[4:])
        try:
            doc = json.loads(plain.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            if self.b.on_unknown == "close":
                return None
            return tplink_response({"err_code": -1, "err_msg": "json decode error"})
        if not isinstance(doc, dict) or not doc:
            return tplink_response({"err_code": -1, "err_msg": "invalid request"})
        out = {}
        for module, methods in doc.items():
            if module not in ("system", "emeter", "time", "schedule", "cnCloud"):
                out[module] = {"err_code": -1, "err_msg": "module not support"}
                continue
            if not isinstance(methods, dict):
                out[module] = {"err_code": -1, "err_msg": "invalid argument"}
                continue
            out[module] = {m: self._tplink_method(module, m, arg) for m, arg in methods.items()}
        return tplink_response(out)

    def _tplink_method(self, module: str, method: str, arg) -> dict:
        if (module, method) == ("system", "get_sysinfo"):
            with self.lock:
                return dict(SYSINFO, relay_state=self.relay_state)
        if (module, method) == ("system", "set_relay_state"):
            state = arg.get("state") if isinstance(arg, dict) else None
            if state not in (0, 1):
                return {"err_code": -3, "err_msg": "invalid argument"}
            # The plug answers regardless of its current state.
            with self.lock:
                self.relay_state = state
            return {"err_code": 0}
        if (module, method) == ("emeter", "get_realtime"):
            return {"current": 0.012, "voltage": 236.4, "power": 0.0, "total": 0.001, "err_code": 0}
        if (module, method) in (("system", "reboot"), ("system", "set_led_off"),
                                ("system", "set_dev_alias"), ("time", "get_time")):
            return {"err_code": 0}
        return {"err_code": -2, "err_msg": "member not support"}

    def respond(self, raw: bytes) -> Optional[bytes]:
        if self.b.protocol is Protocol.TPLINK_SMARTHOME:
            return self.handle_tplink(raw)
        if self.b.protocol is Protocol.RTSP:
            return self.handle_rtsp(raw)
        return self.handle_http(raw)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: _MockTCPServer = self.server  # type: ignore[assignment]
        b = server.behavior
        with server.count_lock:
            server.connections += 1
            n = server.connections
        sock: socket.socket = self.request
        try:
            if n in b.drop or (b.drop_every and n % b.drop_every == 0):
                # Zero linger turns close into RST; close here so no FIN goes first.
                sock.setsockopt(socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0))
                sock.close()
                return
            if n in b.stall or (b.stall_every and n % b.stall_every == 0):
                server.stopping.wait(b.stall_seconds)
                return
            raw = self._read(sock, b)
            if raw is None:
                return
            reply = server.device.respond(raw)
            if reply:
                sock.sendall(reply)
        except Exception:  # never let a request kill the mock
            log.exception("mock %s/%s failed on connection %d", b.device.value, b.protocol.value, n)

    def _read(self, sock: socket.socket, b: MockBehavior) -> Optional[bytes]:
        sock.settimeout(b.read_timeout)
        buf = b""
        while True:
            n = message_length(buf, b.protocol)
            if n is not None:
                return buf[:n]
            try:
                chunk = sock.recv(65536)
            except (socket.timeout, ConnectionError):
                chunk = b""
            if not chunk:
                # Peer finished or stalled: answer whatever arrived.
                return buf or None
            buf += chunk


class _MockTCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True
    request_queue_size = 128

    def __init__(self, behavior: MockBehavior):
        self.behavior = behavior
        self.device = _Device(behavior)
        self.connections = 0
        self.count_lock = threading.Lock()
        self.stopping = threading.Event()
        super().__init__((behavior.host, behavior.listen_port), _Handler)


class MockServer:
    """Handle on a running mock; usable as a context manager."""

    def __init__(self, behavior: MockBehavior):
        self.behavior = behavior
        self._server = _MockTCPServer(behavior)
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        kwargs={"poll_interval": 0.05}, daemon=True)

    @property
    def host(self) -> str:
        return self._server.server_address[0]

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def connections(self) -> int:
        return self._server.connections

    @property
    def relay_state(self) -> int:
        return self._server.device.relay_state

    def start(self) -> "MockServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.stopping.set()
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve(behavior: MockBehavior) -> MockServer:
    """Bind and start a mock; raises OSError if the port is taken."""
    return MockServer(behavior).start()


# ---------------------------------------------------------------------------
# Config files


def _ints(text: str) -> frozenset:
    return frozenset(int(p) for p in text.replace(",", " ").split())


def read_accept_list(path: str | PathLike) -> frozenset:
    """One Base64-encoded serialized request per line."""
    out = set()
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.add(base64.b64decode(line, validate=True))
    return frozenset(out)


def write_accept_list(path: str | PathLike, accepted) -> None:
    Path(path).write_text("".join(base64.b64encode(a).decode() + "\n" for a in accepted))


def load_mock_config(path: str | PathLike) -> list[MockBehavior]:
    """Read an INI file with one section per listening service."""
    cp = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    if not cp.read(path):
        raise ValueError(f"cannot read mock config {path}")
    out = []
    for name in cp.sections():
        s = cp[name]
        try:
            accept = frozenset()
            if s.get("accept_list"):
                ap = Path(s["accept_list"])
                accept = read_accept_list(ap if ap.is_absolute() else path.parent / ap)
            routes = None
            if s.get("routes"):
                routes = {}
                for item in s["routes"].split(","):
                    route, _, kind = item.strip().partition("=")
                    routes[route.strip().encode()] = kind.strip() or "setok"
            auth = s.get("auth")
            out.append(MockBehavior(
                device=Device(s.get("device", "D3D").upper()),
                protocol=Protocol.parse(s.get("protocol", "HTTP")),
                listen_port=s.getint("port", 0),
                host=s.get("host", "127.0.0.1"),
                auth_required=bool(auth),
                expected_auth=auth.encode() if auth else DEFAULT_AUTH,
                route_matcher=s.get("matcher", "exact"),
                max_distance=s.getint("max_distance", 2),
                accept_list=accept,
                routes=routes,
                drop_every=s.getint("drop_every", 0),
                stall_every=s.getint("stall_every", 0),
                drop=_ints(s.get("drop", "")),
                stall=_ints(s.get("stall", "")),
                stall_seconds=s.getfloat("stall_seconds", 10.0),
                on_unknown=s.get("on_unknown", "reply"),
            ))
        except (ValueError, KeyError) as exc:
            raise ValueError(f"mock config section [{name}]: {exc}") from None
    return out
