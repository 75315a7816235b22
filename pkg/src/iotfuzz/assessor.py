"""Response classification, campaign reports and the passive credential scan."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from iotfuzz import Protocol
from iotfuzz.capture import Capture, Direction, PacketRecord, reassemble
from iotfuzz.codecs import (
    CredentialError,
    CredentialFinding,
    FrameError,
    HttpResponseView,
    TplinkFrame,
    decode_basic_credential,
    parse_http_request,
    parse_http_response,
    parse_rtsp_request,
    parse_rtsp_response,
    tplink_decode,
)
from iotfuzz.injector import ExchangeRecord, Outcome
from iotfuzz.registry import Registry, RegistryError, VulnerabilityDescriptor, load_registry

JPEG_SOI = b"\xff\xd8"


class VerdictClass(str, Enum):
    VALID = "valid"
    INVALID = "invalid"
    MALFORMED_REJECTED = "malformed_rejected"
    NO_RESPONSE = "no_response"


@dataclass(frozen=True)
class ResponseVerdict:
    mutant_id: int
    category: VerdictClass
    evidence: str
    status: str = ""  # e.g. "200 OK", "err_code 0", "timeout"
    request_line: bytes = b""
    artifact: Optional[bytes] = None  # exploit evidence, e.g. the JPEG bytes


@dataclass
class FuzzReport:
    vuln_id: str
    protocol: str = ""
    target: str = ""
    sent: int = 0
    valid: int = 0
    invalid: int = 0
    malformed_rejected: int = 0
    no_response: int = 0
    loss_pct: float = 0.0
    duration: float = 0.0
    coverage_valid_pct: int = 0
    coverage_invalid_pct: int = 0
    verdicts: list[ResponseVerdict] = field(default_factory=list)
    vulnerable: bool = False


def percent_half_up(part: int, whole: int) -> int:
    """Integer percentage, halves rounded up; 0 when ``whole`` is 0."""
    if whole <= 0:
        return 0
    return (200 * part + whole) // (2 * whole)


# ---------------------------------------------------------------------------
# Validity rules. Each takes the exchange and returns (matched, evidence, status).


def _excerpt(data: bytes, limit: int = 60) -> str:
    text = data[:limit].decode("latin-1")
    text = text.encode("unicode_escape").decode("ascii")
    return text + ("..." if len(data) > limit else "")


def _status(view: HttpResponseView) -> str:
    return f"{view.status_code} {view.reason}".strip()


def _rule_set_ok(vuln, ex: ExchangeRecord, view: HttpResponseView):
    marker = (vuln.response_match or "set ok").encode("latin-1")
    ok = view.status_code == 200 and marker in view.body
    why = f"200 with {marker.decode()!r} in body" if ok else f"{_status(view)}, body lacks {marker.decode()!r}"
    return ok, why, None


def _rule_image(vuln, ex, view: HttpResponseView):
    ctype = (view.header("Content-Type") or "").lower()
    ok = view.status_code == 200 and ctype.split(";")[0].strip() == "image/jpeg"
    if not ok:
        return False, f"{_status(view)}, Content-Type {ctype or 'absent'}", None
    if view.body.startswith(JPEG_SOI):
        return True, f"200 image/jpeg, saved {len(view.body)} JPEG bytes", view.body
    return True, "200 image/jpeg, valid without artifact (no JPEG SOI in body)", None


def _rule_cseq(vuln, ex: ExchangeRecord, view: HttpResponseView):
    req = parse_rtsp_request(ex.sent_bytes)
    sent_cseq = req.cseq.strip() if req.well_formed and req.cseq is not None else None
    got = view.header("CSeq")
    ok = view.status_code == 200 and sent_cseq is not None and got is not None \
        and got.strip().encode("latin-1") == sent_cseq
    sent_txt = sent_cseq.decode("latin-1") if sent_cseq is not None else "none"
    return ok, f"{_status(view)}, CSeq sent {sent_txt} got {got}", None


_HTTP_RULES = {
    "http_200_set_ok": _rule_set_ok,
    "http_200_image_jpeg": _rule_image,
    "rtsp_200_same_cseq": _rule_cseq,
}


def _err_codes(obj) -> list:
    found = []
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k == "err_code":
                found.append(v)
            else:
                found.extend(_err_codes(v))
    elif isinstance(obj, list):
        for v in obj:
            found.extend(_err_codes(v))
    return found


def _classify_tplink(vuln, ex: ExchangeRecord) -> ResponseVerdict:
    req_line = _tplink_plain(ex.sent_bytes)
    try:
        frame = TplinkFrame.from_wire(ex.response_bytes)
        doc = json.loads(frame.plain.decode("utf-8"))
    except (FrameError, ValueError) as exc:
        return ResponseVerdict(ex.mutant_id, VerdictClass.INVALID,
                               f"undecodable SmartHome response ({exc}): {_excerpt(ex.response_bytes)}",
                               "garbled", req_line)
    codes = _err_codes(doc)
    plain = frame.plain.decode("utf-8", "replace")
    status = "err_code " + ",".join(str(c) for c in codes) if codes else "no err_code"
    if codes and all(c == 0 for c in codes):
        return ResponseVerdict(ex.mutant_id, VerdictClass.VALID,
                               f"tplink_err_code_zero matched: {plain[:80]}", status, req_line)
    cat = VerdictClass.MALFORMED_REJECTED if ex.structure_risk else VerdictClass.INVALID
    return ResponseVerdict(ex.mutant_id, cat, f"{status}: {plain[:80]}", status, req_line)


def _tplink_plain(wire: bytes) -> bytes:
    return tplink_decode(wire[4:]) if len(wire) >= 4 else wire


def classify(vuln: VulnerabilityDescriptor, exchange: ExchangeRecord) -> ResponseVerdict:
    """Put one exchange into exactly one verdict class."""
    ex = exchange
    if ex.outcome is not Outcome.RESPONDED or not ex.response_bytes:
        line = _request_line(vuln.protocol, ex.sent_bytes)
        return ResponseVerdict(ex.mutant_id, VerdictClass.NO_RESPONSE,
                               f"no response ({ex.outcome.value})", ex.outcome.value, line)
    if vuln.protocol is Protocol.TPLINK_SMARTHOME:
        return _classify_tplink(vuln, ex)
    line = _request_line(vuln.protocol, ex.sent_bytes)
    parse = parse_rtsp_response if vuln.protocol is Protocol.RTSP else parse_http_response
    view = parse(ex.response_bytes)
    if not view.well_formed:
        return ResponseVerdict(ex.mutant_id, VerdictClass.INVALID,
                               f"unparseable response: {_excerpt(ex.response_bytes)}", "garbled", line)
    rule = _HTTP_RULES.get(vuln.validity)
    if rule is None:
        raise RegistryError(f"{vuln.id}: rule {vuln.validity} cannot classify responses")
    ok, why, artifact = rule(vuln, ex, view)
    status = _status(view)
    if ok:
        return ResponseVerdict(ex.mutant_id, VerdictClass.VALID, f"{vuln.validity} matched: {why}",
                               status, line, artifact)
    if 400 <= view.status_code < 500 and ex.structure_risk:
        return ResponseVerdict(ex.mutant_id, VerdictClass.MALFORMED_REJECTED,
                               f"structure-risk mutant rejected: {status}", status, line)
    return ResponseVerdict(ex.mutant_id, VerdictClass.INVALID, why, status, line)


def _request_line(protocol: Protocol, wire: bytes) -> bytes:
    if protocol is Protocol.TPLINK_SMARTHOME:
        return _tplink_plain(wire)
    return wire.split(b"\n", 1)[0].rstrip(b"\r")


def assess(vuln: VulnerabilityDescriptor, verdicts: Iterable[ResponseVerdict],
           duration: float = 0.0, target: str = "") -> FuzzReport:
    verdicts = list(verdicts)
    counts = {c: 0 for c in VerdictClass}
    for v in verdicts:
        counts[v.category] += 1
    sent = len(verdicts)
    valid, invalid = counts[VerdictClass.VALID], counts[VerdictClass.INVALID]
    denom = valid + invalid
    cov_valid = percent_half_up(valid, denom)
    return FuzzReport(
        vuln_id=vuln.id,
        protocol=vuln.protocol.value,
        target=target,
        sent=sent,
        valid=valid,
        invalid=invalid,
        malformed_rejected=counts[VerdictClass.MALFORMED_REJECTED],
        no_response=counts[VerdictClass.NO_RESPONSE],
        loss_pct=100.0 * counts[VerdictClass.NO_RESPONSE] / sent if sent else 0.0,
        duration=duration,
        coverage_valid_pct=cov_valid,
        coverage_invalid_pct=percent_half_up(invalid, denom),
        verdicts=verdicts,
        vulnerable=valid >= 1,
    )


def _show(data: bytes) -> str:
    return data.decode("latin-1").encode("unicode_escape").decode("ascii")


def render_report(report: FuzzReport, verbose: bool = False) -> str:
    lines = []
    if verbose:
        noun = "commands" if report.protocol == Protocol.TPLINK_SMARTHOME.value else "URIs"
        lines.append(f"Mutated {noun} for {report.vuln_id}:")
        for v in report.verdicts:
            lines.append(f"  [{v.mutant_id:4d}] {v.status or '-':<24} {v.category.value:<18} "
                         f"{_show(v.request_line)}")
        lines.append("")
    lines += [
        f"Vulnerability: {report.vuln_id}",
        f"Protocol: {report.protocol}",
        f"Target: {report.target}",
        f"Sent: {report.sent}",
        f"Valid: {report.valid}",
        f"Invalid: {report.invalid}",
        f"MalformedRejected: {report.malformed_rejected}",
        f"NoResponse: {report.no_response}",
        f"MessageLoss%: {report.loss_pct:.2f}",
        f"Duration(s): {report.duration:.3f}",
        f"CoverageValid%: {report.coverage_valid_pct}",
        f"CoverageInvalid%: {report.coverage_invalid_pct}",
        f"Vulnerable: {'true' if report.vulnerable else 'false'}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Passive credential scan


@dataclass
class CredentialScan:
    findings: list[CredentialFinding]
    total_packets: int
    data_packets: int
    requests_scanned: int
    rejected: list[tuple[int, str]] = field(default_factory=list)

    @property
    def decoded(self) -> list[CredentialFinding]:
        return [f for f in self.findings if f.decoded]


def scan_credentials(records: Iterable[PacketRecord], total_packets: Optional[int] = None) -> CredentialScan:
    """Find every HTTP request that carries an Authorization header.

    Requests travelling away from the device are ignored; without a device
    address every request counts.
    """
    records = list(records) if not isinstance(records, list) else records
    if total_packets is None:
        total_packets = records.total if isinstance(records, Capture) else len(records)
    findings, rejected = [], []
    scanned = 0
    for msg in reassemble(records):
        if msg.protocol_guess is not Protocol.HTTP or not msg.is_request:
            continue
        if msg.direction is Direction.FROM_DEVICE:
            continue
        scanned += 1
        req = parse_http_request(msg.data)
        value = req.header("Authorization") if req.well_formed else _raw_header(msg.data, b"authorization")
        if value is None:
            continue
        try:
            findings.append(decode_basic_credential(value, msg.first_packet_index))
        except CredentialError as exc:
            scheme = value.strip().split(b" ", 1)[0].decode("latin-1")
            findings.append(CredentialFinding(scheme, value.strip()[len(scheme):].strip(),
                                              packet_index=msg.first_packet_index))
            rejected.append((msg.first_packet_index, str(exc)))
    return CredentialScan(findings, total_packets, len(records), scanned, rejected)


def _raw_header(data: bytes, name: bytes) -> Optional[bytes]:
    for line in data.split(b"\r\n\r\n", 1)[0].split(b"\n")[1:]:
        k, sep, v = line.partition(b":")
        if sep and k.strip().lower() == name:
            return v.strip()
    return None


def render_credential_report(scan: CredentialScan, verbose: bool = False, vuln_id: str = "D3D_000") -> str:
    lines = []
    if verbose:
        lines.append("Authorization headers found:")
        for f in scan.findings:
            if f.decoded:
                cred = f"{f.decoded_user}:{f.decoded_pass}"
            else:
                cred = "(not decodable)"
            lines.append(f"  packet {f.packet_index:6d}  {f.scheme:<8} {f.encoded.decode('latin-1')}  {cred}")
        lines.append("")
    lines += [
        f"Vulnerability: {vuln_id}",
        f"Packets: {scan.total_packets}",
        f"DataPackets: {scan.data_packets}",
        f"HttpRequests: {scan.requests_scanned}",
        f"Findings: {len(scan.findings)}",
        f"BasicDecoded: {len(scan.decoded)}",
        f"Vulnerable: {'true' if scan.findings else 'false'}",
    ]
    return "\n".join(lines) + "\n"


__all__ = [
    "CredentialScan", "FuzzReport", "Registry", "ResponseVerdict", "VerdictClass",
    "VulnerabilityDescriptor", "assess", "classify", "load_registry", "percent_half_up",
    "render_credential_report", "render_report", "scan_credentials",
]
