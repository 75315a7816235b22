"""Field-level seed mining from reassembled request messages."""

from __future__ import annotations

import base64
import warnings
from dataclasses import dataclass, field
from os import PathLike
from pathlib import Path
from typing import Iterable, Optional

from iotfuzz import Protocol
from iotfuzz.capture import Direction, FlowMessage
from iotfuzz.codecs import (
    HttpRequestTemplate,
    RtspRequestTemplate,
    TplinkRequestTemplate,
    parse_http_request,
    parse_rtsp_request,
)
from iotfuzz.registry import is_field_name


class SeedWarning(UserWarning):
    """A message that yielded no seeds."""


@dataclass(frozen=True)
class FieldId:
    protocol: Protocol
    name: str

    def __post_init__(self):
        if not is_field_name(self.name):
            raise ValueError(f"unknown field name {self.name!r}")

    @property
    def header(self) -> Optional[str]:
        return self.name[7:-1] if self.name.startswith("header(") else None

    def __str__(self) -> str:
        return f"{self.protocol.value}:{self.name}"


@dataclass(frozen=True)
class FieldSeed:
    field: FieldId
    value: bytes
    source: tuple[str, int] = ("", -1)


@dataclass
class SeedCorpus:
    """Seeds keyed by field, deduplicated on (field, value), first occurrence wins."""

    device_label: str = ""
    entries: dict[FieldId, list[FieldSeed]] = field(default_factory=dict)

    def add(self, seed: FieldSeed) -> bool:
        bucket = self.entries.setdefault(seed.field, [])
        if any(s.value == seed.value for s in bucket):
            return False
        bucket.append(seed)
        return True

    def seeds(self, fid: FieldId) -> list[FieldSeed]:
        return list(self.entries.get(fid, ()))

    def values(self, fid: FieldId) -> list[bytes]:
        return [s.value for s in self.entries.get(fid, ())]

    def first(self, fid: FieldId) -> Optional[bytes]:
        bucket = self.entries.get(fid)
        return bucket[0].value if bucket else None

    def fields(self, protocol: Optional[Protocol] = None) -> list[FieldId]:
        return [f for f in self.entries if protocol is None or f.protocol is protocol]

    def __len__(self) -> int:
        return sum(len(b) for b in self.entries.values())

    def __iter__(self):
        for bucket in self.entries.values():
            yield from bucket

    def dump(self, path: str | PathLike) -> None:
        Path(path).write_text(dumps_corpus(self))

    @classmethod
    def load(cls, path: str | PathLike) -> "SeedCorpus":
        return loads_corpus(Path(path).read_text(), str(path))


def dumps_corpus(corpus: SeedCorpus) -> str:
    lines = [f"# device: {corpus.device_label}"] if corpus.device_label else []
    for seed in corpus:
        b64 = base64.b64encode(seed.value).decode("ascii")
        lines.append(f"{seed.field.protocol.value}\t{seed.field.name}\t{b64}")
    return "\n".join(lines) + "\n"


def loads_corpus(text: str, source: str = "") -> SeedCorpus:
    corpus = SeedCorpus()
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("# device:"):
            corpus.device_label = line.split(":", 1)[1].strip()
            continue
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{source}:{lineno}: expected 3 tab-separated columns")
        proto, name, b64 = parts
        try:
            value = base64.b64decode(b64, validate=True)
            fid = FieldId(Protocol.parse(proto), name)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
        corpus.add(FieldSeed(fid, value, (source, lineno)))
    return corpus


# ---------------------------------------------------------------------------
# Extraction


def _request_seeds(tpl: HttpRequestTemplate, protocol: Protocol, source) -> list[FieldSeed]:
    names = tpl.fields()
    seeds = []
    for name in names:
        seeds.append(FieldSeed(FieldId(protocol, name), tpl.get_field(name), source))
        if name == "sp_left":
            seeds.append(FieldSeed(FieldId(protocol, "request_uri"), tpl.request_uri, source))
    return seeds


def extract_http_seeds(msg: FlowMessage, capture_path: str = "") -> list[FieldSeed]:
    """One seed per grammar field of an HTTP request, plus one per header."""
    tpl = parse_http_request(msg.data)
    if not tpl.well_formed:
        warnings.warn(SeedWarning(
            f"packet {msg.first_packet_index}: malformed HTTP request line"), stacklevel=2)
        return []
    return _request_seeds(tpl, Protocol.HTTP, (capture_path, msg.first_packet_index))


def extract_rtsp_seeds(msg: FlowMessage, capture_path: str = "") -> list[FieldSeed]:
    tpl = parse_rtsp_request(msg.data)
    if not tpl.well_formed:
        warnings.warn(SeedWarning(
            f"packet {msg.first_packet_index}: malformed RTSP request line"), stacklevel=2)
        return []
    return _request_seeds(tpl, Protocol.RTSP, (capture_path, msg.first_packet_index))


def extract_tplink_seeds(msg: FlowMessage, capture_path: str = "") -> list[FieldSeed]:
    data = msg.data
    where = f"packet {msg.first_packet_index}"
    if len(data) < 4:
        warnings.warn(SeedWarning(f"{where}: SmartHome frame shorter than its prefix"), stacklevel=2)
        return []
    length = int.from_bytes(data[:4], "big")
    if length != len(data) - 4:
        warnings.warn(SeedWarning(
            f"{where}: length prefix {length} but {len(data) - 4} body bytes"), stacklevel=2)
        return []
    if length == 0:
        warnings.warn(SeedWarning(f"{where}: zero-length SmartHome frame"), stacklevel=2)
        return []
    source = (capture_path, msg.first_packet_index)
    proto = Protocol.TPLINK_SMARTHOME
    return [
        FieldSeed(FieldId(proto, "frame_length"), data[:4], source),
        FieldSeed(FieldId(proto, "frame_command"), data[4:], source),
    ]


def _wants(msg: FlowMessage) -> bool:
    if msg.direction is Direction.FROM_DEVICE:
        return False
    if msg.protocol_guess is Protocol.TPLINK_SMARTHOME:
        # Without a device address, requests are the frames sent to port 9999.
        return msg.direction is Direction.TO_DEVICE or msg.flow_id[3] == 9999
    return msg.is_request


def build_corpus(msgs: Iterable[FlowMessage], device_label: str = "",
                 capture_path: str = "") -> SeedCorpus:
    corpus = SeedCorpus(device_label)
    for msg in msgs:
        if not _wants(msg):
            continue
        if msg.protocol_guess is Protocol.HTTP:
            seeds = extract_http_seeds(msg, capture_path)
        elif msg.protocol_guess is Protocol.RTSP:
            seeds = extract_rtsp_seeds(msg, capture_path)
        elif msg.protocol_guess is Protocol.TPLINK_SMARTHOME:
            seeds = extract_tplink_seeds(msg, capture_path)
        else:
            continue
        for seed in seeds:
            corpus.add(seed)
    return corpus


def template_from_seeds(seeds: list[FieldSeed]):
    """Rebuild a request from the seeds of one message, in their wire order."""
    if not seeds:
        raise ValueError("no seeds")
    protocol = seeds[0].field.protocol
    if protocol is Protocol.TPLINK_SMARTHOME:
        tpl = TplinkRequestTemplate()
        for s in seeds:
            tpl.set_field(s.field.name, s.value)
        if tpl.length == len(tpl.command):
            tpl.length = None
        return tpl
    cls = RtspRequestTemplate if protocol is Protocol.RTSP else HttpRequestTemplate
    tpl = cls(uri_path=b"")
    for s in seeds:
        if s.field.name == "request_uri":
            continue
        tpl.set_field(s.field.name, s.value)
    return tpl
