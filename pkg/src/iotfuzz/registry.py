"""Vulnerability descriptors and mutation dictionaries.

Both live in one plain-text registry file. Entries are blocks of ``key: value``
lines separated by a line holding a single ``-``. A key may repeat; repeated
keys accumulate into a list. Lines starting with ``#`` are comments.

A block with a ``dictionary`` key declares a mutation dictionary; any other
block must carry an ``id`` and declares a vulnerability.
"""

from __future__ import annotations

import base64
import re
from dataclasses import dataclass, field
from importlib import resources
from os import PathLike
from pathlib import Path
from typing import Iterator, Optional

from iotfuzz import Protocol

VALIDITY_RULES = (
    "basic_credential",
    "http_200_set_ok",
    "http_200_image_jpeg",
    "rtsp_200_same_cseq",
    "tplink_err_code_zero",
)
EXPLOIT_CHECKS = (
    "decode_credential",
    "command_executed",
    "save_jpeg",
    "stream_url",
    "relay_switched",
)

HTTP_FIELDS = (
    "method", "sp_left", "request_uri", "uri_scheme", "uri_netloc_port", "uri_path",
    "uri_query", "sp_right", "version", "crlf",
)
FIELD_NAMES = HTTP_FIELDS + ("cseq", "frame_length", "frame_command")
_HEADER_FIELD = re.compile(r"header\(([^()\s:]+)\)")

# Fields whose mutation can break the message grammar itself.
STRUCTURE_RISK = {
    Protocol.HTTP: frozenset({"sp_left", "sp_right", "crlf", "version", "uri_scheme"}),
    Protocol.RTSP: frozenset({"sp_left", "sp_right", "crlf", "version", "uri_scheme"}),
    Protocol.TPLINK_SMARTHOME: frozenset({"frame_length"}),
}

_DESCRIPTOR_KEYS = {
    "id", "protocol", "mode", "port", "description", "mutable", "fixed_header",
    "campaign_size", "validity", "exploit", "response_match", "seeds", "uri_match",
    "method", "max_ops", "op_p", "structure_budget", "mutate_length", "dict",
}


class RegistryError(ValueError):
    """A registry entry that cannot be loaded."""


def is_field_name(name: str) -> bool:
    return name in FIELD_NAMES or bool(_HEADER_FIELD.fullmatch(name))


@dataclass(frozen=True)
class Dictionaries:
    http_methods: tuple[bytes, ...] = ()
    rtsp_methods: tuple[bytes, ...] = ()
    http_schemes: tuple[bytes, ...] = ()
    rtsp_schemes: tuple[bytes, ...] = ()
    http_versions: tuple[bytes, ...] = ()
    rtsp_versions: tuple[bytes, ...] = ()
    tplink_commands: tuple[bytes, ...] = ()  # cipher bytes, length prefix stripped

    def for_field(self, protocol: Protocol, name: str) -> tuple[bytes, ...]:
        key = {
            (Protocol.HTTP, "method"): "http_methods",
            (Protocol.RTSP, "method"): "rtsp_methods",
            (Protocol.HTTP, "uri_scheme"): "http_schemes",
            (Protocol.RTSP, "uri_scheme"): "rtsp_schemes",
            (Protocol.HTTP, "version"): "http_versions",
            (Protocol.RTSP, "version"): "rtsp_versions",
            (Protocol.TPLINK_SMARTHOME, "frame_command"): "tplink_commands",
        }.get((protocol, name))
        return getattr(self, key) if key else ()


@dataclass(frozen=True)
class VulnerabilityDescriptor:
    id: str
    protocol: Protocol
    mode: str = "active"
    port: int = 0
    description: str = ""
    mutable_fields: tuple[str, ...] = ()
    fixed_headers: tuple[str, ...] = ()
    campaign_size: int = 200
    validity: str = "http_200_set_ok"
    exploit: str = "command_executed"
    response_match: Optional[str] = None
    seeds: Optional[str] = None  # corpus file, relative to the registry file
    uri_match: Optional[str] = None
    method: Optional[bytes] = None
    max_ops: int = 3
    op_p: float = 0.5
    structure_budget: float = 0.2
    mutate_length: bool = False
    extra_dicts: dict = field(default_factory=dict, compare=False, hash=False)
    source_dir: Optional[str] = field(default=None, compare=False)

    @property
    def passive(self) -> bool:
        return self.mode == "passive"

    @property
    def structure_risk_fields(self) -> frozenset[str]:
        risky = STRUCTURE_RISK.get(self.protocol, frozenset())
        if self.protocol is Protocol.TPLINK_SMARTHOME and not self.mutate_length:
            return frozenset()
        return frozenset(f for f in self.mutable_fields if f in risky)

    def seeds_path(self) -> Optional[Path]:
        if not self.seeds:
            return None
        p = Path(self.seeds)
        if not p.is_absolute() and self.source_dir:
            p = Path(self.source_dir) / p
        return p


@dataclass
class Registry:
    descriptors: dict[str, VulnerabilityDescriptor]
    dictionaries: Dictionaries

    def __iter__(self) -> Iterator[VulnerabilityDescriptor]:
        return iter(self.descriptors.values())

    def __len__(self) -> int:
        return len(self.descriptors)

    def __getitem__(self, vuln_id: str) -> VulnerabilityDescriptor:
        return self.descriptors[vuln_id]

    def __contains__(self, vuln_id: object) -> bool:
        return vuln_id in self.descriptors

    def get(self, vuln_id: str) -> Optional[VulnerabilityDescriptor]:
        return self.descriptors.get(vuln_id)


def parse_blocks(text: str) -> list[tuple[int, dict[str, list[str]]]]:
    """Split registry text into (first line number, key -> values) blocks."""
    blocks = []
    current: dict[str, list[str]] = {}
    start = 1
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "-":
            if current:
                blocks.append((start, current))
            current, start = {}, lineno + 1
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise RegistryError(f"line {lineno}: expected 'key: value', got {raw!r}")
        if not current:
            start = lineno
        current.setdefault(key.strip(), []).append(value.strip())
    if current:
        blocks.append((start, current))
    return blocks


def _one(block, key, where, default=None, required=False):
    vals = block.get(key)
    if not vals:
        if required:
            raise RegistryError(f"{where}: missing '{key}'")
        return default
    if len(vals) > 1:
        raise RegistryError(f"{where}: '{key}' given {len(vals)} times")
    return vals[0]


def _split_list(values: Optional[list[str]]) -> tuple[str, ...]:
    out: list[str] = []
    for v in values or ():
        out.extend(p.strip() for p in v.split(",") if p.strip())
    return tuple(out)


def _descriptor(block, lineno: int, source_dir: Optional[str]) -> VulnerabilityDescriptor:
    vid = _one(block, "id", f"entry at line {lineno}", required=True)
    where = f"entry {vid} (line {lineno})"
    unknown = set(block) - _DESCRIPTOR_KEYS
    if unknown:
        raise RegistryError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        protocol = Protocol.parse(_one(block, "protocol", where, required=True))
        mode = _one(block, "mode", where, "active")
        if mode not in ("active", "passive"):
            raise RegistryError(f"{where}: mode must be active or passive, got {mode!r}")
        mutable = _split_list(block.get("mutable"))
        for name in mutable:
            if not is_field_name(name):
                raise RegistryError(f"{where}: unknown field {name!r}")
        if mode == "passive" and mutable:
            raise RegistryError(f"{where}: passive entries cannot mutate fields")
        validity = _one(block, "validity", where, required=True)
        if validity not in VALIDITY_RULES:
            raise RegistryError(f"{where}: unknown validity rule {validity!r}")
        exploit = _one(block, "exploit", where, required=True)
        if exploit not in EXPLOIT_CHECKS:
            raise RegistryError(f"{where}: unknown exploit check {exploit!r}")
        extra: dict[str, tuple[bytes, ...]] = {}
        for spec in block.get("dict", ()):
            fname, sep, value = spec.partition("=")
            fname = fname.strip()
            if not sep or not is_field_name(fname):
                raise RegistryError(f"{where}: dict entries look like 'field = value', got {spec!r}")
            extra[fname] = extra.get(fname, ()) + (value.strip().encode("latin-1"),)
        method = _one(block, "method", where)
        uri_match = _one(block, "uri_match", where)
        if uri_match:
            re.compile(uri_match)
        budget = float(_one(block, "structure_budget", where, "0.2"))
        if not 0.0 <= budget <= 1.0:
            raise RegistryError(f"{where}: structure_budget must lie in [0, 1]")
        return VulnerabilityDescriptor(
            id=vid,
            protocol=protocol,
            mode=mode,
            port=int(_one(block, "port", where, "0")),
            description=_one(block, "description", where, ""),
            mutable_fields=mutable,
            fixed_headers=_split_list(block.get("fixed_header")),
            campaign_size=int(_one(block, "campaign_size", where, "200")),
            validity=validity,
            exploit=exploit,
            response_match=_one(block, "response_match", where),
            seeds=_one(block, "seeds", where),
            uri_match=uri_match,
            method=method.encode("latin-1") if method else None,
            max_ops=int(_one(block, "max_ops", where, "3")),
            op_p=float(_one(block, "op_p", where, "0.5")),
            structure_budget=budget,
            mutate_length=_one(block, "mutate_length", where, "false").lower() in ("1", "true", "yes"),
            extra_dicts=extra,
            source_dir=source_dir,
        )
    except RegistryError:
        raise
    except (ValueError, re.error) as exc:
        raise RegistryError(f"{where}: {exc}") from None


def _dictionary_values(name: str, values: list[str]) -> tuple[bytes, ...]:
    if name == "tplink_commands":
        out = []
        for v in values:
            frame = base64.b64decode(v, validate=True)
            if int.from_bytes(frame[:4], "big") != len(frame) - 4:
                raise RegistryError(f"dictionary tplink_commands: bad length prefix in {v!r}")
            out.append(frame[4:])
        return tuple(out)
    return tuple(v.encode("latin-1") for v in values)


def parse_registry(text: str, source_dir: Optional[str] = None,
                   base: Optional[Registry] = None) -> Registry:
    descriptors = dict(base.descriptors) if base else {}
    dicts = {} if base is None else {k: getattr(base.dictionaries, k)
                                     for k in Dictionaries.__dataclass_fields__}
    for lineno, block in parse_blocks(text):
        if "dictionary" in block:
            name = _one(block, "dictionary", f"dictionary at line {lineno}")
            if name not in Dictionaries.__dataclass_fields__:
                raise RegistryError(f"dictionary at line {lineno}: unknown dictionary {name!r}")
            try:
                dicts[name] = _dictionary_values(name, block.get("value", []))
            except ValueError as exc:
                raise RegistryError(f"dictionary {name} (line {lineno}): {exc}") from None
            continue
        desc = _descriptor(block, lineno, source_dir)
        if desc.id in descriptors:
            raise RegistryError(f"entry {desc.id} (line {lineno}): duplicate id")
        descriptors[desc.id] = desc
    return Registry(descriptors, Dictionaries(**dicts))


def builtin_registry_text() -> str:
    return resources.files("iotfuzz").joinpath("data/registry.txt").read_text()


def builtin_data_dir() -> str:
    return str(resources.files("iotfuzz").joinpath("data"))


def load_registry(path: str | PathLike | None = None, include_builtin: bool = True) -> Registry:
    """Load the built-in registry, extended by the entries in ``path``."""
    base = parse_registry(builtin_registry_text(), builtin_data_dir()) if include_builtin else None
    if path is None:
        if base is None:
            raise RegistryError("no registry to load")
        return base
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise RegistryError(f"cannot read registry {p}: {exc}") from exc
    return parse_registry(text, str(p.parent), base)
