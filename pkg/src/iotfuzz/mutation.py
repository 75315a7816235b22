"""Lexical mutation of request fields and campaign generation.

Randomness comes from :class:`random.Random` (MT19937) seeded with the
campaign's 64-bit ``rng_seed``; every draw happens in a fixed order on that one
stream, so a campaign is a pure function of (corpus, descriptor, n, rng_seed).
"""

from __future__ import annotations

import random
import re
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from iotfuzz import Protocol
from iotfuzz.codecs import (
    HeaderLine,
    HttpRequestTemplate,
    RtspRequestTemplate,
    TplinkRequestTemplate,
    tplink_decode,
    tplink_encode,
)
from iotfuzz.registry import Dictionaries, VulnerabilityDescriptor, load_registry
from iotfuzz.seeds import FieldId, FieldSeed, SeedCorpus

RequestTemplate = Union[HttpRequestTemplate, RtspRequestTemplate, TplinkRequestTemplate]

_PRINTABLE = bytes(range(0x21, 0x7F))
_DIGITS = frozenset(b"0123456789")
_LETTERS = frozenset(string.ascii_letters.encode())
_URI_FIELDS = frozenset({"request_uri", "uri_scheme", "uri_netloc_port", "uri_path", "uri_query"})


class MutationKind(str, Enum):
    DICTIONARY_SUBSTITUTE = "dictionary_substitute"
    CHAR_INSERT = "char_insert"
    CHAR_DELETE = "char_delete"
    CHAR_SUBSTITUTE = "char_substitute"
    CHAR_SWAP = "char_swap"
    DIGIT_PERTURB = "digit_perturb"
    CASE_FLIP = "case_flip"


class MutationNotApplicable(ValueError):
    """The operator cannot act on this value (e.g. deleting from a 1-byte field)."""


class CampaignError(RuntimeError):
    """A campaign could not be generated as requested."""

    def __init__(self, message: str, achieved: int = 0):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True)
class MutationOp:
    kind: MutationKind
    target: FieldId
    detail: dict = field(default_factory=dict, hash=False)

    def describe(self) -> str:
        parts = ", ".join(f"{k}={v!r}" for k, v in sorted(self.detail.items()))
        return f"{self.kind.value}({self.target.name}{': ' + parts if parts else ''})"


@dataclass(frozen=True)
class MutantRequest:
    template: RequestTemplate
    applied: tuple[MutationOp, ...]
    mutant_id: int
    structure_risk: bool = False
    wire: bytes = b""

    def serialize(self) -> bytes:
        return self.wire or serialize(self.template)


def serialize(t: RequestTemplate) -> bytes:
    return t.serialize()


def field_alphabet(name: str) -> bytes:
    """Bytes a character operator may write into ``name``.

    Only the structure fields (SP runs, the line terminator) may receive
    whitespace or CR/LF; URI parts exclude the delimiters that would move a
    field boundary.
    """
    if name in ("sp_left", "sp_right"):
        return b" \t" + _PRINTABLE
    if name == "crlf":
        return b"\r\n" + _PRINTABLE
    if name.startswith("header(") or name == "frame_command":
        return b" " + _PRINTABLE
    forbidden = {"uri_path": b"?", "uri_netloc_port": b"/?"}.get(name, b"")
    return bytes(c for c in _PRINTABLE if c not in forbidden)


def _dictionary(target: FieldId, dictionaries: Optional[Dictionaries], extra: dict) -> tuple[bytes, ...]:
    values = tuple(extra.get(target.name, ()))
    if dictionaries is not None:
        values = dictionaries.for_field(target.protocol, target.name) + values
    return values


def applicable_kinds(value: bytes, target: FieldId, dictionary: tuple[bytes, ...] = ()) -> list[MutationKind]:
    if target.name == "frame_length":
        return [MutationKind.DIGIT_PERTURB]
    if target.name == "frame_command":
        value = tplink_decode(value)
    kinds = []
    if any(d != value for d in dictionary):
        kinds.append(MutationKind.DICTIONARY_SUBSTITUTE)
    kinds.append(MutationKind.CHAR_INSERT)
    if len(value) >= 2:
        kinds.append(MutationKind.CHAR_DELETE)
    if value:
        kinds.append(MutationKind.CHAR_SUBSTITUTE)
    if any(value[i] != value[i + 1] for i in range(len(value) - 1)):
        kinds.append(MutationKind.CHAR_SWAP)
    if any(c in _DIGITS for c in value):
        kinds.append(MutationKind.DIGIT_PERTURB)
    if any(c in _LETTERS for c in value):
        kinds.append(MutationKind.CASE_FLIP)
    return kinds


def apply_op(value: bytes, op: MutationOp, rng: Optional[random.Random] = None,
             dictionary: tuple[bytes, ...] = ()) -> tuple[bytes, MutationOp]:
    """Apply ``op`` to ``value``; unset details are drawn from ``rng``.

    Returns the new value and the op with every detail filled in, so that
    replaying the returned op without an rng gives the same result.
    """
    rng = rng or random.Random(0)
    name = op.target.name
    if name == "frame_length":
        return _perturb_length(value, op, rng)
    if name == "frame_command" and op.kind is not MutationKind.DICTIONARY_SUBSTITUTE:
        plain, resolved = _apply_chars(tplink_decode(value), op, rng, field_alphabet(name))
        return tplink_encode(plain), resolved
    if op.kind is MutationKind.DICTIONARY_SUBSTITUTE:
        choices = [d for d in dictionary if d != value]
        if not choices:
            raise MutationNotApplicable(f"no dictionary alternative for {name}")
        idx = op.detail.get("index")
        if idx is None:
            pick = rng.choice(choices)
            idx = dictionary.index(pick)
        elif not 0 <= idx < len(dictionary):
            raise MutationNotApplicable(f"dictionary index {idx} out of range")
        return dictionary[idx], MutationOp(op.kind, op.target, {"index": idx})
    return _apply_chars(value, op, rng, field_alphabet(name))


def _apply_chars(value: bytes, op: MutationOp, rng: random.Random, alphabet: bytes):
    d = dict(op.detail)
    kind = op.kind
    buf = bytearray(value)
    if kind is MutationKind.CHAR_INSERT:
        pos = d.setdefault("position", rng.randrange(len(buf) + 1))
        ch = d.setdefault("char", chr(rng.choice(alphabet)))
        if pos > len(buf):
            raise MutationNotApplicable("insert position past end")
        buf[pos:pos] = ch.encode("latin-1")
    elif kind is MutationKind.CHAR_DELETE:
        if len(buf) < 2:
            raise MutationNotApplicable("deletion would empty the field")
        pos = d.setdefault("position", rng.randrange(len(buf)))
        del buf[pos]
    elif kind is MutationKind.CHAR_SUBSTITUTE:
        if not buf:
            raise MutationNotApplicable("nothing to substitute")
        pos = d.setdefault("position", rng.randrange(len(buf)))
        if "char" not in d:
            options = [c for c in alphabet if c != buf[pos]]
            d["char"] = chr(rng.choice(options))
        buf[pos] = ord(d["char"])
    elif kind is MutationKind.CHAR_SWAP:
        spots = [i for i in range(len(buf) - 1) if buf[i] != buf[i + 1]]
        if not spots:
            raise MutationNotApplicable("no adjacent pair to swap")
        pos = d.setdefault("position", rng.choice(spots))
        buf[pos], buf[pos + 1] = buf[pos + 1], buf[pos]
    elif kind is MutationKind.DIGIT_PERTURB:
        spots = [i for i, c in enumerate(buf) if c in _DIGITS]
        if not spots:
            raise MutationNotApplicable("no decimal digit")
        pos = d.setdefault("position", rng.choice(spots))
        if buf[pos] not in _DIGITS:
            raise MutationNotApplicable("position is not a digit")
        if "char" not in d:
            d["char"] = chr(rng.choice([c for c in b"0123456789" if c != buf[pos]]))
        buf[pos] = ord(d["char"])
    elif kind is MutationKind.CASE_FLIP:
        spots = [i for i, c in enumerate(buf) if c in _LETTERS]
        if not spots:
            raise MutationNotApplicable("no letter to flip")
        pos = d.setdefault("position", rng.choice(spots))
        buf[pos:pos + 1] = bytes(buf[pos:pos + 1]).swapcase()
    else:
        raise MutationNotApplicable(f"{kind} is not a character operator")
    out = bytes(buf)
    if op.target.name != "crlf" and any(c in out for c in b"\r\n\x00"):
        raise MutationNotApplicable("operator would put CR/LF/NUL into a non-terminator field")
    return out, MutationOp(kind, op.target, d)


def _perturb_length(value: bytes, op: MutationOp, rng: random.Random):
    if op.kind is not MutationKind.DIGIT_PERTURB:
        raise MutationNotApplicable("frame_length only supports digit_perturb")
    n = int.from_bytes(value, "big")
    delta = op.detail.get("delta")
    if delta is None:
        delta = rng.choice([-4, -3, -2, -1, 1, 2, 3, 4])
    if n + delta < 0:
        raise MutationNotApplicable("length would go negative")
    return (n + delta).to_bytes(4, "big"), MutationOp(op.kind, op.target, {"delta": delta})


def mutate_field(seed: FieldSeed, op: MutationOp, rng: Optional[random.Random] = None,
                 dictionaries: Optional[Dictionaries] = None, extra_dicts: Optional[dict] = None) -> bytes:
    if op.target != seed.field:
        raise ValueError(f"op targets {op.target} but seed is {seed.field}")
    dictionary = _dictionary(op.target, dictionaries, extra_dicts or {})
    value, _ = apply_op(seed.value, op, rng, dictionary)
    return value


# ---------------------------------------------------------------------------
# Campaigns


class _BaseBuilder:
    """Assembles unmutated requests from a corpus for one descriptor."""

    def __init__(self, corpus: SeedCorpus, vuln: VulnerabilityDescriptor):
        self.vuln = vuln
        self.proto = vuln.protocol
        fid = lambda name: FieldId(self.proto, name)  # noqa: E731
        self.fid = fid
        missing = []
        if self.proto is Protocol.TPLINK_SMARTHOME:
            self.commands = corpus.values(fid("frame_command"))
            if not self.commands:
                missing.append("frame_command")
        else:
            uris = corpus.values(fid("request_uri"))
            if vuln.uri_match:
                pat = re.compile(vuln.uri_match.encode("latin-1"))
                uris = [u for u in uris if pat.search(u)]
            self.uris = uris
            if not uris:
                missing.append("request_uri" + (f" matching {vuln.uri_match!r}" if vuln.uri_match else ""))
            self.methods = [vuln.method] if vuln.method else corpus.values(fid("method"))
            if not self.methods:
                missing.append("method")
            self.versions = corpus.values(fid("version"))
            if not self.versions:
                missing.append("version")
            self.sp_left = corpus.first(fid("sp_left")) or b" "
            self.sp_right = corpus.first(fid("sp_right")) or b" "
            self.crlf = corpus.first(fid("crlf")) or b"\r\n"
            self.cseqs = corpus.values(fid("cseq")) or [b"1"]
            self.headers: list[tuple[bytes, list[bytes]]] = []
            for f in corpus.fields(self.proto):
                if f.header is not None:
                    self.headers.append((f.header.encode("latin-1"), corpus.values(f)))
            have = {h.lower() for h, _ in self.headers}
            for h in vuln.fixed_headers:
                if h.lower().encode("latin-1") not in have:
                    missing.append(f"header({h})")
        for name in vuln.mutable_fields:
            if name.startswith("header(") and name.lower()[7:-1].encode() not in {
                    h.lower() for h, _ in getattr(self, "headers", [])}:
                missing.append(name)
        if missing:
            raise CampaignError(f"{vuln.id}: corpus lacks seeds for {', '.join(missing)}")

    def build(self, rng: random.Random) -> RequestTemplate:
        mutable = set(self.vuln.mutable_fields)
        pick = lambda values, name: rng.choice(values) if name in mutable else values[0]  # noqa: E731
        if self.proto is Protocol.TPLINK_SMARTHOME:
            return TplinkRequestTemplate(command=rng.choice(self.commands))
        cls = RtspRequestTemplate if self.proto is Protocol.RTSP else HttpRequestTemplate
        tpl = cls(
            method=pick(self.methods, "method"), sp_left=self.sp_left, sp_right=self.sp_right,
            version=pick(self.versions, "version"), crlf=self.crlf,
        )
        tpl.request_uri = rng.choice(self.uris)
        for name, values in self.headers:
            fixed = name.decode("latin-1").lower() in {h.lower() for h in self.vuln.fixed_headers}
            hname = f"header({name.decode('latin-1')})"
            value = values[0] if fixed else pick(values, hname)
            tpl.headers.append(HeaderLine(name, value))
        if isinstance(tpl, RtspRequestTemplate) and tpl.cseq is None:
            tpl.cseq = pick(self.cseqs, "cseq")
        return tpl


def _geometric(rng: random.Random, p: float, cap: int) -> int:
    k = 1
    while k < cap and rng.random() < p:
        k += 1
    return k


def generate_campaign(corpus: SeedCorpus, vuln: VulnerabilityDescriptor, n: int, rng_seed: int,
                      dictionaries: Optional[Dictionaries] = None,
                      identity: bool = False) -> list[MutantRequest]:
    """Generate ``n`` distinct mutants for ``vuln``.

    With ``identity=True`` mutant 0 is the unmutated base request. At most
    ``floor(structure_budget * n)`` mutants touch structure-risk fields.
    Raises :class:`CampaignError` if seeds are missing or if 10*n attempts do
    not yield n distinct mutants.
    """
    if n < 1:
        raise ValueError("campaign size must be >= 1")
    if not 0 <= rng_seed < 2**64:
        raise ValueError("rng_seed must be an unsigned 64-bit integer")
    if vuln.passive:
        raise CampaignError(f"{vuln.id} is passive; nothing to mutate")
    if dictionaries is None:
        dictionaries = load_registry().dictionaries
    builder = _BaseBuilder(corpus, vuln)
    rng = random.Random(rng_seed)
    risk_fields = vuln.structure_risk_fields
    risk_cap = int(vuln.structure_budget * n)
    risk_used = 0
    seen: set[bytes] = set()
    out: list[MutantRequest] = []

    if identity:
        base = builder.build(rng)
        wire = base.serialize()
        seen.add(wire)
        out.append(MutantRequest(base, (), 0, False, wire))
    if not vuln.mutable_fields and len(out) < n:
        raise CampaignError(f"{vuln.id}: no mutable fields", achieved=len(out))

    attempts = 0
    while len(out) < n:
        if attempts >= 10 * n:
            raise CampaignError(
                f"{vuln.id}: only {len(out)} distinct mutants after {attempts} attempts",
                achieved=len(out))
        attempts += 1
        tpl = builder.build(rng)
        base_wire = tpl.serialize()
        allowed = [f for f in vuln.mutable_fields
                   if f not in risk_fields or risk_used < risk_cap]
        applied = []
        touched_risk = False
        for _ in range(_geometric(rng, vuln.op_p, vuln.max_ops)):
            present = set(tpl.fields()) | ({"request_uri"} if hasattr(tpl, "request_uri") else set())
            targets = [f for f in allowed if f in present or f == "frame_length"]
            if not targets:
                break
            name = rng.choice(targets)
            if name == "frame_length" and not vuln.mutate_length:
                continue
            target = FieldId(vuln.protocol, name)
            value = tpl.get_field(name)
            dictionary = _dictionary(target, dictionaries, vuln.extra_dicts)
            kinds = applicable_kinds(value, target, dictionary)
            kind = rng.choice(kinds)
            try:
                new, op = apply_op(value, MutationOp(kind, target), rng, dictionary)
            except MutationNotApplicable:
                continue
            tpl.set_field(name, new)
            applied.append(op)
            touched_risk |= name in risk_fields
        if not applied:
            continue
        wire = tpl.serialize()
        if wire == base_wire or wire in seen:
            continue
        seen.add(wire)
        risk_used += touched_risk
        out.append(MutantRequest(tpl, tuple(applied), len(out) + (0 if identity else 1),
                                 touched_risk, wire))
    return out
