import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import PTZ_REQUEST, SWITCH_OFF
from iotfuzz import Protocol
from iotfuzz.codecs import parse_http_request, parse_request, parse_tplink_request, tplink_decode
from iotfuzz.mutation import (
    CampaignError,
    MutationKind,
    MutationNotApplicable,
    MutationOp,
    applicable_kinds,
    apply_op,
    field_alphabet,
    generate_campaign,
    mutate_field,
    serialize,
)
from iotfuzz.registry import load_registry, parse_registry
from iotfuzz.seeds import FieldId, FieldSeed, SeedCorpus

REG = load_registry()
HTTP_PATH = FieldId(Protocol.HTTP, "uri_path")


def corpus_for(vuln_id):
    return SeedCorpus.load(REG[vuln_id].seeds_path())


def op(kind, fid=HTTP_PATH, **detail):
    return MutationOp(kind, fid, detail)


class TestOperators:
    def test_ptz_mutant_reachable(self):
        v, _ = apply_op(b"/web/cgi-bin/hi3510/ptzctrl.cgi", op(MutationKind.CHAR_INSERT, position=4, char="A"))
        v, _ = apply_op(v, op(MutationKind.CHAR_INSERT, position=10, char="("))
        assert v == b"/webA/cgi-(bin/hi3510/ptzctrl.cgi"

    def test_image_mutant_reachable(self):
        v, _ = apply_op(b"/tmpfs/auto.jpg", op(MutationKind.CHAR_INSERT, position=2, char="V"))
        v, _ = apply_op(v, op(MutationKind.CHAR_DELETE, position=5))
        v, _ = apply_op(v, op(MutationKind.CHAR_DELETE, position=5))
        assert v == b"/tVmp/auto.jpg"

    def test_stream_index_reachable(self):
        v, _ = apply_op(b"/0", op(MutationKind.DIGIT_PERTURB, position=1, char="1"))
        assert v == b"/1"

    def test_resolved_op_replays(self):
        rng = random.Random(3)
        v1, resolved = apply_op(b"/tmpfs/auto.jpg", op(MutationKind.CHAR_SUBSTITUTE), rng)
        v2, _ = apply_op(b"/tmpfs/auto.jpg", resolved)
        assert v1 == v2 != b"/tmpfs/auto.jpg"

    def test_method_substitute_stays_in_dictionary(self):
        fid = FieldId(Protocol.HTTP, "method")
        seed = FieldSeed(fid, b"GET")
        out = mutate_field(seed, MutationOp(MutationKind.DICTIONARY_SUBSTITUTE, fid), random.Random(1),
                           REG.dictionaries)
        assert out in REG.dictionaries.http_methods and out != b"GET"

    def test_mutate_field_target_mismatch(self):
        with pytest.raises(ValueError):
            mutate_field(FieldSeed(HTTP_PATH, b"/"), op(MutationKind.CHAR_INSERT, FieldId(Protocol.HTTP, "method")))

    @pytest.mark.parametrize("kind,value", [
        (MutationKind.CHAR_DELETE, b"/"),
        (MutationKind.CHAR_SUBSTITUTE, b""),
        (MutationKind.DIGIT_PERTURB, b"/abc"),
        (MutationKind.CASE_FLIP, b"/123"),
        (MutationKind.CHAR_SWAP, b"aa"),
        (MutationKind.DICTIONARY_SUBSTITUTE, b"/x"),
    ])
    def test_inapplicable(self, kind, value):
        with pytest.raises(MutationNotApplicable):
            apply_op(value, op(kind))

    def test_applicable_kinds(self):
        assert applicable_kinds(b"/", HTTP_PATH) == [MutationKind.CHAR_INSERT, MutationKind.CHAR_SUBSTITUTE]
        assert applicable_kinds(b"\x00\x00\x00\x2a", FieldId(Protocol.TPLINK_SMARTHOME, "frame_length")) == [
            MutationKind.DIGIT_PERTURB]

    def test_command_char_ops_work_on_plaintext(self):
        fid = FieldId(Protocol.TPLINK_SMARTHOME, "frame_command")
        pos = tplink_decode(SWITCH_OFF[4:]).index(b"0")
        v, _ = apply_op(SWITCH_OFF[4:], MutationOp(MutationKind.DIGIT_PERTURB, fid, {"position": pos, "char": "1"}))
        assert tplink_decode(v) == b'{"system":{"set_relay_state":{"state":1}}}'

    def test_uri_path_never_gains_query_delimiter(self):
        assert b"?" not in field_alphabet("uri_path")
        assert b"/" not in field_alphabet("uri_netloc_port")

    @given(st.binary(max_size=40), st.sampled_from(list(MutationKind)), st.integers(0, 2**32),
           st.sampled_from(["uri_path", "uri_query", "method", "header(Host)", "sp_left", "version"]))
    def test_no_cr_lf_nul_outside_crlf(self, value, kind, seed, name):
        fid = FieldId(Protocol.HTTP, name)
        try:
            out, _ = apply_op(value.replace(b"\r", b"").replace(b"\n", b"").replace(b"\x00", b""),
                              MutationOp(kind, fid), random.Random(seed), REG.dictionaries.http_methods)
        except MutationNotApplicable:
            return
        assert not any(c in out for c in b"\r\n\x00")

    @given(st.sampled_from(list(REG.dictionaries.http_methods)), st.integers(0, 2**32))
    def test_dictionary_closure(self, method, seed):
        fid = FieldId(Protocol.HTTP, "method")
        out, resolved = apply_op(method, MutationOp(MutationKind.DICTIONARY_SUBSTITUTE, fid), random.Random(seed),
                                 REG.dictionaries.http_methods)
        assert out in REG.dictionaries.http_methods
        assert REG.dictionaries.http_methods[resolved.detail["index"]] == out

    @given(st.binary(min_size=1, max_size=30).filter(lambda b: not any(c in b for c in b"\r\n\x00")),
           st.integers(0, 2**32))
    def test_digit_perturb_only_touches_digits(self, value, seed):
        try:
            out, _ = apply_op(value, op(MutationKind.DIGIT_PERTURB), random.Random(seed))
        except MutationNotApplicable:
            assert not any(c in b"0123456789" for c in value)
            return
        diff = [i for i in range(len(value)) if value[i] != out[i]]
        assert len(diff) == 1 and value[diff[0]] in b"0123456789" and out[diff[0]] in b"0123456789"


class TestSerialize:
    def test_round_trip(self):
        assert serialize(parse_http_request(PTZ_REQUEST)) == PTZ_REQUEST

    def test_mutated_method_in_place(self):
        tpl = parse_http_request(PTZ_REQUEST)
        tpl.method = b"GETT"
        assert serialize(tpl).startswith(b"GETT  /web/cgi-bin/hi3510/ptzctrl.cgi?-step=0&-act=left HTTP/1.1\r\n")

    def test_tplink_length_recomputed(self):
        tpl = parse_tplink_request(SWITCH_OFF)
        assert serialize(tpl)[:4] == (42).to_bytes(4, "big")
        tpl.command += b"\x00"
        assert serialize(tpl)[:4] == (43).to_bytes(4, "big")


class TestCampaign:
    def test_rtsp_campaign_size_and_distinctness(self):
        ms = generate_campaign(corpus_for("D3D_001"), REG["D3D_001"], 200, 1, REG.dictionaries)
        wires = [m.wire for m in ms]
        assert len(ms) == 200 and len(set(wires)) == 200
        assert [m.mutant_id for m in ms] == list(range(1, 201))
        assert all(m.applied for m in ms)

    def test_deterministic(self):
        a = generate_campaign(corpus_for("D3D_003"), REG["D3D_003"], 50, 99)
        b = generate_campaign(corpus_for("D3D_003"), REG["D3D_003"], 50, 99)
        c = generate_campaign(corpus_for("D3D_003"), REG["D3D_003"], 50, 100)
        assert [m.wire for m in a] == [m.wire for m in b]
        assert [m.wire for m in a] != [m.wire for m in c]

    def test_fixed_and_unlisted_fields_copied(self):
        ms = generate_campaign(corpus_for("D3D_003"), REG["D3D_003"], 100, 5)
        for m in ms:
            tpl = parse_http_request(m.wire)
            assert tpl.header("Authorization") == b"Basic YWRtaW46YWRtaW4xMjM="
            assert tpl.method == b"GET" and tpl.version == b"HTTP/1.1"
            assert {o.target.name for o in m.applied} <= {"uri_path", "uri_query"}

    def test_identity_mutant(self):
        ms = generate_campaign(corpus_for("D3D_003"), REG["D3D_003"], 1, 0, identity=True)
        assert len(ms) == 1 and ms[0].mutant_id == 0 and ms[0].applied == ()
        tpl = parse_http_request(ms[0].wire)
        assert tpl.uri_path == b"/web/cgi-bin/hi3510/ptzctrl.cgi"

    def test_tplink_frames_consistent(self):
        ms = generate_campaign(corpus_for("TPLink_Kasa_000"), REG["TPLink_Kasa_000"], 100, 2)
        for m in ms:
            assert int.from_bytes(m.wire[:4], "big") == len(m.wire) - 4

    def test_missing_seeds(self):
        corpus = SeedCorpus()
        corpus.add(FieldSeed(FieldId(Protocol.HTTP, "method"), b"GET"))
        with pytest.raises(CampaignError, match="request_uri"):
            generate_campaign(corpus, REG["D3D_003"], 10, 0)

    def test_retry_budget_reports_achieved(self):
        vuln = parse_registry("""
id: LEN_ONLY
protocol: TPLINK_SMARTHOME
mutable: frame_length
mutate_length: true
structure_budget: 1.0
validity: tplink_err_code_zero
exploit: relay_switched
""")["LEN_ONLY"]
        corpus = SeedCorpus()
        corpus.add(FieldSeed(FieldId(Protocol.TPLINK_SMARTHOME, "frame_command"), SWITCH_OFF[4:]))
        with pytest.raises(CampaignError) as err:
            generate_campaign(corpus, vuln, 30, 0)
        # up to three deltas of +-1..4 reach at most 24 distinct non-zero offsets
        assert 0 < err.value.achieved <= 24

    def test_passive_rejected(self):
        with pytest.raises(CampaignError):
            generate_campaign(SeedCorpus(), REG["D3D_000"], 1, 0)

    @pytest.mark.parametrize("n,seed", [(0, 0), (1, -1), (1, 2**64)])
    def test_bad_arguments(self, n, seed):
        with pytest.raises(ValueError):
            generate_campaign(corpus_for("D3D_003"), REG["D3D_003"], n, seed)


GENERIC = parse_registry("""
id: HTTP_REQUEST_LINE
protocol: HTTP
mutable: method, sp_left, uri_scheme, uri_netloc_port, uri_path, uri_query, sp_right, version, crlf
validity: http_200_set_ok
exploit: command_executed
""")["HTTP_REQUEST_LINE"]


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**64 - 1), st.integers(1, 120),
       st.sampled_from(["D3D_001", "D3D_002", "D3D_003", "Ezviz_000", "Ezviz_001", "HTTP_REQUEST_LINE"]))
def test_campaign_invariants(seed, n, vuln_id):
    vuln = GENERIC if vuln_id == "HTTP_REQUEST_LINE" else REG[vuln_id]
    corpus = corpus_for("D3D_003" if vuln is GENERIC else vuln_id)
    ms = generate_campaign(corpus, vuln, n, seed, REG.dictionaries)
    assert len(ms) == n and len({m.wire for m in ms}) == n
    assert sum(m.structure_risk for m in ms) <= int(vuln.structure_budget * n)
    for m in ms:
        assert m.wire == serialize(m.template)
        assert m.structure_risk == any(o.target.name in vuln.structure_risk_fields for o in m.applied)
        if not m.structure_risk:
            # lexical mutants keep the grammar: same fields, same count
            again = parse_request(m.wire, vuln.protocol)
            assert again.well_formed
            assert len(again.fields()) == len(m.template.fields())
        for o in m.applied:
            if o.kind is MutationKind.DICTIONARY_SUBSTITUTE:
                assert m.template.get_field(o.target.name) is not None
