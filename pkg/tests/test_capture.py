import base64
import struct

import pytest

from conftest import CAMERA, CLIENT, PTZ_REQUEST, PTZ_RESPONSE, RTSP_OPTIONS_REQUEST, TPLINK_FRAMES
from iotfuzz import Protocol
from iotfuzz.capture import (
    CaptureError,
    Direction,
    Reassembler,
    guess_protocol,
    load_capture,
    parse_capture,
    reassemble,
    tcp_frame,
    tcp_stream_frames,
    udp_frame,
    write_pcap,
)


def _pcap(tmp_path, frames, **kw):
    path = tmp_path / "t.pcap"
    write_pcap(path, frames, **kw)
    return path


class TestLoad:
    def test_records_and_direction(self, tmp_path):
        frames = tcp_stream_frames(CLIENT, CAMERA, 40000, 80, [(True, PTZ_REQUEST), (False, PTZ_RESPONSE)])
        cap = load_capture(_pcap(tmp_path, frames), CAMERA)
        assert cap.total == 2
        assert [r.direction for r in cap] == [Direction.TO_DEVICE, Direction.FROM_DEVICE]
        assert cap[0].payload == PTZ_REQUEST
        assert cap[0].index == 1 and cap[1].index == 2
        assert cap[0].flow_id == (CLIENT, 40000, CAMERA, 80)

    def test_skips_are_counted(self, tmp_path):
        frames = [
            udp_frame(CLIENT, CAMERA, 1, 2, b"x"),
            tcp_frame(CLIENT, CAMERA, 1, 80, b"", flags=0x10),
            b"\x00" * 10,
            tcp_frame(CLIENT, CAMERA, 1, 80, b"abc"),
        ]
        cap = load_capture(_pcap(tmp_path, frames))
        assert len(cap) == 1 and cap[0].index == 4
        assert cap.skipped == {"non-tcp": 1, "empty-payload": 1, "truncated-frame": 1}
        assert cap[0].direction is Direction.OTHER

    def test_big_endian_and_timestamps(self, tmp_path):
        frames = [tcp_frame(CLIENT, CAMERA, 1, 80, b"abc")]
        cap = load_capture(_pcap(tmp_path, frames, big_endian=True, start=100.25))
        assert cap[0].ts_sec == 100 and cap[0].ts_usec == 250000

    def test_nanosecond_magic(self):
        frame = tcp_frame(CLIENT, CAMERA, 1, 80, b"abc")
        data = struct.pack("<IHHiIII", 0xA1B23C4D, 2, 4, 0, 0, 65535, 1)
        data += struct.pack("<IIII", 5, 7_000_000, len(frame), len(frame)) + frame
        cap = parse_capture(data)
        assert cap[0].ts_usec == 7000

    def test_vlan_tag(self):
        frame = tcp_frame(CLIENT, CAMERA, 1, 80, b"abc")
        tagged = frame[:12] + b"\x81\x00\x00\x05" + frame[12:]
        data = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
        data += struct.pack("<IIII", 0, 0, len(tagged), len(tagged)) + tagged
        assert parse_capture(data)[0].payload == b"abc"

    def test_ethernet_padding_ignored(self, tmp_path):
        frame = tcp_frame(CLIENT, CAMERA, 1, 80, b"ab") + b"\x00" * 6
        assert load_capture(_pcap(tmp_path, [frame]))[0].payload == b"ab"

    def test_truncated_record_reports_offset(self, tmp_path):
        path = _pcap(tmp_path, [tcp_frame(CLIENT, CAMERA, 1, 80, b"abc")])
        data = path.read_bytes()
        with pytest.raises(CaptureError, match="offset 24"):
            parse_capture(data[:-2])

    @pytest.mark.parametrize("data,msg", [
        (b"\x00" * 10, "global header"),
        (b"\x00" * 24, "magic"),
        (struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 101), "link type"),
    ])
    def test_bad_headers(self, data, msg):
        with pytest.raises(CaptureError, match=msg):
            parse_capture(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CaptureError):
            load_capture(tmp_path / "nope.pcap")


class TestReassembly:
    def test_segmented_request_is_joined(self, tmp_path):
        frames = tcp_stream_frames(CLIENT, CAMERA, 40000, 80, [(True, PTZ_REQUEST)], mss=20)
        msgs = reassemble(load_capture(_pcap(tmp_path, frames), CAMERA))
        assert len(msgs) == 1
        assert msgs[0].data == PTZ_REQUEST
        assert msgs[0].first_packet_index == 1
        assert msgs[0].protocol_guess is Protocol.HTTP and msgs[0].is_request

    def test_pipelined_messages_split(self, tmp_path):
        frames = tcp_stream_frames(CLIENT, CAMERA, 40000, 80,
                                   [(True, PTZ_REQUEST + PTZ_REQUEST[:30]), (True, PTZ_REQUEST[30:])])
        msgs = reassemble(load_capture(_pcap(tmp_path, frames), CAMERA))
        assert [m.data for m in msgs] == [PTZ_REQUEST, PTZ_REQUEST]
        assert [m.first_packet_index for m in msgs] == [1, 1]

    def test_response_direction(self, tmp_path):
        frames = tcp_stream_frames(CLIENT, CAMERA, 40000, 80, [(True, PTZ_REQUEST), (False, PTZ_RESPONSE)])
        msgs = reassemble(load_capture(_pcap(tmp_path, frames), CAMERA))
        assert [m.direction for m in msgs] == [Direction.TO_DEVICE, Direction.FROM_DEVICE]
        assert not msgs[1].is_request

    def test_sequence_gap_flags_flow(self, tmp_path):
        frames = [tcp_frame(CLIENT, CAMERA, 1, 80, PTZ_REQUEST[:20], seq=100),
                  tcp_frame(CLIENT, CAMERA, 1, 80, PTZ_REQUEST[25:], seq=125),
                  tcp_frame(CLIENT, CAMERA, 2, 80, PTZ_REQUEST, seq=7)]
        r = Reassembler()
        msgs = r.run(load_capture(_pcap(tmp_path, frames), CAMERA))
        assert len(msgs) == 1 and msgs[0].flow_id[1] == 2
        assert (CLIENT, 1, CAMERA, 80) in r.flagged

    def test_incomplete_message_is_unknown(self, tmp_path):
        frames = [tcp_frame(CLIENT, CAMERA, 1, 80, PTZ_REQUEST[:-2])]
        msgs = reassemble(load_capture(_pcap(tmp_path, frames), CAMERA))
        assert msgs[0].protocol_guess is Protocol.UNKNOWN

    def test_tplink_on_port_9999(self, tmp_path):
        wire = base64.b64decode(TPLINK_FRAMES[1][0])
        frames = tcp_stream_frames(CLIENT, "192.168.4.30", 40001, 9999, [(True, wire)])
        msgs = reassemble(load_capture(_pcap(tmp_path, frames)))
        assert msgs[0].protocol_guess is Protocol.TPLINK_SMARTHOME and msgs[0].data == wire


@pytest.mark.parametrize("buf,ports,expected", [
    (PTZ_REQUEST, (1, 80), Protocol.HTTP),
    (RTSP_OPTIONS_REQUEST, (1, 554), Protocol.RTSP),
    (b"DESCRIBE rtsp://x/ RTSP/1.0\r\n", (1, 8554), Protocol.RTSP),
    (b"HTTP/1.1 200 OK\r\n", (80, 1), Protocol.HTTP),
    (b"RTSP/1.0 200 OK\r\n", (554, 1), Protocol.RTSP),
    (base64.b64decode(TPLINK_FRAMES[0][0]), (1, 12345), Protocol.TPLINK_SMARTHOME),
    (b"\x16\x03\x01\x02\x00", (1, 443), Protocol.UNKNOWN),
])
def test_guess_protocol(buf, ports, expected):
    assert guess_protocol(buf, ports) is expected
