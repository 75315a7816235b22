import socket
import threading
import time

import pytest

from conftest import PTZ_REQUEST, PTZ_RESPONSE
from iotfuzz import Protocol
from iotfuzz.injector import LocalSocketError, Outcome, TargetSpec, inject_one, run_campaign
from iotfuzz.mock import Device, MockBehavior, serve


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def target(port, **kw):
    kw.setdefault("pacing", 0)
    return TargetSpec("127.0.0.1", port, Protocol.HTTP, **kw)


class ConcurrencyProbe:
    """Answers every request after a short delay and records peak concurrency."""

    def __init__(self, delay=0.05):
        self.delay = delay
        self.active = 0
        self.peak = 0
        self.starts = []
        self.lock = threading.Lock()
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(64)
        self.port = self.sock.getsockname()[1]
        self.running = True
        threading.Thread(target=self._accept, daemon=True).start()

    def _accept(self):
        while self.running:
            try:
                conn, _ = self.sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
            self.starts.append(time.monotonic())
        with conn:
            conn.recv(65536)
            time.sleep(self.delay)
            with self.lock:
                self.active -= 1
            conn.sendall(PTZ_RESPONSE)

    def close(self):
        self.running = False
        self.sock.close()


@pytest.fixture
def probe():
    p = ConcurrencyProbe()
    yield p
    p.close()


class TestTargetSpec:
    @pytest.mark.parametrize("kw", [{"connect_timeout": 0}, {"read_timeout": -1}, {"max_parallel": 0},
                                    {"pacing": -1}, {"port": 0}, {"port": 70000}])
    def test_rejects(self, kw):
        args = dict(host="127.0.0.1", port=80, protocol=Protocol.HTTP)
        args.update(kw)
        with pytest.raises(ValueError):
            TargetSpec(**args)


class TestInjectOne:
    def test_responded(self):
        with serve(MockBehavior(Device.D3D, Protocol.HTTP)) as m:
            ex = inject_one(target(m.port), PTZ_REQUEST, 7)
        assert ex.outcome is Outcome.RESPONDED
        assert ex.mutant_id == 7 and ex.sent_bytes == PTZ_REQUEST
        assert ex.response_bytes.endswith(b"[Succeed]set ok.")
        assert ex.rtt >= 0

    def test_refused(self):
        ex = inject_one(target(free_port()), PTZ_REQUEST)
        assert ex.outcome is Outcome.REFUSED and ex.response_bytes == b""

    def test_timeout(self):
        with serve(MockBehavior(Device.D3D, Protocol.HTTP, stall_every=1, stall_seconds=5)) as m:
            t0 = time.monotonic()
            ex = inject_one(target(m.port, read_timeout=200), PTZ_REQUEST)
            assert time.monotonic() - t0 < 2
        assert ex.outcome is Outcome.TIMEOUT

    def test_reset(self):
        with serve(MockBehavior(Device.D3D, Protocol.HTTP, drop_every=1)) as m:
            ex = inject_one(target(m.port), PTZ_REQUEST)
        assert ex.outcome is Outcome.RESET

    def test_unresolvable_host_is_local(self):
        spec = TargetSpec("no-such-host.invalid", 80, Protocol.HTTP)
        with pytest.raises(LocalSocketError):
            inject_one(spec, PTZ_REQUEST)


class TestRunCampaign:
    def test_order_and_ids(self):
        with serve(MockBehavior(Device.D3D, Protocol.HTTP, drop={3})) as m:
            mutants = [PTZ_REQUEST.replace(b"left", b"l%03d" % i) for i in range(12)]
            out = run_campaign(target(m.port, max_parallel=4), mutants)
        assert [ex.mutant_id for ex in out] == list(range(12))
        assert [ex.sent_bytes for ex in out] == mutants
        assert sum(ex.outcome is Outcome.RESET for ex in out) == 1

    def test_parallelism_is_bounded(self, probe):
        run_campaign(target(probe.port, max_parallel=3), [PTZ_REQUEST] * 15)
        assert 1 <= probe.peak <= 3

    def test_pacing_spaces_connection_starts(self, probe):
        run_campaign(target(probe.port, max_parallel=4, pacing=30), [PTZ_REQUEST] * 6)
        starts = sorted(probe.starts)
        gaps = [b - a for a, b in zip(starts, starts[1:])]
        assert min(gaps) >= 0.02

    def test_local_error_aborts(self):
        spec = TargetSpec("no-such-host.invalid", 80, Protocol.HTTP, pacing=0)
        with pytest.raises(LocalSocketError):
            run_campaign(spec, [PTZ_REQUEST] * 5)
