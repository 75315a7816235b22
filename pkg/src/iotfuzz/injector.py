"""TCP delivery of serialized mutants, one fresh connection per mutant."""

from __future__ import annotations

import errno
import logging
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

from iotfuzz import Protocol
from iotfuzz.codecs import message_length
from iotfuzz.mutation import MutantRequest

log = logging.getLogger(__name__)

# Errors that say something about this host rather than the target.
_LOCAL_ERRNOS = {
    errno.ENETUNREACH, errno.EHOSTUNREACH, errno.EADDRNOTAVAIL, errno.EADDRINUSE,
    errno.EACCES, errno.EMFILE, errno.ENFILE, errno.ENOBUFS,
}


class LocalSocketError(OSError):
    """Failure on the injecting side (no route, bind failure, ...)."""


class Outcome(str, Enum):
    RESPONDED = "responded"
    TIMEOUT = "timeout"
    REFUSED = "connection_refused"
    RESET = "reset"


@dataclass(frozen=True)
class TargetSpec:
    host: str
    port: int
    protocol: Protocol
    connect_timeout: int = 1000  # ms
    read_timeout: int = 2000  # ms
    pacing: int = 10  # ms between connection starts
    max_parallel: int = 4

    def __post_init__(self):
        if self.connect_timeout <= 0 or self.read_timeout <= 0:
            raise ValueError("timeouts must be positive")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if not 0 < self.port < 65536:
            raise ValueError(f"port out of range: {self.port}")
        if self.pacing < 0:
            raise ValueError("pacing must be >= 0")


@dataclass(frozen=True)
class ExchangeRecord:
    mutant_id: int
    sent_bytes: bytes
    response_bytes: bytes
    outcome: Outcome
    rtt: float  # ms, send complete -> first response byte (or -> outcome)
    structure_risk: bool = False
    started: float = 0.0  # time.monotonic() at connect
    finished: float = 0.0


def inject_one(target: TargetSpec, mutant: bytes, mutant_id: int = 0,
               structure_risk: bool = False) -> ExchangeRecord:
    started = time.monotonic()

    def record(outcome, response=b"", rtt_from=None, first=None):
        end = time.monotonic()
        ref = rtt_from if rtt_from is not None else started
        rtt = ((first if first is not None else end) - ref) * 1000.0
        return ExchangeRecord(mutant_id, mutant, bytes(response), outcome, rtt,
                              structure_risk, started, end)

    try:
        sock = socket.create_connection((target.host, target.port),
                                        timeout=target.connect_timeout / 1000.0)
    except ConnectionRefusedError:
        return record(Outcome.REFUSED)
    except socket.timeout:
        return record(Outcome.TIMEOUT)
    except ConnectionResetError:
        return record(Outcome.RESET)
    except socket.gaierror as exc:
        raise LocalSocketError(exc.errno, f"cannot resolve {target.host}: {exc}") from exc
    except OSError as exc:
        if exc.errno in _LOCAL_ERRNOS:
            raise LocalSocketError(exc.errno, f"connect to {target.host}:{target.port}: {exc}") from exc
        return record(Outcome.RESET)

    with sock:
        try:
            sock.sendall(mutant)
        except (ConnectionResetError, BrokenPipeError):
            return record(Outcome.RESET)
        except socket.timeout:
            return record(Outcome.TIMEOUT)
        sent = time.monotonic()
        deadline = sent + target.read_timeout / 1000.0
        buf = bytearray()
        first = None
        outcome = None
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                outcome = Outcome.TIMEOUT
                break
            sock.settimeout(remaining)
            try:
                chunk = sock.recv(65536)
            except socket.timeout:
                outcome = Outcome.TIMEOUT
                break
            except (ConnectionResetError, ConnectionAbortedError):
                outcome = Outcome.RESET
                break
            if not chunk:
                outcome = Outcome.RESET
                break
            if first is None:
                first = time.monotonic()
            buf += chunk
            if message_length(bytes(buf), target.protocol, response=True) is not None:
                break
    if buf:
        return record(Outcome.RESPONDED, buf, sent, first)
    return record(outcome, b"", sent)


class _Pacer:
    def __init__(self, gap_ms: int):
        self.gap = gap_ms / 1000.0
        self.lock = threading.Lock()
        self.next_start = 0.0

    def wait(self) -> None:
        with self.lock:
            now = time.monotonic()
            slot = max(now, self.next_start)
            self.next_start = slot + self.gap
        delay = slot - time.monotonic()
        if delay > 0:
            time.sleep(delay)


def run_campaign(target: TargetSpec,
                 mutants: Sequence[Union[bytes, MutantRequest]]) -> list[ExchangeRecord]:
    """Inject every mutant; records come back in mutant order.

    At most ``target.max_parallel`` connections are open at once and
    connection starts are spaced by ``target.pacing`` ms. A
    :class:`LocalSocketError` aborts the campaign.
    """
    pacer = _Pacer(target.pacing)
    abort = threading.Event()

    def task(i: int, m):
        if abort.is_set():
            return None
        if isinstance(m, MutantRequest):
            wire, mid, risk = m.serialize(), m.mutant_id, m.structure_risk
        else:
            wire, mid, risk = bytes(m), i, False
        pacer.wait()
        try:
            return inject_one(target, wire, mid, risk)
        except LocalSocketError:
            abort.set()
            raise

    with ThreadPoolExecutor(max_workers=target.max_parallel) as pool:
        futures = [pool.submit(task, i, m) for i, m in enumerate(mutants)]
        try:
            return [f.result() for f in futures]
        except LocalSocketError:
            for f in futures:
                f.cancel()
            raise
