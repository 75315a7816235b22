"""Command-line entry point.

Exit codes:
  0  ran to completion, nothing found
  1  vulnerable (a valid mutant, or any Authorization header in a capture)
  2  usage or configuration error
  3  runtime error (capture unreadable, local socket failure, ...)
"""

from __future__ import annotations

import argparse
import base64
import binascii
import logging
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Optional, Sequence

from iotfuzz import Protocol, __version__
from iotfuzz.assessor import (
    assess,
    classify,
    render_credential_report,
    render_report,
    scan_credentials,
)
from iotfuzz.capture import CaptureError, load_capture, reassemble
from iotfuzz.codecs import FrameError, TplinkFrame, tplink_decode
from iotfuzz.injector import LocalSocketError, TargetSpec, run_campaign
from iotfuzz.mutation import CampaignError, generate_campaign
from iotfuzz.registry import RegistryError, load_registry
from iotfuzz.seeds import SeedCorpus, build_corpus

log = logging.getLogger("iotfuzz")

EXIT_OK, EXIT_VULNERABLE, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.code = code


def _usage(stage, msg):
    return StageError(stage, msg, EXIT_USAGE)


def _runtime(stage, msg):
    return StageError(stage, msg, EXIT_RUNTIME)


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _protocol(text: str) -> Protocol:
    try:
        return Protocol.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iotfuzz",
        description="Seed-based lexical fuzzing of IoT device protocols.",
        epilog="exit codes: 0 not vulnerable, 1 vulnerable, 2 usage/config error, 3 runtime error",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--registry", help="extra vulnerability registry file")
    common.add_argument("--verbose", action="store_true", help="list every mutant or finding")
    common.add_argument("--report", help="also write the report text to this file")

    p = sub.add_parser("fuzz", parents=[common], help="run a mutation campaign against a target")
    p.add_argument("host")
    p.add_argument("port", nargs="?", type=int, help="defaults to the vulnerability's port")
    p.add_argument("--vuln", required=True, help="vulnerability id, e.g. D3D_003")
    p.add_argument("--protocol", type=_protocol, help="must agree with the vulnerability entry")
    p.add_argument("--seeds", help="seed corpus (TSV); default is the entry's bundled seeds")
    p.add_argument("--pcap", help="mine seeds from this capture instead")
    p.add_argument("--device-ip", help="device address in --pcap")
    p.add_argument("--count", type=_positive, default=200)
    p.add_argument("--rng-seed", type=_u64, default=0)
    p.add_argument("--timeout-ms", type=_positive, default=2000, help="read timeout per mutant")
    p.add_argument("--connect-timeout-ms", type=_positive, default=1000)
    p.add_argument("--pacing-ms", type=int, default=10)
    p.add_argument("--parallel", type=_positive, default=4)
    p.add_argument("--with-identity", action="store_true",
                   help="send the unmutated base request as mutant 0")
    p.add_argument("--figure", help="save a PNG/SVG/PDF summary figure here")

    p = sub.add_parser("scan-credentials", parents=[common],
                       help="look for Basic credentials in a capture")
    p.add_argument("--pcap", required=True)
    p.add_argument("--device-ip")
    p.add_argument("--protocol", type=_protocol, default=Protocol.HTTP)
    p.add_argument("--vuln", default="D3D_000")

    p = sub.add_parser("extract-seeds", help="mine a seed corpus from a capture")
    p.add_argument("--pcap", required=True)
    p.add_argument("--device-ip")
    p.add_argument("--protocol", type=_protocol, help="keep only this protocol")
    p.add_argument("--label", default="", help="device label stored in the corpus")
    p.add_argument("-o", "--output", help="TSV output path (default stdout)")

    p = sub.add_parser("mock-serve", help="run mock devices until interrupted")
    p.add_argument("--config", help="INI file, one section per service")
    p.add_argument("--device", default="D3D", choices=["D3D", "EZVIZ", "TPLINK"])
    p.add_argument("--protocol", type=_protocol, default=Protocol.HTTP)
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--matcher", default="exact", choices=["exact", "lenient", "scripted"])
    p.add_argument("--accept-list", help="Base64 lines of accepted requests (scripted)")
    p.add_argument("--auth", help="require this Authorization value")
    p.add_argument("--duration", type=float, help="stop after this many seconds")

    p = sub.add_parser("decode-tplink", help="decode SmartHome frames or encode commands")
    p.add_argument("payload", nargs="+", help="Base64 frames (or plaintext with --encode)")
    p.add_argument("--encode", action="store_true", help="encode plaintext into a Base64 frame")
    p.add_argument("--no-prefix", action="store_true", help="payload has no length prefix")
    return parser


def _emit(text: str, report_path: Optional[str]) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()
    if report_path:
        try:
            Path(report_path).write_text(text)
        except OSError as exc:
            raise _runtime("report", f"cannot write {report_path}: {exc}") from None


def _load_registry(args):
    try:
        return load_registry(args.registry)
    except RegistryError as exc:
        raise _usage("registry", str(exc)) from None


def _load_capture(path, device_ip):
    try:
        return load_capture(path, device_ip)
    except (CaptureError, OSError) as exc:
        raise _runtime("capture", str(exc)) from None


def cmd_fuzz(args) -> int:
    registry = _load_registry(args)
    vuln = registry.get(args.vuln)
    if vuln is None:
        raise _usage("registry", f"unknown vulnerability id {args.vuln!r}")
    if vuln.passive:
        raise _usage("registry", f"{vuln.id} is passive; use scan-credentials")
    if args.protocol is not None and args.protocol is not vuln.protocol:
        raise _usage("arguments", f"{vuln.id} is {vuln.protocol.value}, not {args.protocol.value}")
    port = args.port or vuln.port
    if not port:
        raise _usage("arguments", f"{vuln.id} has no default port; give one")

    if args.pcap:
        cap = _load_capture(args.pcap, args.device_ip)
        corpus = build_corpus(reassemble(cap), vuln.id, args.pcap)
    else:
        seeds_path = Path(args.seeds) if args.seeds else vuln.seeds_path()
        if seeds_path is None:
            raise _usage("seeds", f"{vuln.id} has no bundled seeds; pass --seeds or --pcap")
        try:
            corpus = SeedCorpus.load(seeds_path)
        except OSError as exc:
            raise _usage("seeds", f"cannot read {seeds_path}: {exc}") from None
        except ValueError as exc:
            raise _usage("seeds", str(exc)) from None

    try:
        mutants = generate_campaign(corpus, vuln, args.count, args.rng_seed,
                                    registry.dictionaries, identity=args.with_identity)
    except CampaignError as exc:
        raise _runtime("campaign", str(exc)) from None

    try:
        target = TargetSpec(args.host, port, vuln.protocol, args.connect_timeout_ms,
                            args.timeout_ms, args.pacing_ms, args.parallel)
    except ValueError as exc:
        raise _usage("arguments", str(exc)) from None
    log.info("sending %d mutants for %s to %s:%d", len(mutants), vuln.id, args.host, port)
    started = time.monotonic()
    try:
        exchanges = run_campaign(target, mutants)
    except LocalSocketError as exc:
        raise _runtime("injection", str(exc)) from None
    duration = time.monotonic() - started

    verdicts = [classify(vuln, ex) for ex in exchanges]
    report = assess(vuln, verdicts, duration, f"{args.host}:{port}")
    _emit(render_report(report, args.verbose), args.report)
    if args.figure:
        from iotfuzz.plotting import save_campaign_figure
        try:
            save_campaign_figure(report, args.figure)
        except (OSError, ValueError) as exc:
            raise _runtime("figure", f"cannot write {args.figure}: {exc}") from None
    return EXIT_VULNERABLE if report.vulnerable else EXIT_OK


def cmd_scan_credentials(args) -> int:
    if args.protocol is not Protocol.HTTP:
        raise _usage("arguments", "credential scanning covers HTTP only")
    cap = _load_capture(args.pcap, args.device_ip)
    scan = scan_credentials(cap)
    _emit(render_credential_report(scan, args.verbose, args.vuln), args.report)
    return EXIT_VULNERABLE if scan.findings else EXIT_OK


def cmd_extract_seeds(args) -> int:
    cap = _load_capture(args.pcap, args.device_ip)
    msgs = reassemble(cap)
    if args.protocol is not None:
        msgs = [m for m in msgs if m.protocol_guess is args.protocol]
    corpus = build_corpus(msgs, args.label, args.pcap)
    if args.output:
        try:
            corpus.dump(args.output)
        except OSError as exc:
            raise _runtime("seeds", f"cannot write {args.output}: {exc}") from None
        print(f"{len(corpus)} seeds over {len(corpus.fields())} fields -> {args.output}")
    else:
        from iotfuzz.seeds import dumps_corpus
        sys.stdout.write(dumps_corpus(corpus))
    return EXIT_OK


def cmd_mock_serve(args) -> int:
    from iotfuzz.mock import Device, MockBehavior, load_mock_config, read_accept_list, serve

    try:
        if args.config:
            behaviors = load_mock_config(args.config)
        else:
            accept = read_accept_list(args.accept_list) if args.accept_list else frozenset()
            behaviors = [MockBehavior(
                device=Device(args.device), protocol=args.protocol, listen_port=args.port,
                host=args.host, route_matcher=args.matcher, accept_list=accept,
                auth_required=bool(args.auth),
                **({"expected_auth": args.auth.encode()} if args.auth else {}),
            )]
    except (OSError, ValueError, binascii.Error) as exc:
        raise _usage("mock-config", str(exc)) from None

    servers = []
    try:
        for b in behaviors:
            servers.append(serve(b))
    except OSError as exc:
        for s in servers:
            s.stop()
        raise _runtime("mock-bind", str(exc)) from None
    for s in servers:
        b = s.behavior
        print(f"{b.device.value} {b.protocol.value} listening on {s.host}:{s.port} ({b.route_matcher})",
              flush=True)

    done = threading.Event()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, lambda *_: done.set())
    try:
        done.wait(args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        for s in servers:
            s.stop()
    return EXIT_OK


def cmd_decode_tplink(args) -> int:
    for item in args.payload:
        if args.encode:
            frame = TplinkFrame.from_plain(item.encode("utf-8"))
            wire = frame.to_wire() if not args.no_prefix else frame.cipher
            print(base64.b64encode(wire).decode("ascii"))
            continue
        try:
            raw = base64.b64decode(item, validate=True)
        except (binascii.Error, ValueError):
            raise _usage("decode", f"not Base64: {item[:40]!r}") from None
        try:
            plain = tplink_decode(raw) if args.no_prefix else TplinkFrame.from_wire(raw).plain
        except FrameError as exc:
            raise _usage("decode", str(exc)) from None
        print(plain.decode("utf-8", errors="replace"))
    return EXIT_OK


COMMANDS = {
    "fuzz": cmd_fuzz,
    "scan-credentials": cmd_scan_credentials,
    "extract-seeds": cmd_extract_seeds,
    "mock-serve": cmd_mock_serve,
    "decode-tplink": cmd_decode_tplink,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"iotfuzz: error in {exc}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        print("iotfuzz: interrupted", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
