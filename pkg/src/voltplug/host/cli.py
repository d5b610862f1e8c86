"""Command-line client and validation harness.

Exit status: 0 on success, 1 on a protocol or device error, 2 on a usage
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

from .. import wire
from ..device import VirtualPlug
from ..errors import ConfigurationError, VoltplugError
from ..simkernel import Scenario, load_scenario, run_sampler
from . import protocols
from .link import DEFAULT_STEP_US, InProcessLink, PlugServer, TcpLink

log = logging.getLogger("voltplug")

SEED_ENV = "VOLTPLUG_SEED"


class UsageError(Exception):
    pass


def _scenario(args) -> Scenario:
    sc = load_scenario(args.scenario)
    seed = args.seed
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer") from None
    return sc if seed is None else sc.with_seed(seed)


def _emit(args, text: str):
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------------


def cmd_simulate(args):
    sc = _scenario(args)
    stream = run_sampler(sc.waveform, sc.chain, sc.adc, sc.timing, args.duration_us)
    _emit(args, stream.to_csv())


def cmd_serve(args):
    plug = VirtualPlug(_scenario(args))
    with PlugServer(plug, (args.host, args.port), step_us=args.step_us) as srv:
        print(f"listening on {srv.server_address[0]}:{srv.port}", flush=True)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            pass


def _device_request(args, payload: str) -> str:
    if args.connect:
        with TcpLink(args.connect) as link:
            return link.request(payload)
    # Local one-shot plug: run it until the first settled window is available.
    plug = VirtualPlug(_scenario(args))
    link = InProcessLink(plug)
    if getattr(args, "relay", None) == "on":
        link.request("RELAY ON")
    if payload == "READ":
        plug.tick(DEFAULT_STEP_US)
    return link.request(payload)


def _check_reply(reply: str) -> str:
    if reply.startswith("ERROR") or reply == "BUSY":
        raise VoltplugError(f"device replied {reply!r}")
    return reply


def cmd_relay(args):
    print(_check_reply(_device_request(args, f"RELAY {args.state.upper()}")))


def cmd_read(args):
    print(_check_reply(_device_request(args, "READ")))


def cmd_status(args):
    print(_check_reply(_device_request(args, "STATUS")))


def cmd_validate(args):
    sc = _scenario(args)
    if args.protocol == "lag":
        reports = [protocols.run_lag_protocol(sc, args.n)]
    elif args.protocol == "rms":
        reports = list(protocols.run_rms_protocol(sc, args.n, args.interval_s))
    else:
        reports = [protocols.run_power_protocol(sc, args.n, args.interval_s)]
    fmt = args.format or "table"
    if fmt == "table":
        text = protocols.render_table(reports) + protocols.render_json(reports)
    elif fmt == "json":
        text = protocols.render_json(reports)
    elif fmt == "csv":
        text = protocols.render_csv(reports)
    else:
        raise UsageError(f"validate does not support --format {fmt}")
    _emit(args, text)


def cmd_log_export(args):
    plug = VirtualPlug(_scenario(args))
    if args.relay == "on":
        plug.set_relay(True)
    plug.tick(args.duration_us)
    fmt = args.format or "jsonl"
    if fmt == "jsonl":
        text = plug.log_jsonl()
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(plug.log[0].measurement.to_dict()) if plug.log else []
        w.writerow(["t_virtual_us", "scenario"] + names)
        for rec in plug.log:
            d = rec.measurement.to_dict()
            w.writerow([rec.t_virtual_us, rec.scenario] + ["" if d[k] is None else d[k] for k in names])
        text = buf.getvalue()
    else:
        raise UsageError(f"log export does not support --format {fmt}")
    _emit(args, text)


# -- parser -------------------------------------------------------------------------


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default="resistive", help="scenario JSON file or bundled name")
    common.add_argument("--seed", type=int, help=f"noise seed (falls back to ${SEED_ENV})")
    common.add_argument("--out", help="write output here instead of stdout")
    common.add_argument("--format", choices=("table", "json", "csv", "jsonl"))
    common.add_argument("-v", "--verbose", action="store_true")

    remote = argparse.ArgumentParser(add_help=False)
    remote.add_argument("--connect", metavar="HOST:PORT", help="talk to a served plug")
    remote.add_argument("--relay", choices=("on", "off"), default="on",
                        help="relay state of the local one-shot plug (ignored with --connect)")

    p = argparse.ArgumentParser(prog="voltplug", description="Virtual smart plug and validation harness.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="scenario to raw sample CSV")
    s.add_argument("--duration-us", type=_positive_int, default=100_000)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("serve", parents=[common], help="serve a virtual plug on a local TCP port")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--step-us", type=_positive_int, default=DEFAULT_STEP_US,
                   help="virtual time advanced before each received line")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("relay", parents=[common, remote], help="switch the relay")
    s.add_argument("state", choices=("on", "off"))
    s.set_defaults(func=cmd_relay)

    s = sub.add_parser("read", parents=[common, remote], help="latest measurement as JSON")
    s.set_defaults(func=cmd_read)

    s = sub.add_parser("status", parents=[common, remote], help="relay state and uptime")
    s.set_defaults(func=cmd_status)

    s = sub.add_parser("validate", parents=[common], help="run a validation protocol")
    s.add_argument("protocol", choices=("lag", "rms", "power"))
    s.add_argument("--n", type=_positive_int, default=30)
    s.add_argument("--interval-s", type=float, default=60.0, help="virtual seconds between readings")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("log", help="measurement log tools")
    logsub = s.add_subparsers(dest="log_command", required=True)
    e = logsub.add_parser("export", parents=[common], help="run the plug and export its log")
    e.add_argument("--duration-us", type=_positive_int, default=1_000_000)
    e.add_argument("--relay", choices=("on", "off"), default="on")
    e.set_defaults(func=cmd_log_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"voltplug: error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"voltplug: error: {exc}", file=sys.stderr)
        return 2
    except (VoltplugError, wire.WireError, OSError) as exc:
        print(f"voltplug: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
