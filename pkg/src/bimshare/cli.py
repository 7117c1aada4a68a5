"""Command-line entry point: ``bimshare <command> ...``.

Offline commands (``extract --model``, ``integrate``, ``demo``) work on
files.  Everything else talks to running servers: party commands go to the
party server named by ``--config`` and index queries to the controller.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import signal
import sys
import threading
from pathlib import Path

from .controller import CONTROLLER, Controller, IndexRecord
from .demo import run_demo
from .errors import (
    AuthDenied,
    BimShareError,
    ExtractionError,
    FederationError,
    FrameError,
    IntegrationError,
    ModelError,
    MvdError,
    NotFound,
    NotOwner,
    OwnershipClash,
    SchemaError,
    SpfError,
    StaleVersion,
    TransportError,
)
from .extract import ExtractionMode, ParallelLevel, extract, extract_parallel
from .integrate import integrate
from .mvd import parse_mvd
from .party import PartyConfig, PartyNode
from .schema import Schema, bundled_schema, load_schema_file
from .spf import parse_spf, write_spf
from .wire import SocketEndpoint, SocketServer

logger = logging.getLogger("bimshare")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INPUT = 3  # unreadable file, bad SPF, schema or configuration
EXIT_VIEW = 4
EXIT_EXTRACTION = 5
EXIT_INTEGRATION = 6
EXIT_DENIED = 7  # authorization or ownership
EXIT_NOT_FOUND = 8
EXIT_CONFLICT = 9  # stale version or ownership clash
EXIT_TRANSPORT = 10
EXIT_PROTOCOL = 11
EXIT_VERIFICATION = 12

# Most specific classes first.
_EXIT_CODES: list[tuple[type[BaseException], int]] = [
    (MvdError, EXIT_VIEW),
    (SchemaError, EXIT_INPUT),
    (SpfError, EXIT_INPUT),
    (ModelError, EXIT_INPUT),
    (ExtractionError, EXIT_EXTRACTION),
    (IntegrationError, EXIT_INTEGRATION),
    (AuthDenied, EXIT_DENIED),
    (NotOwner, EXIT_DENIED),
    (NotFound, EXIT_NOT_FOUND),
    (StaleVersion, EXIT_CONFLICT),
    (OwnershipClash, EXIT_CONFLICT),
    (FederationError, EXIT_PROTOCOL),
    (TransportError, EXIT_TRANSPORT),
    (FrameError, EXIT_TRANSPORT),
    (OSError, EXIT_INPUT),
    (BimShareError, EXIT_INTERNAL),
]


def exit_code(exc: BaseException) -> int:
    for cls, code in _EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return EXIT_INTERNAL


class ConfigError(BimShareError):
    pass


def read_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment line."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{n}: expected key = value")
        values[key.strip()] = value.strip()
    base = Path(path).parent
    for key in ("requirements", "data_dir", "schema"):
        if values.get(key) and not Path(values[key]).is_absolute():
            values[key] = str(base / values[key])
    return values


def _schema(args, config: dict[str, str] | None = None) -> Schema:
    path = getattr(args, "schema", None) or (config or {}).get("schema")
    return load_schema_file(path) if path else bundled_schema()


def _write(path: str, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _party_settings(args) -> dict[str, str]:
    if not args.config:
        raise ConfigError("this command needs --config naming the party's configuration file")
    cfg = read_config(args.config)
    cfg.pop("schema", None)
    return cfg


def _party_config(settings: dict[str, str]) -> PartyConfig:
    try:
        return PartyConfig.from_mapping(settings)
    except FederationError as exc:
        raise ConfigError(exc.message) from None


def _admin(args, op: str, **body) -> dict:
    """Send an operator command to the party server named by --config."""
    cfg = _party_config(_party_settings(args))
    if not cfg.address:
        raise ConfigError("party configuration has no address")
    token = args.token if args.token is not None else cfg.manager_token
    client = SocketEndpoint(f"cli-{secrets.token_hex(6)}", {cfg.party_id: cfg.address}, timeout=args.timeout)
    try:
        return client.call(cfg.party_id, "Admin", {"op": op, "token": token, **body})
    finally:
        client.close()


def _print(args, data, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        print(text)


# -- commands -----------------------------------------------------------------

def cmd_serve_controller(args) -> int:
    controller = Controller(_schema(args))
    server = SocketServer(controller, args.listen)
    print(f"controller listening on {server.address}", flush=True)
    _serve(server, lambda: None)
    return EXIT_OK


def cmd_serve_party(args) -> int:
    settings = read_config(args.config)
    schema = _schema(args, settings)
    settings.pop("schema", None)
    cfg = _party_config(settings)
    if not cfg.address or not cfg.controller_address:
        raise ConfigError("party configuration needs address and controller_address")
    node = PartyNode(schema, cfg)
    if cfg.data_dir:
        restored = node.restore(cfg.data_dir)
        if restored:
            print(f"restored {restored} entities from {cfg.data_dir}", flush=True)
    server = SocketServer(node, cfg.address)
    cfg.address = server.address
    endpoint = SocketEndpoint(cfg.party_id, {cfg.controller: cfg.controller_address}, timeout=args.timeout)
    node.attach(endpoint)
    server.start()
    try:
        node.register()
    except OwnershipClash:
        node.register(rejoin=True)
    print(f"party {cfg.party_id} listening on {server.address}", flush=True)

    def shutdown():
        if cfg.data_dir:
            node.checkpoint(cfg.data_dir)
        endpoint.close()

    _serve(server, shutdown, started=True)
    return EXIT_OK


def _serve(server: SocketServer, on_stop, started: bool = False) -> None:
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, handler)
    signal.signal(signal.SIGINT, handler)
    if not started:
        server.start()
    stop.wait()
    on_stop()
    server.stop()


def cmd_upload(args) -> int:
    text = Path(args.file).read_text(encoding="utf-8")
    reply = _admin(args, "upload", text=text)
    _print(args, reply, f"stored {reply['count']} entities")
    return EXIT_OK


def cmd_share(args) -> int:
    reply = _admin(args, "share", view=Path(args.view).read_text(encoding="utf-8"))
    _print(args, reply, f"shared {reply['count']} entities")
    return EXIT_OK


def cmd_define_requirements(args) -> int:
    reply = _admin(args, "define-requirements", view=Path(args.view).read_text(encoding="utf-8"))
    _print(args, reply, f"requirements updated, {reply['added']} entities acquired")
    return EXIT_OK


def extract_file(schema: Schema, model_text: str, view_text: str, mode: str = "strict",
                 level: str | None = None, workers: int = 1) -> str:
    """Offline extraction; returns the sub-model as SPF text."""
    model = parse_spf(model_text, schema)
    view = parse_mvd(view_text, schema)
    if level is None:
        sub = extract(model, view, mode)
    else:
        sub = extract_parallel([model], view, mode, level, workers)
    return write_spf(sub.model)


def integrate_files(schema: Schema, base_text: str, sub_text: str) -> str:
    return write_spf(integrate(parse_spf(base_text, schema), parse_spf(sub_text, schema)))


def cmd_extract(args) -> int:
    view_text = Path(args.view).read_text(encoding="utf-8")
    if args.model:
        schema = _schema(args)
        out = extract_file(schema, Path(args.model).read_text(encoding="utf-8"), view_text, args.mode,
                           args.parallel, args.workers)
        _write(args.output, out)
        return EXIT_OK
    reply = _admin(args, "extract", view=view_text, mode=args.mode, level=args.parallel, workers=args.workers)
    _write(args.output, reply["spf"])
    for w in reply["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    origins = sorted(set(reply["provenance"].values()))
    print(f"extracted {len(reply['provenance'])} entities from {', '.join(origins) or 'nobody'}", file=sys.stderr)
    return EXIT_OK


def cmd_integrate(args) -> int:
    schema = _schema(args)
    out = integrate_files(schema, Path(args.base).read_text(encoding="utf-8"),
                          Path(args.sub).read_text(encoding="utf-8"))
    _write(args.output, out)
    return EXIT_OK


def _controller_address(args) -> str:
    if args.controller:
        return args.controller
    if args.config:
        addr = read_config(args.config).get("controller_address")
        if addr:
            return addr
    raise ConfigError("give --controller ADDR or a --config with controller_address")


def cmd_ls_index(args) -> int:
    client = SocketEndpoint(f"cli-{secrets.token_hex(6)}", {CONTROLLER: _controller_address(args)},
                            timeout=args.timeout)
    try:
        body = {"types": []}
        if args.party:
            body["party"] = args.party
        reply = client.call(CONTROLLER, "Locate", body)
    finally:
        client.close()
    records = [IndexRecord.from_json(d) for d in reply["records"]]
    lines = [f"{r.entity_id}\t{r.entity_type}\towner={r.owner_party}\tv{r.version}\t"
             f"replicas={','.join(sorted(r.replica_servers)) or '-'}" for r in records]
    lines.append(f"{len(records)} records")
    _print(args, [r.to_json() for r in records], "\n".join(lines))
    return EXIT_OK


def cmd_transfer_owner(args) -> int:
    reply = _admin(args, "transfer-owner", entity_id=args.entity_id, to_party=args.to_party)
    rec = reply["record"]
    _print(args, rec, f"{rec['entity_id']} now owned by {rec['owner_party']} (version {rec['version']})")
    return EXIT_OK


def cmd_demo(args) -> int:
    report = run_demo(args.parties, args.seed, args.size, args.workers, omit_timings=args.omit_timings)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(format_report(report))
    return EXIT_OK if report["verification"]["passed"] else EXIT_VERIFICATION


def format_report(report: dict) -> str:
    lines = [f"demo: {len(report['parties'])} parties, seed {report['seed']}"]
    lines.append(f"{'party':<12}{'private':>9}{'shared':>8}{'external':>10}   index shared/external")
    for p in report["parties"]:
        c = report["entity_counts"][p]
        i = report["index_counts"][p]
        lines.append(f"{p:<12}{c['private']:>9}{c['shared']:>8}{c['external']:>10}   {i['shared']}/{i['external']}")
    ex = report["extraction"]
    lines.append(f"cross-party extraction by {ex['party']}: {ex['rooted']} rooted entities "
                 f"from {', '.join(ex['origins'])}")
    lines.append(f"integrated into {report['integration']['base']}: {report['integration']['rooted']} rooted entities")
    ms = report["extract_ms"]
    if ms["sequential"] is not None:
        lines.append(f"extraction: sequential {ms['sequential']} ms, parallel ({ms['workers']} workers) "
                     f"{ms['parallel']} ms")
    v = report["verification"]
    lines.append("verification: " + ("passed" if v["passed"] else "FAILED"))
    lines.extend(f"  - {f}" for f in v["failures"])
    return "\n".join(lines)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="party configuration file (key = value lines)")
    common.add_argument("--token", help="credential to present instead of the configured manager token")
    common.add_argument("--schema", help="schema file (default: bundled mini IFC schema)")
    common.add_argument("--timeout", type=float, default=10.0, help="request timeout in seconds")
    common.add_argument("--json", action="store_true", help="machine-readable output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="bimshare", description="Object-level BIM sharing between parties.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve-controller", parents=[common], help="run the global controller")
    p.add_argument("--listen", required=True, metavar="ADDR")
    p.set_defaults(fn=cmd_serve_controller)

    p = sub.add_parser("serve-party", parents=[common], help="run a party server")
    p.set_defaults(fn=cmd_serve_party)

    p = sub.add_parser("upload", parents=[common], help="store an SPF file as Private data")
    p.add_argument("file")
    p.set_defaults(fn=cmd_upload)

    p = sub.add_parser("share", parents=[common], help="share entities selected by a view")
    p.add_argument("view")
    p.set_defaults(fn=cmd_share)

    p = sub.add_parser("define-requirements", parents=[common], help="set the party's requirement view")
    p.add_argument("view")
    p.set_defaults(fn=cmd_define_requirements)

    p = sub.add_parser("extract", parents=[common], help="extract a sub-model")
    p.add_argument("view")
    p.add_argument("--model", help="extract from this SPF file instead of a party server")
    p.add_argument("--mode", choices=[m.value for m in ExtractionMode], default="strict")
    p.add_argument("--parallel", choices=[lv.value for lv in ParallelLevel])
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("integrate", parents=[common], help="integrate a sub-model into a base model")
    p.add_argument("base")
    p.add_argument("sub")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(fn=cmd_integrate)

    p = sub.add_parser("ls-index", parents=[common], help="list the controller's index")
    p.add_argument("--party")
    p.add_argument("--controller", metavar="ADDR")
    p.set_defaults(fn=cmd_ls_index)

    p = sub.add_parser("transfer-owner", parents=[common], help="hand an entity to another party")
    p.add_argument("entity_id")
    p.add_argument("to_party")
    p.set_defaults(fn=cmd_transfer_owner)

    p = sub.add_parser("demo", parents=[common], help="run a simulated federation and report")
    p.add_argument("--parties", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=240, help="approximate entities per party model")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--omit-timings", action="store_true", help="report null timings (for diffing)")
    p.set_defaults(fn=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    if args.command == "demo" and args.parties < 2:
        parser.error("--parties must be at least 2")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BimShareError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
