"""``dcaiflow``: planner, flow runner, endpoint/transfer clients and daemons.

Settings resolve as command-line flag, then environment variable, then
config file. Environment variables: ``DCAIFLOW_ENGINE`` (engine address),
``DCAIFLOW_ENDPOINT`` (function endpoint address), ``DCAIFLOW_PLAN_CONFIG``
(planner config path), ``DCAIFLOW_N`` and ``DCAIFLOW_P`` (planner overrides).

Exit codes: 0 success, 1 failed run or operation, 2 cancelled run,
3 usage or input-document error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence, TextIO

from dcaiflow import __version__
from dcaiflow.costmodel import (
    HEDM_CONFIG,
    MissingCostError,
    NoPlanAvailable,
    ParameterError,
    PlanUnavailable,
    choose_plan,
    crossover,
    load_plan_query,
    parse_plan_query,
    sweep,
    sweep_csv,
    sweep_points,
)
from dcaiflow.kvconfig import ConfigError
from dcaiflow.timebase import exact

EXIT_OK, EXIT_FAILED, EXIT_CANCELLED, EXIT_USAGE = 0, 1, 2, 3

log = logging.getLogger("dcaiflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which means "cancelled" here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setting(flag: Any, env: str, default: Any = None) -> Any:
    if flag is not None:
        return flag
    return os.environ.get(env, default)


def _read_json(path: str) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None


def _secs(ns: int | None) -> str:
    return "NA" if ns is None else f"{ns / 1e9:.3f}"


# --- plan -----------------------------------------------------------------------


def cmd_plan(args: argparse.Namespace, out: TextIO) -> int:
    config = _setting(args.config, "DCAIFLOW_PLAN_CONFIG")
    if args.preset == "hedm":
        q = parse_plan_query(HEDM_CONFIG, "<hedm preset>")
    elif config:
        q = load_plan_query(config)
    else:
        raise UsageError("plan needs --config PATH, --preset hedm, or DCAIFLOW_PLAN_CONFIG")
    n = _setting(args.n, "DCAIFLOW_N")
    p = _setting(args.p, "DCAIFLOW_P")
    try:
        if n is not None:
            count = exact(n)
            if count.denominator != 1 or count < 0:
                raise ValueError(f"N must be a non-negative integer, got {n!r}")
            q = q.with_count(int(count))
        if p is not None:
            q = replace(q, training_fraction_p=exact(p))
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"bad N or p: {exc}") from None

    if args.sweep:
        points = sweep_points(args.sweep)
        out.write(sweep_csv(sweep(q, points)))
        return EXIT_OK

    verdict = choose_plan(q)
    n_star = crossover(q) if verdict.conventional_cost is not None and verdict.surrogate_cost is not None else None
    lines = [
        f"n={q.dataset.count_n}",
        f"p={float(q.p)}",
        f"conventional_s={_fmt(verdict.conventional_cost)}",
        f"local_s={_fmt(verdict.local_cost)}",
        f"surrogate_s={_fmt(verdict.surrogate_cost)}",
        f"chosen={verdict.chosen.value}",
        f"crossover_n={'none' if n_star is None else n_star}",
    ]
    out.write("\n".join(lines) + "\n")
    return EXIT_OK


def _fmt(seconds: float | None) -> str:
    return "unavailable" if seconds is None else f"{seconds:.3f}"


# --- flows ---------------------------------------------------------------------------


def _breakdown(run: dict[str, Any], out: TextIO, err: TextIO) -> int:
    out.write("step,role,attempt,state,seconds\n")
    for a in run["actions"]:
        dur = None if a["start_ns"] is None or a["end_ns"] is None else a["end_ns"] - a["start_ns"]
        out.write(f"{a['state']},{a['role'] or ''},{a['attempt']},{a['action_state']},{_secs(dur)}\n")
    status = run["status"]
    summary = f"run {run['run_id']} {status} end_to_end_s={_secs(run.get('end_to_end_ns'))}"
    if status == "Failed":
        failed = [a for a in run["actions"] if a["action_state"] == "Failed"]
        if failed:
            summary += f" failed_step={failed[-1]['state']} error={failed[-1]['error']!r}"
    err.write(summary + "\n")
    return {"Succeeded": EXIT_OK, "Cancelled": EXIT_CANCELLED}.get(status, EXIT_FAILED)


def cmd_run(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    from dcaiflow.flow import Engine, RunStore, load_flow
    from dcaiflow.flow.server import EngineClient
    from dcaiflow.timebase import VirtualClock, WallClock

    flow = load_flow(args.flow)
    inputs = _read_json(args.args) if args.args else {}
    if not isinstance(inputs, dict):
        raise UsageError("the argument document must be a JSON object")
    address = _setting(args.engine, "DCAIFLOW_ENGINE")
    if address and not args.providers:
        client = EngineClient(address)
        run_id = client.start_run(flow.document, inputs, args.idempotency_key)
        out.write(run_id + "\n") if not args.watch else None
        if not args.watch:
            return EXIT_OK
        while True:
            run = client.get_status(run_id)
            if run["status"] != "Active":
                return _breakdown(run, out, err)
            time.sleep(args.poll_interval)
    if not args.providers:
        raise UsageError("run needs --engine (or DCAIFLOW_ENGINE) or --providers FILE")
    clock = VirtualClock() if args.virtual else WallClock(args.poll_interval)
    providers = _providers(args.providers, clock)
    store = RunStore(args.runs_dir) if args.runs_dir else RunStore()
    engine = Engine(providers, store, clock)
    run_id = engine.start_run(flow, inputs, args.idempotency_key)
    record = engine.run_to_completion(run_id)
    return _breakdown(record.to_dict(), out, err)


def _providers(path: str, clock) -> dict[str, Any]:
    from dcaiflow.flow.providers import providers_from_doc

    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: providers document must be a JSON object")
    try:
        return providers_from_doc(doc, clock, Path(path).parent)
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise UsageError(f"{path}: bad provider entry: {exc}") from None


def cmd_status(args: argparse.Namespace, out: TextIO) -> int:
    from dcaiflow.flow.server import EngineClient

    run = EngineClient(_engine_address(args)).get_status(args.run_id)
    out.write(json.dumps(run, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_cancel(args: argparse.Namespace, out: TextIO) -> int:
    from dcaiflow.flow.server import EngineClient

    ack = EngineClient(_engine_address(args)).cancel(args.run_id)
    out.write(json.dumps({k: ack[k] for k in ("run_id", "status", "noop")}, sort_keys=True) + "\n")
    return EXIT_OK


def _engine_address(args: argparse.Namespace) -> str:
    address = _setting(args.engine, "DCAIFLOW_ENGINE")
    if not address:
        raise UsageError("no engine address: pass --engine or set DCAIFLOW_ENGINE")
    return address


# --- endpoints -------------------------------------------------------------------------


def _endpoint_client(args: argparse.Namespace):
    from dcaiflow.faas import EndpointClient

    address = _setting(args.endpoint, "DCAIFLOW_ENDPOINT")
    if not address:
        raise UsageError("no endpoint address: pass --endpoint or set DCAIFLOW_ENDPOINT")
    return EndpointClient(address)


def cmd_register(args: argparse.Namespace, out: TextIO) -> int:
    body = _read_json(args.body)
    if not isinstance(body, dict):
        raise UsageError("a function body must be a JSON object")
    out.write(_endpoint_client(args).register(body, args.name) + "\n")
    return EXIT_OK


def cmd_invoke(args: argparse.Namespace, out: TextIO) -> int:
    fn_args: dict[str, Any] = _read_json(args.args) if args.args else {}
    for item in args.arg or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--arg expects key=value, got {item!r}")
        fn_args[key] = value
    client = _endpoint_client(args)
    task_id = client.invoke(args.function, fn_args, args.idempotency_key)
    if not args.wait:
        out.write(task_id + "\n")
        return EXIT_OK
    while True:
        task = client.poll(task_id)
        if task.state.value in ("Done", "Error"):
            out.write(json.dumps(task.to_doc(), sort_keys=True) + "\n")
            return EXIT_OK if task.state.value == "Done" else EXIT_FAILED
        time.sleep(args.poll_interval)


# --- transfers ---------------------------------------------------------------------------


def cmd_transfer(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    from dcaiflow.transfer import LocalEndpoint, RemoteEndpoint, TransferOutcome, TransferService, TransferSpec, report_csv
    from dcaiflow.transfer.spec import bench_row

    if args.source:
        src_ep: Any = RemoteEndpoint(args.source)
        paths = list(args.src)
    else:
        src_ep, paths = _local_source(args.src)
    dst_root = Path(args.dst)
    dst_root.mkdir(parents=True, exist_ok=True)
    service = TransferService({"src": src_ep, "dst": LocalEndpoint(dst_root)}, digest=args.digest)
    spec = TransferSpec("src", tuple(paths), "dst", cc=args.cc, chunk_bytes=args.chunk_bytes, verify=not args.no_verify)
    report = service.wait(service.submit(spec))
    out.write(report_csv([bench_row(report)]))
    for f in report.files:
        line = f"{f.state.value} {f.src} -> {f.dst} bytes={f.bytes} retries={f.retries} digest={f.dst_checksum or ''}"
        err.write(line + (f" error={f.error}" if f.error else "") + "\n")
    err.write(f"transfer {report.transfer_id} {report.outcome.value}\n")
    return EXIT_OK if report.outcome is TransferOutcome.SUCCEEDED else EXIT_FAILED


def _local_source(sources: Sequence[str]):
    """A single directory is copied as a tree; loose files keep their names."""
    from dcaiflow.transfer import LocalEndpoint

    if len(sources) == 1 and Path(sources[0]).is_dir():
        root = Path(sources[0])
        files = sorted(f for f in root.rglob("*") if f.is_file() and not f.is_symlink())
        return LocalEndpoint(root), [f.relative_to(root).as_posix() for f in files]
    files = [Path(s).resolve() for s in sources]
    for f in files:
        if not f.is_file():
            raise UsageError(f"{f}: not a regular file")
    names = [f.name for f in files]
    if len(set(names)) != len(names):
        raise UsageError("loose source files must have distinct names")
    parents = {f.parent for f in files}
    if len(parents) != 1:
        raise UsageError("loose source files must share one directory; pass a directory instead")
    return LocalEndpoint(parents.pop()), names


def cmd_bench(args: argparse.Namespace, out: TextIO) -> int:
    from dcaiflow.transfer import SimLink, benchmark, report_csv

    try:
        cc_values = [int(c) for c in args.cc_list.split(",") if c.strip()]
    except ValueError:
        raise UsageError(f"--cc-list expects integers, got {args.cc_list!r}") from None
    if not cc_values or min(cc_values) < 1:
        raise UsageError("--cc-list needs at least one cc >= 1")
    link = SimLink(args.per_stream_bps, args.aggregate_bps, args.startup_s)
    rows = benchmark(link, cc_values, files=args.files, file_bytes=args.file_bytes)
    out.write(report_csv(rows))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, out: TextIO) -> int:
    from dcaiflow.simnet import load_scenario, run_scenario

    timeline = run_scenario(load_scenario(args.scenario))
    if args.timeline:
        Path(args.timeline).write_text(timeline.jsonl())
    out.write(timeline.breakdown_csv())
    return EXIT_OK if all(r.status.value == "Succeeded" for r in timeline.runs) else EXIT_FAILED


# --- daemons ---------------------------------------------------------------------------------


def _serve_forever(what: str, address: str, err: TextIO, stop) -> int:
    err.write(f"{what} listening on {address}\n")
    err.flush()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        return EXIT_OK
    finally:
        stop()


def cmd_serve(args: argparse.Namespace, out: TextIO, err: TextIO) -> int:
    if args.daemon == "engine":
        from dcaiflow.flow import Engine, RunStore
        from dcaiflow.flow.server import EngineServer
        from dcaiflow.timebase import WallClock

        clock = WallClock()
        providers = _providers(args.providers, clock) if args.providers else {}
        engine = Engine(providers, RunStore(args.runs_dir), clock)
        server = EngineServer(engine, args.listen).start()
        return _serve_forever("engine", server.address, err, server.stop)
    if args.daemon == "endpoint":
        from dcaiflow.faas import FunctionEndpoint, load_endpoint_config, serve_endpoint

        cfg = load_endpoint_config(args.config)
        if cfg.mode == "simulated":
            log.info("simulated endpoint: duration bodies sleep in wall-clock time")
        ep = FunctionEndpoint(cfg.endpoint_id, site=cfg.site, capacity=cfg.capacity, registry_path=cfg.registry, mode=cfg.mode)
        server = serve_endpoint(ep, args.listen or cfg.listen)
        return _serve_forever(f"endpoint {cfg.endpoint_id}", server.address, err, server.stop)
    from dcaiflow.transfer import LocalEndpoint, TransferDaemon

    daemon = TransferDaemon(LocalEndpoint(args.root), args.listen).start()
    return _serve_forever("transfer daemon", daemon.address, err, daemon.stop)


# --- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcaiflow", description="Plan, run and simulate remote-training workflows.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="cost conventional vs. surrogate processing")
    p.add_argument("--config", help="key/value cost config (env DCAIFLOW_PLAN_CONFIG)")
    p.add_argument("--preset", choices=["hedm"], help="use a built-in config")
    p.add_argument("--n", help="number of data N (env DCAIFLOW_N)")
    p.add_argument("--p", help="training fraction p (env DCAIFLOW_P)")
    p.add_argument("--sweep", metavar="START:STOP:COUNT", help="emit n,conventional_s,surrogate_s CSV")

    r = sub.add_parser("run", help="start a flow run")
    r.add_argument("flow", help="flow definition JSON")
    r.add_argument("args", nargs="?", help="argument document JSON")
    r.add_argument("--engine", help="engine address host:port (env DCAIFLOW_ENGINE)")
    r.add_argument("--providers", help="run in-process with providers from this JSON file")
    r.add_argument("--virtual", action="store_true", help="in-process run on a virtual clock")
    r.add_argument("--watch", action="store_true", help="wait for the run and print its breakdown")
    r.add_argument("--runs-dir", help="persist run logs here (in-process runs)")
    r.add_argument("--idempotency-key")
    r.add_argument("--poll-interval", type=float, default=0.05)

    for name in ("status", "cancel"):
        s = sub.add_parser(name, help=f"{name} a run on an engine")
        s.add_argument("run_id")
        s.add_argument("--engine")

    g = sub.add_parser("register", help="register a function body on an endpoint")
    g.add_argument("body", help="body JSON: {command, cwd?, outputs?} or {duration_s}")
    g.add_argument("--name")
    g.add_argument("--endpoint", help="endpoint address (env DCAIFLOW_ENDPOINT)")

    i = sub.add_parser("invoke", help="invoke a registered function")
    i.add_argument("function", help="function id or name")
    i.add_argument("--args", help="arguments JSON file")
    i.add_argument("--arg", action="append", metavar="KEY=VALUE")
    i.add_argument("--endpoint")
    i.add_argument("--idempotency-key")
    i.add_argument("--wait", action="store_true")
    i.add_argument("--poll-interval", type=float, default=0.05)

    t = sub.add_parser("transfer", help="copy files with parallel verified streams")
    t.add_argument("src", nargs="+", help="source files or directory (paths on --source when remote)")
    t.add_argument("dst", help="destination directory")
    t.add_argument("--source", metavar="ADDR", help="pull from a transfer daemon at ADDR")
    t.add_argument("--cc", type=int, help="concurrent streams (default min(files, 8))")
    t.add_argument("--chunk-bytes", type=int, default=4 * 1024 * 1024)
    t.add_argument("--digest", default="sha256")
    t.add_argument("--no-verify", action="store_true")

    b = sub.add_parser("bench", help="throughput vs. concurrency on a simulated capped link")
    b.add_argument("--cc-list", default="1,2,4,8")
    b.add_argument("--per-stream-bps", type=float, default=300e6)
    b.add_argument("--aggregate-bps", type=float, default=1e9)
    b.add_argument("--startup-s", type=float, default=0.0)
    b.add_argument("--files", type=int, default=8)
    b.add_argument("--file-bytes", type=int, default=128 * 1024 * 1024)

    m = sub.add_parser("simulate", help="run a scenario in virtual time")
    m.add_argument("scenario")
    m.add_argument("--timeline", help="write line-delimited timeline events here")

    d = sub.add_parser("serve", help="run a daemon")
    dsub = d.add_subparsers(dest="daemon", required=True, parser_class=_Parser)
    de = dsub.add_parser("engine")
    de.add_argument("--providers")
    de.add_argument("--runs-dir", required=True)
    de.add_argument("--listen", default="127.0.0.1:7000")
    dp = dsub.add_parser("endpoint")
    dp.add_argument("--config", required=True)
    dp.add_argument("--listen")
    dt = dsub.add_parser("transfer")
    dt.add_argument("--root", required=True)
    dt.add_argument("--listen", default="127.0.0.1:7020")
    return parser


def main(argv: Sequence[str] | None = None, out: TextIO | None = None, err: TextIO | None = None) -> int:
    from dcaiflow.faas.endpoint import EndpointError
    from dcaiflow.flow.definition import FlowParseError
    from dcaiflow.flow.engine import EngineError, MissingInput, UnknownProvider
    from dcaiflow.simnet.scenario import ScenarioError
    from dcaiflow.transfer.spec import TransferError
    from dcaiflow.wire import RemoteError

    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and parse errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=err)
    handlers = {
        "plan": lambda: cmd_plan(args, out),
        "run": lambda: cmd_run(args, out, err),
        "status": lambda: cmd_status(args, out),
        "cancel": lambda: cmd_cancel(args, out),
        "register": lambda: cmd_register(args, out),
        "invoke": lambda: cmd_invoke(args, out),
        "transfer": lambda: cmd_transfer(args, out, err),
        "bench": lambda: cmd_bench(args, out),
        "simulate": lambda: cmd_simulate(args, out),
        "serve": lambda: cmd_serve(args, out, err),
    }
    try:
        return handlers[args.command]()
    except (UsageError, ConfigError, FlowParseError, ScenarioError, ParameterError, MissingInput, UnknownProvider) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USAGE
    except FileNotFoundError as exc:
        err.write(f"error: no such file: {exc.filename}\n")
        err.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (PlanUnavailable, NoPlanAvailable, MissingCostError, EngineError, EndpointError, TransferError, RemoteError, OSError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
