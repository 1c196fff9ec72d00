"""Command-line entry point: ``raptor {serve,validate,schedule,simulate,sweep,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from collections.abc import Mapping, Sequence
from dataclasses import fields
from pathlib import Path
from typing import Any

from .errors import ConfigError, RaptorError
from .executor import ExecutorConfig
from .listsched import build_schedule
from .manifest import FunctionMask, TaskDag, apply_mask, build_dag, dag_from_edges, parse_manifest, to_dot
from .proxy import ProxyConfig, RaptorService
from .simharness import (
    COMPARE_COLUMNS,
    SimConfig,
    compare_coordinator,
    read_csv,
    run_sim,
    sweep_flight_sizes,
    validate_trace,
    write_csv,
)

log = logging.getLogger("raptor")

ENV_PREFIX = "RAPTOR_"


# -- configuration ------------------------------------------------------------

def load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return doc


def _load_manifest(ref: Any, base: Path):
    if isinstance(ref, Mapping):
        return parse_manifest(ref)
    if isinstance(ref, str):
        p = Path(ref)
        if not p.is_absolute():
            p = base / p
        try:
            return parse_manifest(p.read_bytes())
        except OSError as exc:
            raise ConfigError(f"cannot read manifest {p}: {exc}") from exc
    raise ConfigError("manifest must be a path or an inline document")


def dag_from_config(doc: Mapping[str, Any], base: Path = Path(".")) -> TaskDag:
    """The workflow a simulation config describes.

    One of ``manifest`` (path or inline), ``dag`` (``{"nodes", "edges"}``) or
    ``tasks`` (count of independent tasks), optionally narrowed by ``mask``.
    """
    given = [k for k in ("manifest", "dag", "tasks") if k in doc]
    if len(given) != 1:
        raise ConfigError(f"config needs exactly one of manifest/dag/tasks, got {given or 'none'}")
    if "manifest" in doc:
        dag = build_dag(_load_manifest(doc["manifest"], base))
    elif "dag" in doc:
        graph = doc["dag"]
        try:
            dag = dag_from_edges(graph["nodes"], [tuple(e) for e in graph.get("edges", [])])
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"dag needs nodes and edges: {exc}") from exc
    else:
        n = doc["tasks"]
        if not isinstance(n, int) or n < 1:
            raise ConfigError("tasks must be a positive integer")
        dag = dag_from_edges([f"t{i + 1}" for i in range(n)], [])
    if doc.get("mask"):
        dag = apply_mask(dag, FunctionMask.of(doc["mask"]))
    return dag


_SIM_FIELDS = {f.name for f in fields(SimConfig)} - {"dag"}


def _sim_value(name: str, v: Any) -> Any:
    if name in ("task_duration", "net_latency") and isinstance(v, list):
        return tuple(float(x) for x in v)
    if name in ("fail_tasks", "cold_members") and v is not None:
        return frozenset(v)
    if name == "member_failures":
        return {int(k): float(t) for k, t in v.items()}
    return v


def sim_config_from(doc: Mapping[str, Any], base: Path = Path("."), **overrides: Any) -> SimConfig:
    dag = dag_from_config(doc, base)
    kw = {k: _sim_value(k, v) for k, v in doc.items() if k in _SIM_FIELDS}
    kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SimConfig(dag=dag, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name) or None


def _pick(flag: Any, env: str | None, file_value: Any, default: Any = None) -> Any:
    for v in (flag, env, file_value):
        if v is not None:
            return v
    return default


def _split_listen(value: str) -> tuple[str, int]:
    host, _, port = str(value).rpartition(":")
    if not port.isdigit():
        raise ConfigError(f"listen address {value!r} is not [host]:port")
    return host or "0.0.0.0", int(port)


def proxy_config_from(args: argparse.Namespace, doc: Mapping[str, Any]) -> ProxyConfig:
    serve = doc.get("serve", {})
    ex_doc = dict(doc.get("executor", {}))
    listen = _pick(args.listen, _env("LISTEN"), serve.get("listen"), "127.0.0.1:8080")
    host, port = _split_listen(listen)
    peer_port = int(_pick(args.peer_port, _env("PEER_PORT"), serve.get("peer_port"), 8081))
    controller = _pick(args.controller, _env("CONTROLLER"), serve.get("controller"))
    delay_ms = _pick(args.term_kill_delay_ms, _env("TERM_KILL_DELAY_MS"), ex_doc.pop("term_to_kill_delay_ms", None))
    try:
        if delay_ms is not None:
            ex_doc["term_to_kill_delay"] = float(delay_ms) / 1000.0
        if "workdir_root" in ex_doc:
            ex_doc["workdir_root"] = Path(ex_doc["workdir_root"])
        executor = ExecutorConfig(**ex_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"executor config: {exc}") from exc
    code_root = _pick(args.code_root, None, serve.get("code_root"))
    return ProxyConfig(
        listen_host=host,
        listen_port=port,
        peer_host=host,
        peer_port=peer_port,
        advertise_host=_pick(args.advertise_host, _env("ADVERTISE_HOST"), serve.get("advertise_host")),
        controller=controller,
        executor=executor,
        code_root=Path(code_root) if code_root else None,
        activation_timeout=float(_pick(args.activation_timeout, None, serve.get("activation_timeout"), 60.0)),
        allow_reinit=bool(serve.get("allow_reinit", False)),
        prune_on_peer_error=bool(serve.get("prune_on_peer_error", False)),
    )


# -- subcommands --------------------------------------------------------------

def cmd_serve(args: argparse.Namespace) -> int:
    cfg = proxy_config_from(args, load_config(args.config))
    svc = RaptorService(cfg).start()
    print(f"serving on {svc.url}, peers on {svc.peer_endpoint}", file=sys.stderr, flush=True)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()
    svc.stop()
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    m = parse_manifest(Path(args.manifest).read_bytes())
    dag = build_dag(m)
    print(json.dumps({"manifest_id": m.manifest_id, "functions": list(m.names),
                      "sources": list(dag.sources), "sinks": list(dag.sinks)}))
    return 0


def cmd_schedule(args: argparse.Namespace) -> int:
    dag = build_dag(parse_manifest(Path(args.manifest).read_bytes()))
    if args.mask:
        dag = apply_mask(dag, FunctionMask.of(n.strip() for n in args.mask.split(",") if n.strip()))
    print(" ".join(build_schedule(dag, args.offset).order))
    if args.dot:
        if args.dot == "-":
            print(to_dot(dag), end="")
        else:
            Path(args.dot).write_text(to_dot(dag))
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    doc = load_config(args.config)
    cfg = sim_config_from(doc, Path(args.config).parent, seed=args.seed,
                          flight_size=args.flight_size, failure_prob=args.failure_prob)
    if args.compare:
        rows = compare_coordinator(cfg)
        print(json.dumps([{k: getattr(r, k) for k in COMPARE_COLUMNS} for r in rows], indent=2))
        return 0
    r = run_sim(cfg)
    validate_trace(r)
    print(json.dumps({
        "job_latency_ms": r.job_latency,
        "job_failed": r.job_failed,
        "executions": r.executions_per_task,
        "messages_sent": r.messages_sent,
        "invocations": r.invocations,
        "schedules": {str(o): r.realized_order(o) for o in sorted(r.states)},
        "outputs": r.outputs,
    }, indent=2, default=str))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    doc = load_config(args.config)
    runs = doc.get("runs_per_point")
    if not isinstance(runs, int) or isinstance(runs, bool) or runs < 1:
        raise ConfigError(f"runs_per_point must be a positive integer, got {runs!r}")
    p_values = doc.get("p_values")
    if not isinstance(p_values, list) or not p_values:
        raise ConfigError("p_values must be a non-empty list")
    sizes = doc.get("flight_sizes") or [doc.get("flight_size", 1)]
    cfg = sim_config_from({k: v for k, v in doc.items() if k != "flight_size"}, Path(args.config).parent,
                          seed=args.seed)
    rows = sweep_flight_sizes(cfg, sizes, [float(p) for p in p_values], runs)
    if args.output == "-":
        write_csv(rows, sys.stdout)
    else:
        write_csv(rows, args.output)
        print(f"wrote {len(rows)} rows to {args.output}", file=sys.stderr)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError("report needs matplotlib (pip install 'raptor[plot]')") from exc
    rows = read_csv(args.csv)
    if not rows:
        raise ConfigError(f"{args.csv} has no rows")
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_size: dict[int, list[dict[str, float]]] = {}
    for r in rows:
        by_size.setdefault(int(r["flight_size"]), []).append(r)
    for column, label, name in (("mean_latency_ms", "mean job latency (ms)", "latency.png"),
                                ("failure_rate", "job failure rate", "failure.png")):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for size, rs in sorted(by_size.items()):
            rs = sorted(rs, key=lambda r: r["p"])
            ax.plot([r["p"] for r in rs], [r[column] for r in rs], marker="o", label=f"N={size}")
        ax.set_xlabel("task failure probability p")
        ax.set_ylabel(label)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / name, dpi=120)
        plt.close(fig)
        print(out / name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raptor", description="Flight scheduler for serverless workflows")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the action proxy")
    p.add_argument("--config")
    p.add_argument("--listen", help="[host]:port for /init and /run")
    p.add_argument("--peer-port", type=int)
    p.add_argument("--advertise-host", help="host peers should dial")
    p.add_argument("--controller", help="URL forks are posted to")
    p.add_argument("--term-kill-delay-ms", type=float)
    p.add_argument("--code-root")
    p.add_argument("--activation-timeout", type=float)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("validate", help="check a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("schedule", help="print the list schedule for one offset")
    p.add_argument("manifest")
    p.add_argument("--mask", help="comma-separated function names")
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--dot", help="write the DAG as DOT to this path ('-' for stdout)")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="simulate one activation")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.add_argument("--flight-size", type=int)
    p.add_argument("--failure-prob", type=float)
    p.add_argument("--compare", action="store_true", help="flight versus coordinator launch")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="failure-probability sweep to CSV")
    p.add_argument("config")
    p.add_argument("-o", "--output", default="-")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="plot a sweep CSV")
    p.add_argument("csv")
    p.add_argument("-o", "--output-dir", default=".")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "offset", 0) < 0:
        print("raptor: error: offset must be >= 0", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (RaptorError, OSError, ValueError) as exc:
        print(f"raptor: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
