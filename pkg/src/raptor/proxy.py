"""Action-proxy compatible service.

``POST /init`` takes a code archive (or inline source) plus an action
manifest. ``POST /run`` takes ``{"value": ..., <context fields>}``, runs the
masked DAG as one member of a flight and answers with the sink outputs. A
leader with ``flight_size`` N > 1 first fires N-1 follower requests at the
controller and never looks at the replies.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import logging
import queue
import shutil
import tempfile
import threading
import time
import urllib.request
import uuid
import zipfile
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path, PurePosixPath
from typing import Any

from .context import METADATA_FIELDS, ExecutionContext, infer_context, make_follower_contexts
from .errors import (
    ActivationTimeout,
    AlreadyExited,
    AlreadyInitialized,
    BindFailure,
    ContextError,
    InvalidArchive,
    ManifestError,
    NotInitialized,
)
from .executor import ExecutorConfig, TaskProcess, collect_result, preempt, remove_activation_root, spawn_task
from .flight import Action, FlightMember, Status
from .manifest import ActionManifest, TaskDag, apply_mask, build_dag, parse_manifest
from .transport import NullTransport, PeerHub, TcpTransport

log = logging.getLogger(__name__)

SOURCE_SUFFIX = {"python": ".py", "python3": ".py", "node": ".js", "nodejs": ".js", "lua": ".lua", "sh": ".sh", "bash": ".sh"}


@dataclass
class ProxyConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 8080
    peer_host: str = "127.0.0.1"
    peer_port: int = 8081
    # address peers should dial; defaults to the bound peer host
    advertise_host: str | None = None
    controller: str | None = None
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    code_root: Path | None = None
    activation_timeout: float = 60.0
    peering_timeout: float = 1.0
    fork_timeout: float = 30.0
    allow_reinit: bool = False
    prune_on_peer_error: bool = False


@dataclass
class _Pack:
    manifest: ActionManifest
    dag: TaskDag
    code_root: Path
    runtime: str
    legacy: bool


def fork_followers(
    followers: Sequence[ExecutionContext],
    controller: str,
    value: Any,
    timeout: float = 30.0,
    on_sent: Any = None,
) -> list[threading.Thread]:
    """Fire one invocation per follower at the controller; never wait, never retry."""
    threads = []
    for ctx in followers:
        body = json.dumps({"value": value, **ctx.to_metadata()}).encode()
        t = threading.Thread(
            target=_post_quietly, args=(controller, body, timeout, ctx.offset, on_sent),
            name=f"fork-{ctx.offset}", daemon=True,
        )
        t.start()
        threads.append(t)
    return threads


def _post_quietly(url: str, body: bytes, timeout: float, offset: int, on_sent: Any) -> None:
    req = urllib.request.Request(url, data=body, method="POST", headers={"Content-Type": "application/json"})
    if on_sent is not None:
        on_sent(offset)
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            log.debug("fork %d answered %s", offset, resp.status)
    except Exception as exc:  # fire-and-forget: log only
        log.info("fork %d to %s: %s", offset, url, exc)


def _check_member_name(name: str) -> None:
    p = PurePosixPath(name)
    if p.is_absolute() or ".." in p.parts or "\\" in name:
        raise InvalidArchive(f"archive member {name!r} escapes the code root")


def unpack_archive(data: bytes, dest: Path) -> list[str]:
    try:
        zf = zipfile.ZipFile(io.BytesIO(data))
    except zipfile.BadZipFile as exc:
        raise InvalidArchive(f"not a zip archive: {exc}") from exc
    with zf:
        names = zf.namelist()
        for n in names:
            _check_member_name(n)
        zf.extractall(dest)
    return names


class RaptorService:
    def __init__(self, cfg: ProxyConfig | None = None):
        self.cfg = cfg or ProxyConfig()
        self._pack: _Pack | None = None
        self._init_lock = threading.RLock()
        self._code_base = Path(self.cfg.code_root or tempfile.mkdtemp(prefix="raptor-code-"))
        self._running: set[TaskProcess] = set()
        self._running_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self.stats = {"activations": 0, "spawned": 0, "forks": 0, "peer_messages": 0}
        self.events: deque[tuple[str, str, str, float]] = deque(maxlen=10_000)
        self.hub: PeerHub | None = None
        self.http: ThreadingHTTPServer | None = None
        self._threads: list[threading.Thread] = []

    # -- lifecycle ---------------------------------------------------------
    def start(self) -> RaptorService:
        self.hub = PeerHub(self.cfg.peer_host, self.cfg.peer_port).start()
        try:
            self.http = ThreadingHTTPServer((self.cfg.listen_host, self.cfg.listen_port), _make_handler(self))
        except OSError as exc:
            self.hub.stop()
            raise BindFailure(f"{self.cfg.listen_host}:{self.cfg.listen_port}: {exc}") from exc
        self.http.daemon_threads = True
        t = threading.Thread(target=self.http.serve_forever, name="proxy-http", daemon=True)
        t.start()
        self._threads.append(t)
        if not self.cfg.controller:
            log.warning("no controller configured: flights degrade to leader-only")
        return self

    def stop(self) -> None:
        if self.http is not None:
            self.http.shutdown()
            self.http.server_close()
        with self._running_lock:
            procs = list(self._running)
        stoppers = [threading.Thread(target=self._preempt_quietly, args=(p,)) for p in procs]
        for t in stoppers:
            t.start()
        for t in stoppers:
            t.join()
        if self.hub is not None:
            self.hub.stop()

    @property
    def url(self) -> str:
        assert self.http is not None
        host, port = self.http.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def peer_endpoint(self) -> str:
        assert self.hub is not None
        host, port = self.hub.address
        return f"{self.cfg.advertise_host or host}:{port}"

    def _bump(self, key: str, n: int = 1) -> None:
        with self._stats_lock:
            self.stats[key] += n

    def _event(self, activation: str, kind: str, task: str = "") -> None:
        self.events.append((activation, kind, task, time.monotonic()))

    # -- /init -------------------------------------------------------------
    def handle_init(self, payload: dict[str, Any]) -> dict[str, Any]:
        value = payload.get("value", payload)
        if not isinstance(value, dict):
            raise InvalidArchive("init value must be an object")
        with self._init_lock:
            if self._pack is not None and not self.cfg.allow_reinit:
                raise AlreadyInitialized("cannot initialize the action more than once")
            runtime = str(value.get("runtime") or value.get("kind") or self.cfg.executor.runtime).split(":")[0]
            code = value.get("code")
            if not isinstance(code, str) or not code:
                raise InvalidArchive("init needs a 'code' string")
            root = self._code_base / uuid.uuid4().hex
            root.mkdir(parents=True)
            try:
                pack = self._unpack(value, code, root, runtime)
            except Exception:
                shutil.rmtree(root, ignore_errors=True)
                raise
            self._pack = pack
        return {"ok": True, "manifest_id": pack.manifest.manifest_id, "functions": list(pack.manifest.names)}

    def _unpack(self, value: dict[str, Any], code: str, root: Path, runtime: str) -> _Pack:
        if value.get("binary"):
            try:
                data = base64.b64decode(code, validate=True)
            except (binascii.Error, ValueError) as exc:
                raise InvalidArchive(f"archive is not base64: {exc}") from exc
            names = unpack_archive(data, root)
            default_location = "__main__.py" if "__main__.py" in names else None
        else:
            default_location = "main" + SOURCE_SUFFIX.get(runtime, "")
            (root / default_location).write_text(code)

        raw_manifest = value.get("manifest")
        if raw_manifest is None and (root / "manifest.json").is_file():
            raw_manifest = (root / "manifest.json").read_bytes()
        legacy = raw_manifest is None
        if legacy:
            if default_location is None:
                raise InvalidArchive("archive has neither a manifest nor __main__.py")
            raw_manifest = {"functions": [{"name": "main", "location": default_location, "dependencies": []}]}
        manifest = parse_manifest(raw_manifest if not isinstance(raw_manifest, str) else raw_manifest.encode())
        missing = [e.location for e in manifest.entries if not (root / e.location).is_file()]
        if missing:
            raise InvalidArchive(f"manifest entries missing from the archive: {missing}")
        return _Pack(manifest, build_dag(manifest), root, runtime, legacy)

    # -- /run --------------------------------------------------------------
    def handle_run(self, payload: dict[str, Any]) -> Any:
        with self._init_lock:
            pack = self._pack
        if pack is None:
            raise NotInitialized("cannot invoke an uninitialized action")
        assert self.hub is not None
        value = payload.get("value", {})
        metadata = {k: payload[k] for k in (*METADATA_FIELDS, "activation_id") if payload.get(k) is not None}
        ctx = infer_context(metadata, pack.manifest, self.peer_endpoint)
        dag = apply_mask(pack.dag, ctx.mask)
        self._bump("activations")

        q: queue.Queue[Any] = queue.Queue()
        transport: Any = TcpTransport(self.cfg.peering_timeout)
        if not self.hub.register(ctx.activation_id, q):
            log.warning("activation %s already has a member here; running solo", ctx.activation_id)
            transport = NullTransport()
            q = queue.Queue()
            registered = False
        else:
            registered = True
        member = FlightMember.from_context(ctx, dag, transport, self.peer_endpoint, self.cfg.prune_on_peer_error)
        self._event(ctx.member_id, "received")
        try:
            if ctx.is_leader and ctx.flight_size > 1:
                if self.cfg.controller:
                    fork_followers(make_follower_contexts(ctx), self.cfg.controller, value,
                                   self.cfg.fork_timeout, on_sent=lambda _o: self._bump("forks"))
                else:
                    log.warning("flight_size %d requested but no controller; leader runs alone", ctx.flight_size)
            member.start()
            self._drive(member, ctx, pack, value, q)
        finally:
            if registered:
                self.hub.unregister(ctx.activation_id)
            self._bump("peer_messages", member.messages_sent)
            remove_activation_root(self.cfg.executor, ctx)
        self._event(ctx.member_id, "settled")
        outputs = dict(member.outputs())
        if pack.legacy and len(outputs) == 1:
            return next(iter(outputs.values()))
        return outputs

    def _drive(self, member: FlightMember, ctx: ExecutionContext, pack: _Pack, value: Any,
               q: queue.Queue[Any]) -> None:
        deadline = time.monotonic() + self.cfg.activation_timeout
        running: tuple[str, TaskProcess] | None = None
        next_probe = time.monotonic() + self.cfg.peering_timeout
        try:
            while True:
                if running is None:
                    task = member.next_runnable()
                    if task is not None:
                        running = (task, self._launch(member, ctx, pack, value, task, q))
                if member.is_settled():
                    return
                now = time.monotonic()
                if now >= deadline:
                    raise ActivationTimeout(f"activation {ctx.activation_id} timed out")
                if member.is_complete() and now >= next_probe:
                    # waiting on peers for a null sink; drop the ones that died
                    member.probe()
                    next_probe = now + self.cfg.peering_timeout
                    continue
                try:
                    ev = q.get(timeout=min(deadline - now, self.cfg.peering_timeout))
                except queue.Empty:
                    continue
                if ev[0] == "msg":
                    action = member.deliver(ev[1])
                    if action is Action.TERMINATE_RUNNING and running is not None and running[0] == ev[1].task:
                        self._event(ctx.member_id, "terminate", running[0])
                        threading.Thread(target=self._preempt_quietly, args=(running[1],), daemon=True).start()
                        running = None
                    elif action is Action.REMOVE_FROM_LIST:
                        self._event(ctx.member_id, "preempt", ev[1].task)
                elif ev[0] == "done":
                    _, task, proc, result, failed = ev
                    if running is not None and running[1] is proc:
                        running = None
                    if member.state.status.get(task) is Status.RUNNING:
                        member.complete(task, result, failed)
                        self._event(ctx.member_id, "fail" if failed else "done", task)
        finally:
            if running is not None:
                self._preempt_quietly(running[1])

    def _launch(self, member: FlightMember, ctx: ExecutionContext, pack: _Pack, value: Any, task: str,
                q: queue.Queue[Any]) -> TaskProcess:
        inputs = member.start_task(task)
        doc = {"value": value, "inputs": inputs, "task": task, "activation_id": ctx.activation_id}
        entry = pack.manifest.entry(task)
        self._event(ctx.member_id, "start", task)
        try:
            proc = spawn_task(entry, doc, ctx, self.cfg.executor, pack.code_root, pack.runtime)
        except Exception as exc:
            log.warning("spawning %s failed: %s", task, exc)
            dead = _DeadProcess(task)
            q.put(("done", task, dead, None, True))
            return dead  # type: ignore[return-value]
        self._bump("spawned")
        with self._running_lock:
            self._running.add(proc)

        def watch() -> None:
            try:
                result, failed = collect_result(proc, self.cfg.activation_timeout, self.cfg.executor)
            except Exception as exc:
                log.warning("collecting %s failed: %s", task, exc)
                result, failed = None, True
            with self._running_lock:
                self._running.discard(proc)
            q.put(("done", task, proc, result, failed))

        threading.Thread(target=watch, name=f"watch-{task}", daemon=True).start()
        return proc

    def _preempt_quietly(self, proc: TaskProcess) -> None:
        if isinstance(proc, _DeadProcess):
            return
        try:
            preempt(proc, self.cfg.executor)
        except AlreadyExited:
            pass
        except Exception as exc:
            log.warning("preempting %s failed: %s", proc.task, exc)


class _DeadProcess:
    """Placeholder for a task whose spawn failed; its 'done' event is already queued."""

    def __init__(self, task: str):
        self.task = task


def _make_handler(service: RaptorService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:
            log.debug("%s " + fmt, self.address_string(), *args)

        def _reply(self, status: int, body: Any) -> None:
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict[str, Any] | None:
            n = int(self.headers.get("Content-Length") or 0)
            try:
                doc = json.loads(self.rfile.read(n) or b"{}")
            except ValueError:
                return None
            return doc if isinstance(doc, dict) else None

        def do_GET(self) -> None:
            if self.path == "/stats":
                self._reply(HTTPStatus.OK, dict(service.stats))
            else:
                self._reply(HTTPStatus.NOT_FOUND, {"error": "not found"})

        def do_POST(self) -> None:
            body = self._body()
            if body is None:
                self._reply(HTTPStatus.BAD_REQUEST, {"error": "request body must be a JSON object"})
                return
            try:
                if self.path == "/init":
                    self._reply(HTTPStatus.OK, service.handle_init(body))
                elif self.path == "/run":
                    self._reply(HTTPStatus.OK, service.handle_run(body))
                else:
                    self._reply(HTTPStatus.NOT_FOUND, {"error": "not found"})
            except AlreadyInitialized as exc:
                self._reply(HTTPStatus.FORBIDDEN, {"error": str(exc)})
            except (InvalidArchive, ManifestError, ContextError) as exc:
                self._reply(HTTPStatus.BAD_REQUEST, {"error": f"{type(exc).__name__}: {exc}"})
            except (NotInitialized, ActivationTimeout) as exc:
                self._reply(HTTPStatus.BAD_GATEWAY, {"error": f"{type(exc).__name__}: {exc}"})
            except Exception as exc:  # noqa: BLE001 - the proxy must always answer
                log.exception("unhandled error on %s", self.path)
                self._reply(HTTPStatus.INTERNAL_SERVER_ERROR, {"error": f"{type(exc).__name__}: {exc}"})

    return Handler
