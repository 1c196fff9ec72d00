from __future__ import annotations

import base64
import io
import json
import os
import threading
import time
import urllib.request
import zipfile
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any

import pytest

from raptor.executor import ExecutorConfig
from raptor.proxy import ProxyConfig, RaptorService

# A task body: read the input document from fd 3, leave a marker per
# execution in value["marks"], optionally sleep, then write to fd 4.
TASK_TEMPLATE = """\
import json, os, sys, time
doc = json.load(os.fdopen(3))
value = doc["value"] or {{}}
task = doc["task"]
marks = value.get("marks")
if marks:
    open(os.path.join(marks, task + "-" + str(os.getpid()) + "-" + os.environ["RAPTOR_OFFSET"]), "w").close()
time.sleep(value.get("sleep", {{}}).get(task, 0))
if task in value.get("crash", []):
    sys.exit(3)
{body}
os.fdopen(4, "w").write(json.dumps(out))
"""

TABLE1_MANIFEST = {
    "functions": [
        {"name": "function1:main", "location": "f1/main.py", "dependencies": []},
        {"name": "function2:main", "location": "f2/main.py", "dependencies": []},
        {"name": "function3:main", "location": "f3/main.py",
         "dependencies": ["function1:main", "function2:main"]},
    ]
}

TABLE1_BODIES = {
    "f1/main.py": "out = 1",
    "f2/main.py": "out = 2",
    "f3/main.py": "ins = doc['inputs']\nout = {'sum': sum(v for v in ins.values() if v is not None), 'nulls': sorted(k for k, v in ins.items() if v is None)}",
}


def zip_b64(files: dict[str, str]) -> str:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name, text in files.items():
            zf.writestr(name, text)
    return base64.b64encode(buf.getvalue()).decode()


def table1_init() -> dict[str, Any]:
    files = {loc: TASK_TEMPLATE.format(body=body) for loc, body in TABLE1_BODIES.items()}
    return {"value": {"code": zip_b64(files), "binary": True, "manifest": TABLE1_MANIFEST, "runtime": "python:3"}}


def legacy_init() -> dict[str, Any]:
    return {"value": {"code": TASK_TEMPLATE.format(body="out = {'echo': value.get('x')}"), "runtime": "python"}}


def post(url: str, doc: Any, timeout: float = 30.0) -> tuple[int, Any]:
    req = urllib.request.Request(url, data=json.dumps(doc).encode(), method="POST",
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read() or b"null")


def marks_in(d: Path) -> list[str]:
    return sorted(p.name for p in d.iterdir())


class StubController:
    """Records invocations; optionally delays its answer or relays to a proxy's /run."""

    def __init__(self, delay: float = 0.0, relay_to: str | None = None):
        self.requests: list[tuple[float, dict[str, Any]]] = []
        self.delay = delay
        self.relay_to = relay_to
        self.relay_results: list[tuple[int, Any]] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args: Any) -> None:
                pass

            def do_POST(self) -> None:
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                stub.requests.append((time.monotonic(), body))
                if stub.relay_to:
                    threading.Thread(target=stub._relay, args=(body,), daemon=True).start()
                time.sleep(stub.delay)
                data = b'{"activationId": "stub"}'
                self.send_response(202)
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.server.daemon_threads = True
        threading.Thread(target=self.server.serve_forever, daemon=True).start()

    def _relay(self, body: dict[str, Any]) -> None:
        self.relay_results.append(post(self.relay_to + "/run", body))

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}/invoke"

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def make_service(tmp_path):
    started: list[RaptorService] = []

    def make(**kw: Any) -> RaptorService:
        ex = kw.pop("executor", None) or ExecutorConfig(term_to_kill_delay=0.5, workdir_root=tmp_path / "work")
        cfg = ProxyConfig(listen_port=0, peer_port=0, executor=ex, code_root=tmp_path / f"code{len(started)}",
                          activation_timeout=kw.pop("activation_timeout", 20.0), **kw)
        svc = RaptorService(cfg).start()
        started.append(svc)
        return svc

    yield make
    for svc in started:
        svc.stop()


@pytest.fixture
def stub_controller():
    stubs: list[StubController] = []

    def make(**kw: Any) -> StubController:
        s = StubController(**kw)
        stubs.append(s)
        return s

    yield make
    for s in stubs:
        s.close()


def raptor_processes() -> list[int]:
    """Pids of live processes carrying a RAPTOR_ACTIVATION_ID in their environment."""
    found = []
    me = os.getpid()
    for entry in Path("/proc").iterdir():
        if not entry.name.isdigit() or int(entry.name) == me:
            continue
        try:
            env = (entry / "environ").read_bytes()
            stat = (entry / "stat").read_text()
        except OSError:
            continue
        if b"RAPTOR_ACTIVATION_ID=" in env and ") Z" not in stat:
            found.append(int(entry.name))
    return found


@pytest.fixture(autouse=True)
def no_orphans():
    yield
    deadline = time.monotonic() + 3.0
    while raptor_processes() and time.monotonic() < deadline:
        time.sleep(0.05)
    assert raptor_processes() == [], "task processes outlived the test"


# -- acceptance reporting -------------------------------------------------------

_CRITERIA: dict[str, tuple[int, str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = mark.args
    _CRITERIA[item.nodeid] = (number, title, "PASS" if report.passed else "FAIL", report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, verdict, duration in sorted(_CRITERIA.values()):
        terminalreporter.write_line(f"criterion {number:>2}: {verdict}  {title}  ({duration:.2f}s)")
