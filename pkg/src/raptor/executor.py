"""Per-function subprocess supervision.

Each task runs in its own session (hence its own process group) with a fresh
working directory. The child reads one JSON document from fd 3 and writes one
to fd 4. Anything other than a clean exit with a well-formed document turns
into a null output flagged as failed.
"""

from __future__ import annotations

import enum
import errno
import fcntl
import json
import logging
import os
import re
import select
import shutil
import signal
import sys
import tempfile
import threading
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .context import ExecutionContext
from .errors import AlreadyExited, CleanupFailure, MissingEntrypoint, SpawnFailure
from .manifest import FunctionEntry

log = logging.getLogger(__name__)

INPUT_FD = 3
OUTPUT_FD = 4
_POLL = 0.005

DEFAULT_INTERPRETERS: dict[str, tuple[str, ...]] = {
    "python": (sys.executable,),
    "python3": (sys.executable,),
    "sh": ("/bin/sh",),
    "bash": ("/bin/bash",),
    "node": ("node",),
    "nodejs": ("node",),
    "lua": ("lua",),
    "binary": (),
}

# cd into the workdir, then replace the shell with the runtime (same pid)
_TRAMPOLINE = 'cd "$RAPTOR_WORKDIR" || exit 126; exec "$@"'


@dataclass
class ExecutorConfig:
    term_to_kill_delay: float = 2.0
    niceness: int | None = None
    workdir_root: Path = field(default_factory=lambda: Path(tempfile.gettempdir()) / "raptor-work")
    runtime: str = "python"
    interpreters: Mapping[str, Sequence[str]] = field(default_factory=lambda: dict(DEFAULT_INTERPRETERS))

    def __post_init__(self) -> None:
        self.workdir_root = Path(self.workdir_root)
        if self.term_to_kill_delay <= 0:
            raise ValueError("term_to_kill_delay must be positive")


class ProcState(enum.Enum):
    SPAWNED = "spawned"
    EXITED = "exited"
    SIGNALED = "signaled"
    KILLED = "killed"


class TaskProcess:
    """Handle on one running task. Transitions are serialized by ``_lock``."""

    def __init__(self, task: str, pid: int, workdir: Path, out_fd: int, activation_id: str):
        self.task = task
        self.pid = pid
        self.pgid = pid
        self.workdir = workdir
        self.activation_id = activation_id
        self.started_at = time.monotonic()
        self.state = ProcState.SPAWNED
        self.exit_code: int | None = None
        self.wait_status: int | None = None
        self.preempt_requested = False
        self._out_fd = out_fd
        self._lock = threading.RLock()
        self._reaped = False

    def __repr__(self) -> str:
        return f"TaskProcess({self.task!r}, pid={self.pid}, state={self.state.value})"

    @property
    def terminal(self) -> bool:
        return self.state is not ProcState.SPAWNED

    def poll(self) -> bool:
        """True once the child has exited; reaps it after sweeping its group."""
        with self._lock:
            if self._reaped:
                return True
            try:
                info = os.waitid(os.P_PID, self.pid, os.WEXITED | os.WNOHANG | os.WNOWAIT)
            except ChildProcessError:
                info = None
                self._reaped = True
            if info is None and not self._reaped:
                return False
            # the zombie still pins the group id, so this cannot hit a stranger
            _killpg(self.pgid, signal.SIGKILL)
            if not self._reaped:
                _, status = os.waitpid(self.pid, 0)
                self.wait_status = status
                self._reaped = True
                code = os.waitstatus_to_exitcode(status)
                self.exit_code = code
                if self.state is ProcState.SPAWNED and not self.preempt_requested:
                    self.state = ProcState.EXITED
            return True

    def wait(self, timeout: float | None = None) -> bool:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self.poll():
            if deadline is not None and time.monotonic() >= deadline:
                return False
            time.sleep(_POLL)
        return True


def _killpg(pgid: int, sig: int) -> bool:
    try:
        os.killpg(pgid, sig)
        return True
    except (ProcessLookupError, PermissionError):
        return False


def _high_fd(fd: int) -> int:
    """Duplicate ``fd`` above 10 so the child's dup2 onto 3/4 cannot clobber it."""
    hi = fcntl.fcntl(fd, fcntl.F_DUPFD_CLOEXEC, 10)
    os.close(fd)
    return hi


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)[:80] or "task"


def _write_all(fd: int, data: bytes) -> None:
    try:
        view = memoryview(data)
        while view:
            n = os.write(fd, view)
            view = view[n:]
    except BrokenPipeError:
        log.info("task closed its input early")
    except OSError as exc:
        log.warning("writing task input failed: %s", exc)
    finally:
        os.close(fd)


def spawn_task(
    entry: FunctionEntry,
    input_doc: Any,
    ctx: ExecutionContext,
    cfg: ExecutorConfig,
    code_root: str | Path,
    runtime: str | None = None,
    extra_env: Mapping[str, str] | None = None,
) -> TaskProcess:
    code_root = Path(code_root)
    path = (code_root / entry.location).resolve()
    if not path.is_file() or code_root.resolve() not in path.parents:
        raise MissingEntrypoint(f"{entry.name}: no file at {entry.location}")
    runtime = runtime or cfg.runtime
    if runtime not in cfg.interpreters:
        raise SpawnFailure(f"unknown runtime {runtime!r}")
    argv_tail = [*cfg.interpreters[runtime], str(path)]

    base = cfg.workdir_root / _safe(ctx.member_id)
    base.mkdir(parents=True, exist_ok=True)
    workdir = Path(tempfile.mkdtemp(prefix=_safe(entry.name) + "-", dir=base))

    env = dict(os.environ)
    env.update(extra_env or {})
    env.update({
        "RAPTOR_ACTIVATION_ID": ctx.activation_id,
        "RAPTOR_TASK": entry.name,
        "RAPTOR_WORKDIR": str(workdir),
        "RAPTOR_OFFSET": str(ctx.offset),
    })

    in_r, in_w = os.pipe()
    out_r, out_w = os.pipe()
    in_r, out_w = _high_fd(in_r), _high_fd(out_w)
    actions = [
        (os.POSIX_SPAWN_OPEN, 0, os.devnull, os.O_RDONLY, 0),
        (os.POSIX_SPAWN_DUP2, 2, 1),
        (os.POSIX_SPAWN_DUP2, in_r, INPUT_FD),
        (os.POSIX_SPAWN_DUP2, out_w, OUTPUT_FD),
    ]
    argv = ["/bin/sh", "-c", _TRAMPOLINE, "raptor-task", *argv_tail]
    try:
        pid = os.posix_spawn("/bin/sh", argv, env, file_actions=actions, setsid=True)
    except OSError as exc:
        for fd in (in_r, in_w, out_r, out_w):
            os.close(fd)
        shutil.rmtree(workdir, ignore_errors=True)
        raise SpawnFailure(f"{entry.name}: {exc}") from exc
    os.close(in_r)
    os.close(out_w)

    proc = TaskProcess(entry.name, pid, workdir, out_r, ctx.activation_id)
    if cfg.niceness:
        try:
            os.setpriority(os.PRIO_PROCESS, pid, os.getpriority(os.PRIO_PROCESS, 0) + cfg.niceness)
        except OSError as exc:
            log.info("could not renice %s: %s", entry.name, exc)

    payload = json.dumps(input_doc).encode()
    if len(payload) < 32 * 1024:
        _write_all(in_w, payload)
    else:
        threading.Thread(target=_write_all, args=(in_w, payload), daemon=True).start()
    return proc


def preempt(p: TaskProcess, cfg: ExecutorConfig) -> ProcState:
    """SIGTERM the task's group, then SIGKILL it if still alive after the delay."""
    with p._lock:
        if p.terminal or p.poll():
            raise AlreadyExited(p.task)
        p.preempt_requested = True
        _killpg(p.pgid, signal.SIGTERM)
    if p.wait(cfg.term_to_kill_delay):
        final = ProcState.SIGNALED
    else:
        _killpg(p.pgid, signal.SIGKILL)
        p.wait()
        final = ProcState.KILLED
    with p._lock:
        p.state = final
    cleanup_workdir(p)
    return final


def _read_output(p: TaskProcess, deadline: float | None) -> bytes | None:
    """Everything the child wrote to fd 4, or None if the deadline passed."""
    chunks = []
    fd = p._out_fd
    try:
        while True:
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
                if not ready:
                    continue
            chunk = os.read(fd, 65536)
            if not chunk:
                return b"".join(chunks)
            chunks.append(chunk)
    except OSError as exc:
        if exc.errno in (errno.EBADF,):
            return b"".join(chunks)
        raise


def collect_result(p: TaskProcess, timeout: float | None = None,
                   cfg: ExecutorConfig | None = None) -> tuple[Any, bool]:
    """Wait for the task and map its outcome onto ``(output, failed)``.

    ``timeout`` is the activation watchdog: a task still running when it
    expires is preempted and reported as failed.
    """
    deadline = None if timeout is None else time.monotonic() + timeout
    try:
        raw = _read_output(p, deadline)
        if raw is None or not p.wait(None if deadline is None else max(deadline - time.monotonic(), 0.0)):
            log.warning("task %s hit the watchdog", p.task)
            try:
                preempt(p, cfg or ExecutorConfig())
            except AlreadyExited:
                pass
            return None, True
    finally:
        try:
            os.close(p._out_fd)
        except OSError:
            pass
    cleanup_workdir(p)
    if p.state is not ProcState.EXITED or p.exit_code != 0:
        return None, True
    try:
        return json.loads(raw), False
    except (ValueError, UnicodeDecodeError):
        log.info("task %s wrote a malformed output document", p.task)
        return None, True


def cleanup_workdir(p: TaskProcess) -> bool:
    """Remove the task's working directory. Never raises; False if it survives."""
    if not p.workdir.exists():
        return True
    for attempt in (1, 2):
        try:
            shutil.rmtree(p.workdir)
            return True
        except FileNotFoundError:
            return True
        except OSError as exc:
            err = CleanupFailure(f"{p.workdir}: {exc}")
            log.warning("cleanup attempt %d failed: %s", attempt, err)
            if attempt == 1:
                # a straggler in the group may still be writing
                _killpg(p.pgid, signal.SIGKILL)
                time.sleep(_POLL)
    return False


def remove_activation_root(cfg: ExecutorConfig, ctx: ExecutionContext) -> None:
    shutil.rmtree(cfg.workdir_root / _safe(ctx.member_id), ignore_errors=True)
