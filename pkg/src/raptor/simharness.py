"""Deterministic discrete-event simulation of flights.

Runs the production :class:`~raptor.flight.FlightMember` engines over an
in-memory transport and a virtual clock. Configuration is in milliseconds;
internally time is integer microseconds so latency caps compare exactly.

At equal timestamps events are ordered: crashes, then starts and task
completions, then message deliveries, then scheduling decisions. A member
therefore sees every zero-latency update before it picks its next task.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
import random
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, TextIO, Union

from .context import ExecutionContext, make_follower_contexts
from .flight import (
    Action,
    FlightMember,
    FlightState,
    Message,
    TERMINAL,
    is_job_complete,
    is_job_settled,
    job_failed,
    realized_flight_size,
)
from .listsched import build_schedule
from .manifest import FunctionMask, TaskDag

Duration = Union[float, tuple[float, float]]
TaskDuration = Union[float, tuple[float, float], Mapping[str, float]]

_CRASH, _EVENT, _DELIVER, _DISPATCH = -1, 0, 1, 2


@dataclass(frozen=True)
class SimConfig:
    """One simulated activation. Times are milliseconds.

    ``task_duration`` and ``net_latency`` are either fixed values or
    ``(low, high)`` uniform ranges; ``task_duration`` may also map task
    names to fixed durations. ``failure_correlation`` is the chance that a
    replica's attempt reuses the outcome of the first attempt at the same
    task instead of drawing its own. ``member_failures`` maps member offsets
    to the virtual time at which that scheduler crashes.
    """

    dag: TaskDag
    flight_size: int = 1
    task_duration: TaskDuration = 100.0
    net_latency: Duration = 0.0
    failure_prob: float = 0.0
    failure_correlation: float = 0.0
    fail_tasks: frozenset[str] = frozenset()
    cold_start_latency: float = 0.0
    cold_members: frozenset[int] | None = None
    invoke_latency: float = 0.0
    coordinator_mode: bool = False
    member_failures: Mapping[int, float] = field(default_factory=dict)
    prune_on_peer_error: bool = False
    seed: int = 0
    record_trace: bool = True

    def __post_init__(self) -> None:
        if self.flight_size < 1:
            raise ValueError("flight_size must be >= 1")
        if not 0.0 <= self.failure_prob <= 1.0:
            raise ValueError("failure_prob must lie in [0, 1]")
        if not 0.0 <= self.failure_correlation <= 1.0:
            raise ValueError("failure_correlation must lie in [0, 1]")
        for name, value in (
            ("cold_start_latency", self.cold_start_latency),
            ("invoke_latency", self.invoke_latency),
            ("net_latency", self.net_latency),
            ("task_duration", self.task_duration),
        ):
            if _min_value(value) < 0:
                raise ValueError(f"{name} must be non-negative")
        unknown = set(self.fail_tasks) - set(self.dag.nodes)
        if unknown:
            raise ValueError(f"fail_tasks names unknown tasks {sorted(unknown)}")

    @property
    def max_net_latency(self) -> float:
        return _max_value(self.net_latency)


def _min_value(v: Any) -> float:
    if isinstance(v, Mapping):
        return min(v.values(), default=0.0)
    if isinstance(v, tuple):
        return min(v)
    return v


def _max_value(v: Any) -> float:
    if isinstance(v, Mapping):
        return max(v.values(), default=0.0)
    if isinstance(v, tuple):
        return max(v)
    return v


def _us(ms: float) -> int:
    return int(round(ms * 1000))


@dataclass
class SimResult:
    job_latency: float
    job_failed: bool
    executions_per_task: dict[str, int]
    messages_sent: int
    trace: list[tuple[float, int, str, str]]
    invocations: int
    outputs: dict[str, Any]
    states: dict[int, FlightState]
    crashed: frozenset[int]
    launched: frozenset[int]
    settle_times: dict[int, float]

    @property
    def total_executions(self) -> int:
        return sum(self.executions_per_task.values())

    def realized_order(self, offset: int) -> list[str]:
        return list(self.states[offset].started)


class _Member:
    __slots__ = ("engine", "offset", "alive", "started", "busy", "attempt", "inbox",
                 "dispatch_pending", "complete_at", "settled_at")

    def __init__(self, engine: FlightMember):
        self.engine = engine
        self.offset = engine.offset
        self.alive = True
        self.started = False
        self.busy = False
        self.attempt = 0
        self.inbox: list[Message] = []
        self.dispatch_pending = False
        self.complete_at: int | None = None
        self.settled_at: int | None = None


class _SimPort:
    """In-memory transport owned by one member."""

    def __init__(self, sim: _Simulation, owner: int):
        self.sim = sim
        self.owner = owner

    def send(self, endpoint: str, message: Message) -> bool:
        return self.sim.send(self.owner, endpoint, message)

    def reachable(self, endpoint: str) -> bool:
        m = self.sim.by_endpoint.get(endpoint)
        return m is not None and m.alive


def _endpoint(offset: int) -> str:
    return f"sim/{offset}"


class _Simulation:
    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.now = 0
        self.seq = 0
        self.heap: list[tuple[int, int, int, str, int, Any]] = []
        self.members: dict[int, _Member] = {}
        self.by_endpoint: dict[str, _Member] = {}
        self.executions = {t: 0 for t in cfg.dag.nodes}
        self.first_outcome: dict[str, bool] = {}
        self.trace: list[tuple[float, int, str, str]] = []
        self.record = cfg.record_trace
        self.invocations = 0
        self.crashed: set[int] = set()
        self.launched: set[int] = set()

        mask = FunctionMask.of(cfg.dag.nodes)
        leader_ctx = ExecutionContext(
            offset=0,
            mask=mask,
            flight_size=cfg.flight_size,
            leader_address=_endpoint(0),
            activation_id=f"sim-{cfg.seed}",
            local_address=_endpoint(0),
        )
        self.contexts = [leader_ctx] + [
            replace(c, local_address=_endpoint(c.offset)) for c in make_follower_contexts(leader_ctx)
        ]

    # -- helpers ---------------------------------------------------------
    def log(self, offset: int, event: str, detail: str = "") -> None:
        if self.record:
            self.trace.append((self.now / 1000.0, offset, event, detail))

    def push(self, time: int, cls: int, kind: str, member: int, data: Any = None) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (time, cls, self.seq, kind, member, data))

    def sample(self, v: Duration) -> int:
        if isinstance(v, tuple):
            return _us(self.rng.uniform(v[0], v[1]))
        return _us(v)

    def task_duration(self, task: str) -> int:
        v = self.cfg.task_duration
        if isinstance(v, Mapping):
            return _us(v[task])
        return self.sample(v)

    def is_cold(self, offset: int) -> bool:
        cold = self.cfg.cold_members
        return cold is None or offset in cold

    def cold_delay(self, offset: int) -> int:
        return _us(self.cfg.cold_start_latency) if self.is_cold(offset) else 0

    def attempt_fails(self, task: str) -> bool:
        if task in self.cfg.fail_tasks:
            return True
        p = self.cfg.failure_prob
        if p <= 0.0:
            return False
        first = self.first_outcome.get(task)
        if first is not None and self.cfg.failure_correlation > 0.0 and self.rng.random() < self.cfg.failure_correlation:
            return first
        fails = p >= 1.0 or self.rng.random() < p
        if first is None:
            self.first_outcome[task] = fails
        return fails

    # -- transport -------------------------------------------------------
    def send(self, owner: int, endpoint: str, msg: Message) -> bool:
        dest = self.by_endpoint.get(endpoint)
        if dest is None or not dest.alive:
            return False
        self.push(self.now + self.sample(self.cfg.net_latency), _DELIVER, "deliver", dest.offset, msg)
        return True

    # -- lifecycle -------------------------------------------------------
    def launch(self, offset: int, at: int) -> None:
        if offset in self.members:
            return
        ctx = self.contexts[offset]
        engine = FlightMember.from_context(
            ctx, self.cfg.dag, _SimPort(self, offset), _endpoint(offset), self.cfg.prune_on_peer_error
        )
        m = _Member(engine)
        self.members[offset] = m
        self.by_endpoint[_endpoint(offset)] = m
        self.launched.add(offset)
        self.invocations += 1
        self.push(at, _EVENT, "start", offset)

    def schedule_dispatch(self, m: _Member) -> None:
        if not m.dispatch_pending and m.alive and m.started and not m.busy:
            m.dispatch_pending = True
            self.push(self.now, _DISPATCH, "dispatch", m.offset)

    def check_done(self, m: _Member) -> None:
        st = m.engine.state
        if m.complete_at is None and is_job_complete(st):
            m.complete_at = self.now
        if m.settled_at is None and m.complete_at is not None and is_job_settled(st):
            m.settled_at = self.now

    def on_start(self, m: _Member) -> None:
        if not m.alive:
            return
        m.started = True
        self.log(m.offset, "launch")
        if m.offset == 0 and not self.cfg.coordinator_mode:
            fork_at = self.now + _us(self.cfg.invoke_latency)
            for off in range(1, self.cfg.flight_size):
                self.launch(off, fork_at + self.cold_delay(off))
        m.engine.start()
        inbox, m.inbox = m.inbox, []
        for msg in inbox:
            self.on_deliver(m, msg)
        self.schedule_dispatch(m)

    def on_dispatch(self, m: _Member) -> None:
        m.dispatch_pending = False
        if not m.alive or m.busy:
            return
        task = m.engine.next_runnable()
        if task is None:
            self.check_done(m)
            return
        inputs = m.engine.start_task(task)
        self.executions[task] += 1
        fails = self.attempt_fails(task)
        m.busy = True
        m.attempt += 1
        self.log(m.offset, "start", task)
        self.push(self.now + self.task_duration(task), _EVENT, "complete", m.offset, (m.attempt, task, fails, inputs))

    def on_complete(self, m: _Member, data: tuple[int, str, bool, dict]) -> None:
        attempt, task, fails, inputs = data
        if not m.alive or attempt != m.attempt or not m.busy:
            return
        m.busy = False
        result = None if fails else {"task": task, "inputs": inputs}
        m.engine.complete(task, result, fails)
        self.log(m.offset, "fail" if fails else "done", task)
        self.check_done(m)
        self.schedule_dispatch(m)

    def on_deliver(self, m: _Member, msg: Message) -> None:
        if not m.alive:
            return
        if not m.started:
            m.inbox.append(msg)
            return
        action = m.engine.deliver(msg)
        if action is None:
            return
        task = getattr(msg, "task", "")
        if action is Action.TERMINATE_RUNNING:
            m.busy = False
            m.attempt += 1
            self.log(m.offset, "terminate", task)
        elif action is Action.REMOVE_FROM_LIST:
            self.log(m.offset, "preempt", task)
        elif action is Action.ADOPT:
            self.log(m.offset, "adopt", task)
        elif action is Action.RECORD_NULL:
            self.log(m.offset, "null", task)
        if action is not Action.DISCARD:
            self.check_done(m)
            self.schedule_dispatch(m)
        elif m.complete_at is not None:
            self.check_done(m)

    def on_crash(self, offset: int) -> None:
        m = self.members.get(offset)
        self.crashed.add(offset)
        if m is None:
            # never launched yet; make sure it never will be
            self.members[offset] = None  # type: ignore[assignment]
            return
        if m.alive:
            m.alive = False
            m.busy = False
            self.log(offset, "crash")

    # -- driver ----------------------------------------------------------
    def run(self) -> SimResult:
        cfg = self.cfg
        invoke = _us(cfg.invoke_latency)
        for off, t in sorted(cfg.member_failures.items()):
            if 0 <= off < cfg.flight_size:
                self.push(_us(t), _CRASH, "crash", off)
        if cfg.coordinator_mode:
            self.invocations += 1  # the coordinator function itself
            coord_start = invoke
            for off in range(cfg.flight_size):
                self.launch(off, coord_start + invoke + self.cold_delay(off))
        else:
            self.launch(0, invoke + self.cold_delay(0))

        heap = self.heap
        members = self.members
        while heap:
            time, _cls, _seq, kind, off, data = heapq.heappop(heap)
            self.now = time
            if kind == "crash":
                self.on_crash(off)
                continue
            m = members.get(off)
            if m is None:
                continue
            if kind == "dispatch":
                self.on_dispatch(m)
            elif kind == "deliver":
                self.on_deliver(m, data)
            elif kind == "complete":
                self.on_complete(m, data)
            elif kind == "start":
                self.on_start(m)

        # quiescence: surviving members detect dead peers, then settle
        for m in self._live():
            m.engine.probe()
            self.check_done(m)
        return self.result()

    def _live(self) -> list[_Member]:
        return [m for m in self.members.values() if m is not None and m.alive and m.started]

    def result(self) -> SimResult:
        cfg = self.cfg
        live = self._live()
        end = self.now
        if cfg.coordinator_mode:
            finished = [m.complete_at for m in live if m.complete_at is not None]
            latency = max(finished) if finished and len(finished) == len(live) else end
            failed = not any(m.complete_at is not None and not job_failed(m.engine.state) for m in live)
            answer = next((m for m in live if m.complete_at is not None and not job_failed(m.engine.state)), None)
        else:
            leader = self.members.get(0)
            if leader is not None and leader.alive and leader.settled_at is not None:
                answer = leader
            else:
                settled = [m for m in live if m.settled_at is not None]
                answer = min(settled, key=lambda m: (m.settled_at, m.offset)) if settled else None
            if answer is None:
                latency, failed = end, True
            else:
                latency, failed = answer.settled_at, job_failed(answer.engine.state)
        outputs = dict(answer.engine.outputs()) if answer is not None else {s: None for s in cfg.dag.sinks}
        states = {o: m.engine.state for o, m in self.members.items() if m is not None}
        return SimResult(
            job_latency=latency / 1000.0,
            job_failed=failed,
            executions_per_task=dict(self.executions),
            messages_sent=sum(m.engine.messages_sent for m in self.members.values() if m is not None),
            trace=self.trace,
            invocations=self.invocations,
            outputs=outputs,
            states=states,
            crashed=frozenset(self.crashed),
            launched=frozenset(self.launched),
            settle_times={o: m.settled_at / 1000.0 for o, m in self.members.items()
                          if m is not None and m.settled_at is not None},
        )


def run_sim(cfg: SimConfig) -> SimResult:
    return _Simulation(cfg).run()


# -- trace checks -----------------------------------------------------------

def validate_trace(result: SimResult) -> None:
    """Re-check the flight safety properties against a recorded trace.

    Raises AssertionError on the first violation.
    """
    for off, state in result.states.items():
        order = list(state.schedule.order)
        it = iter(order)
        if not all(t in it for t in state.started):
            raise AssertionError(f"member {off}: {state.started} is not a subsequence of {order}")
    terminal: dict[int, set[str]] = {}
    busy: dict[int, bool] = {}
    last_time = -math.inf
    preds = None
    for time, off, event, task in result.trace:
        if time < last_time:
            raise AssertionError("trace is not time ordered")
        last_time = time
        done = terminal.setdefault(off, set())
        if event == "start":
            preds = result.states[off].dag.preds[task]
            missing = [d for d in preds if d not in done]
            if missing:
                raise AssertionError(f"member {off} started {task} before {missing}")
            if busy.get(off):
                raise AssertionError(f"member {off} started {task} while busy")
            if task in done:
                raise AssertionError(f"member {off} restarted terminal task {task}")
            busy[off] = True
        elif event in ("done", "fail", "terminate"):
            done.add(task)
            busy[off] = False
        elif event in ("preempt", "null", "adopt"):
            done.add(task)
        elif event == "crash":
            busy[off] = False
    for task, n in result.executions_per_task.items():
        if n > len(result.launched):
            raise AssertionError(f"{task} executed {n} times by {len(result.launched)} members")


@dataclass(frozen=True)
class FlightSizeCheck:
    serviced: int
    failed_members: int
    mesh_size: int
    member_sizes: dict[int, int]
    joined: frozenset[int]

    @property
    def formula(self) -> int:
        return 1 + self.serviced - self.failed_members

    @property
    def holds(self) -> bool:
        if self.mesh_size != self.formula:
            return False
        for off, size in self.member_sizes.items():
            expected = self.mesh_size if off in self.joined else 1
            if size != expected:
                return False
        return True


def flight_size_check(result: SimResult) -> FlightSizeCheck:
    """Compare each surviving member's view of its mesh with the leader's count."""
    leader = result.states.get(0)
    serviced = set(leader.serviced) if leader is not None else set()
    mesh = {0} | serviced if leader is not None else set()
    failed = len(mesh & result.crashed)
    alive = [o for o in result.states if o not in result.crashed]
    joined = frozenset(o for o in alive if o in mesh)
    sizes = {o: realized_flight_size(result.states[o]) for o in alive}
    return FlightSizeCheck(len(serviced), failed, len(joined), sizes, joined)


def converged(result: SimResult) -> bool:
    """Surviving joined members agree on which tasks hold a good output."""
    live = [s for o, s in result.states.items() if o not in result.crashed and s.joined]
    if not live:
        return True
    for task in live[0].dag.nodes:
        good = [s.outputs.get(task) is not None for s in live if s.status[task] in TERMINAL]
        if len(set(good)) > 1:
            return False
    return True


# -- experiments ------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    flight_size: int
    p: float
    runs: int
    mean_latency_ms: float
    latency_sem_ms: float
    max_latency_ms: float
    failure_rate: float
    failure_sem: float
    mean_executions: float

    def as_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in SWEEP_COLUMNS}


SWEEP_COLUMNS = (
    "flight_size",
    "p",
    "runs",
    "mean_latency_ms",
    "latency_sem_ms",
    "max_latency_ms",
    "failure_rate",
    "failure_sem",
    "mean_executions",
)


def _run_seed(base: int, index: int) -> int:
    return base * 1_000_003 + index


def sweep_failure(cfg: SimConfig, p_values: Iterable[float], runs_per_point: int) -> list[SweepRow]:
    """Mean latency and job failure rate per task-failure probability.

    Each point uses the same seeds, so points differ only in ``p``.
    """
    if runs_per_point < 1:
        raise ValueError("runs_per_point must be >= 1")
    rows = []
    for p in p_values:
        base = replace(cfg, failure_prob=p, record_trace=False)
        lat_sum = lat_sq = lat_max = 0.0
        fails = execs = 0
        for i in range(runs_per_point):
            r = run_sim(replace(base, seed=_run_seed(cfg.seed, i)))
            lat_sum += r.job_latency
            lat_sq += r.job_latency * r.job_latency
            lat_max = max(lat_max, r.job_latency)
            fails += r.job_failed
            execs += r.total_executions
        n = runs_per_point
        mean = lat_sum / n
        var = max(lat_sq / n - mean * mean, 0.0) * n / (n - 1) if n > 1 else 0.0
        rate = fails / n
        rows.append(SweepRow(
            flight_size=cfg.flight_size,
            p=p,
            runs=n,
            mean_latency_ms=mean,
            latency_sem_ms=math.sqrt(var / n),
            max_latency_ms=lat_max,
            failure_rate=rate,
            failure_sem=math.sqrt(rate * (1 - rate) / n),
            mean_executions=execs / n,
        ))
    return rows


def sweep_flight_sizes(cfg: SimConfig, flight_sizes: Iterable[int], p_values: Sequence[float],
                       runs_per_point: int) -> list[SweepRow]:
    rows: list[SweepRow] = []
    for n in flight_sizes:
        rows.extend(sweep_failure(replace(cfg, flight_size=n), p_values, runs_per_point))
    return rows


def write_csv(rows: Iterable[SweepRow], out: str | Path | TextIO) -> None:
    if isinstance(out, (str, Path)):
        with open(out, "w", newline="") as fh:
            write_csv(rows, fh)
        return
    w = csv.DictWriter(out, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.as_dict().items()})


def read_csv(src: str | Path | TextIO) -> list[dict[str, float]]:
    if isinstance(src, (str, Path)):
        with open(src, newline="") as fh:
            return read_csv(fh)
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(src)]


def rows_to_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


@dataclass(frozen=True)
class ModeRow:
    mode: str
    cold_latency_ms: float
    warm_latency_ms: float
    invocations: int
    first_task_start_ms: float


COMPARE_COLUMNS = ("mode", "cold_latency_ms", "warm_latency_ms", "invocations", "first_task_start_ms")


def first_task_start(result: SimResult) -> float:
    return min((t for t, _, ev, _ in result.trace if ev == "start"), default=math.inf)


def compare_coordinator(cfg: SimConfig) -> list[ModeRow]:
    """Flight forking versus a coordinator function launching the same members.

    ``cold`` uses ``cfg.cold_start_latency``; ``warm`` sets it to zero.
    """
    rows = []
    for mode, coord in (("flight", False), ("coordinator", True)):
        cold = run_sim(replace(cfg, coordinator_mode=coord, record_trace=True))
        warm = run_sim(replace(cfg, coordinator_mode=coord, cold_start_latency=0.0, record_trace=True))
        rows.append(ModeRow(mode, cold.job_latency, warm.job_latency, cold.invocations, first_task_start(warm)))
    return rows


def critical_path_ms(dag: TaskDag, duration: float) -> float:
    """Longest dependency chain when every task takes ``duration`` ms."""
    from .listsched import hu_priorities

    return max(hu_priorities(dag).level.values()) * duration


def schedules_for(dag: TaskDag, flight_size: int) -> list[tuple[str, ...]]:
    return [build_schedule(dag, o).order for o in range(flight_size)]
