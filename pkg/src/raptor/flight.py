"""Flight protocol engine.

One :class:`FlightState` per activation member holds its static schedule,
per-task status, recorded outputs and peer directory. The module-level
operations mutate that state and return what the caller must do next; they
never touch sockets or processes. :class:`FlightMember` binds a state to a
message :class:`Transport`, so the same engine runs over TCP in the proxy and
over the in-memory transport of the simulator.

Error updates (a replica's failed attempt) never stop a member from trying
the task itself unless ``prune_on_peer_error`` is set; otherwise one crashing
replica would defeat replication.
"""

from __future__ import annotations

import enum
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Protocol, Union

from .context import ExecutionContext
from .errors import DependencyNotSatisfied, FlightError, NotRunning
from .listsched import ListSchedule, build_schedule
from .manifest import TaskDag

log = logging.getLogger(__name__)


class Status(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE_LOCAL = "done_local"
    PREEMPTED = "preempted"
    PRUNED_NULL = "pruned_null"


TERMINAL = frozenset({Status.DONE_LOCAL, Status.PREEMPTED, Status.PRUNED_NULL})


class Action(enum.Enum):
    REMOVE_FROM_LIST = "remove_from_list"
    TERMINATE_RUNNING = "terminate_running"
    DISCARD = "discard"
    RECORD_NULL = "record_null"
    # a recorded error output replaced by a peer's good one
    ADOPT = "adopt"


@dataclass(frozen=True)
class PeeringRequest:
    activation_id: str
    sender_offset: int
    sender_address: str

    def __post_init__(self) -> None:
        if self.sender_offset < 1:
            raise FlightError("leaders never send peering requests")


@dataclass(frozen=True)
class Membership:
    activation_id: str
    members: tuple[tuple[int, str], ...]


@dataclass(frozen=True)
class StateUpdate:
    activation_id: str
    task: str
    output: Any
    is_error: bool
    origin_offset: int
    sequence: int

    def __post_init__(self) -> None:
        if self.is_error and self.output is not None:
            raise FlightError("an error update must carry a null output")


Message = Union[PeeringRequest, Membership, StateUpdate]


@dataclass
class PeerDirectory:
    self_offset: int
    members: dict[int, str]
    failed: set[int] = field(default_factory=set)

    def live(self) -> dict[int, str]:
        return {o: a for o, a in self.members.items() if o not in self.failed}

    def peers(self) -> list[tuple[int, str]]:
        return sorted((o, a) for o, a in self.members.items() if o != self.self_offset and o not in self.failed)


@dataclass(eq=False)
class FlightState:
    activation_id: str
    offset: int
    address: str | None
    dag: TaskDag
    schedule: ListSchedule
    flight_size: int
    peers: PeerDirectory
    status: dict[str, Status]
    outputs: dict[str, Any] = field(default_factory=dict)
    errors: set[str] = field(default_factory=set)
    reported: dict[str, set[int]] = field(default_factory=dict)
    applied: set[tuple[int, int]] = field(default_factory=set)
    own_updates: list[StateUpdate] = field(default_factory=list)
    serviced: set[int] = field(default_factory=set)
    started: list[str] = field(default_factory=list)
    sequence: int = 0
    joined: bool = False
    prune_on_peer_error: bool = False

    @property
    def is_leader(self) -> bool:
        return self.offset == 0


def new_flight_state(
    ctx: ExecutionContext,
    dag: TaskDag,
    address: str | None = None,
    prune_on_peer_error: bool = False,
) -> FlightState:
    """Fresh member state for an already-masked ``dag``."""
    address = address if address is not None else ctx.local_address
    members = {ctx.offset: address or f"local/{ctx.offset}"}
    if ctx.offset > 0 and ctx.leader_address:
        members[0] = ctx.leader_address
    return FlightState(
        activation_id=ctx.activation_id,
        offset=ctx.offset,
        address=address,
        dag=dag,
        schedule=build_schedule(dag, ctx.offset),
        flight_size=ctx.flight_size,
        peers=PeerDirectory(ctx.offset, members),
        status={t: Status.PENDING for t in dag.nodes},
        joined=ctx.offset == 0,
        prune_on_peer_error=prune_on_peer_error,
    )


def membership_snapshot(state: FlightState) -> Membership:
    return Membership(state.activation_id, tuple(sorted(state.peers.live().items())))


def leader_serve_peering(state: FlightState, req: PeeringRequest) -> Membership | None:
    """Admit a follower; returns the snapshot to send to every live member."""
    if not state.is_leader:
        raise FlightError(f"member {state.offset} is not the flight leader")
    if req.activation_id != state.activation_id:
        log.warning("peering request for %s reached flight %s", req.activation_id, state.activation_id)
        return None
    if req.sender_offset in state.serviced:
        log.debug("duplicate peering request from %d", req.sender_offset)
    else:
        state.serviced.add(req.sender_offset)
        state.peers.members[req.sender_offset] = req.sender_address
        state.peers.failed.discard(req.sender_offset)
    return membership_snapshot(state)


def apply_membership(state: FlightState, msg: Membership) -> list[int]:
    """Merge a full snapshot; returns offsets this member had not known."""
    if msg.activation_id != state.activation_id:
        return []
    state.joined = True
    new = []
    for off, addr in msg.members:
        if off not in state.peers.members:
            new.append(off)
        if off != state.offset:
            state.peers.members[off] = addr
    return new


def leader_realized_size(state: FlightState) -> int:
    """One plus serviced peering requests minus failed members, as the leader counts them."""
    failed = len(state.peers.failed & (state.serviced | {0}))
    return 1 + len(state.serviced) - failed


def realized_flight_size(state: FlightState) -> int:
    return len(state.peers.live())


def mark_peer_failed(state: FlightState, offset: int) -> None:
    if offset != state.offset and offset in state.peers.members:
        state.peers.failed.add(offset)


def deps_terminal(state: FlightState, task: str) -> bool:
    return all(state.status[d] in TERMINAL for d in state.dag.preds[task])


def next_runnable(state: FlightState) -> str | None:
    status = state.status
    for task in state.schedule.order:
        if status[task] is Status.PENDING and deps_terminal(state, task):
            return task
    return None


def start_task(state: FlightState, task: str) -> dict[str, Any]:
    """Mark ``task`` running; returns the outputs of its dependencies."""
    if state.status[task] is not Status.PENDING:
        raise FlightError(f"{task} is {state.status[task].value}, not pending")
    if not deps_terminal(state, task):
        raise DependencyNotSatisfied(task)
    state.status[task] = Status.RUNNING
    state.started.append(task)
    return {d: state.outputs.get(d) for d in state.dag.preds[task]}


def running_task(state: FlightState) -> str | None:
    for task, st in state.status.items():
        if st is Status.RUNNING:
            return task
    return None


def apply_state_update(state: FlightState, u: StateUpdate) -> Action:
    if u.activation_id != state.activation_id:
        log.warning("update for %s reached flight %s", u.activation_id, state.activation_id)
        return Action.DISCARD
    if u.origin_offset == state.offset:
        return Action.DISCARD
    key = (u.origin_offset, u.sequence)
    if key in state.applied:
        return Action.DISCARD
    if u.task not in state.status:
        log.warning("update for unknown task %r discarded", u.task)
        return Action.DISCARD
    state.applied.add(key)
    state.reported.setdefault(u.task, set()).add(u.origin_offset)

    st = state.status[u.task]
    if u.is_error:
        if st is Status.PENDING and state.prune_on_peer_error:
            state.status[u.task] = Status.PRUNED_NULL
            state.outputs[u.task] = None
            state.errors.add(u.task)
            return Action.RECORD_NULL
        return Action.DISCARD

    if st is Status.PENDING:
        state.status[u.task] = Status.PREEMPTED
        state.outputs[u.task] = u.output
        return Action.REMOVE_FROM_LIST
    if st is Status.RUNNING:
        state.status[u.task] = Status.PREEMPTED
        state.outputs[u.task] = u.output
        return Action.TERMINATE_RUNNING
    if u.task in state.errors:
        # first event without an error wins
        state.outputs[u.task] = u.output
        state.errors.discard(u.task)
        if st is Status.PRUNED_NULL:
            state.status[u.task] = Status.PREEMPTED
        return Action.ADOPT
    return Action.DISCARD


def complete_local(state: FlightState, task: str, result: Any, failed: bool) -> StateUpdate:
    if state.status.get(task) is not Status.RUNNING:
        raise NotRunning(task)
    state.status[task] = Status.DONE_LOCAL
    if failed:
        result = None
        state.errors.add(task)
    state.outputs[task] = result
    state.sequence += 1
    u = StateUpdate(state.activation_id, task, result, failed, state.offset, state.sequence)
    state.own_updates.append(u)
    state.reported.setdefault(task, set()).add(state.offset)
    return u


def is_job_complete(state: FlightState) -> bool:
    return all(st in TERMINAL for st in state.status.values())


def job_outputs(state: FlightState) -> dict[str, Any]:
    return {s: state.outputs.get(s) for s in state.dag.sinks}


def job_failed(state: FlightState) -> bool:
    return any(state.outputs.get(s) is None for s in state.dag.sinks)


def is_job_settled(state: FlightState) -> bool:
    """Complete, and every null sink has been reported on by each live peer.

    A member whose own attempt at a sink failed keeps listening until every
    replica has either failed too or sent a good result.
    """
    if not is_job_complete(state):
        return False
    live = [o for o, _ in state.peers.peers()]
    for sink in state.dag.sinks:
        if state.outputs.get(sink) is None:
            seen = state.reported.get(sink, ())
            if any(o not in seen for o in live):
                return False
    return True


def check_invariants(state: FlightState) -> None:
    for task, st in state.status.items():
        if st is Status.RUNNING and not deps_terminal(state, task):
            raise AssertionError(f"{task} running before its dependencies")
        if st in TERMINAL and task not in state.outputs:
            raise AssertionError(f"{task} terminal without a recorded output")
    if sum(st is Status.RUNNING for st in state.status.values()) > 1:
        raise AssertionError("more than one task running on a one-machine schedule")


class Transport(Protocol):
    def send(self, endpoint: str, message: Message) -> bool: ...

    def reachable(self, endpoint: str) -> bool: ...


class FlightMember:
    """A flight state wired to a transport. Single writer: callers serialize."""

    def __init__(self, state: FlightState, transport: Transport):
        self.state = state
        self.transport = transport
        self.messages_sent = 0

    @classmethod
    def from_context(
        cls,
        ctx: ExecutionContext,
        dag: TaskDag,
        transport: Transport,
        address: str | None = None,
        prune_on_peer_error: bool = False,
    ) -> FlightMember:
        return cls(new_flight_state(ctx, dag, address, prune_on_peer_error), transport)

    @property
    def offset(self) -> int:
        return self.state.offset

    def _send(self, offset: int, endpoint: str, msg: Message) -> bool:
        self.messages_sent += 1
        ok = self.transport.send(endpoint, msg)
        if not ok:
            log.info("member %d unreachable at %s", offset, endpoint)
            mark_peer_failed(self.state, offset)
        return ok

    def broadcast(self, msg: Message) -> None:
        for off, endpoint in self.state.peers.peers():
            self._send(off, endpoint, msg)

    def _catch_up(self, offsets: list[int]) -> None:
        for off in offsets:
            endpoint = self.state.peers.live().get(off)
            if endpoint is None or off == self.state.offset:
                continue
            for u in self.state.own_updates:
                if not self._send(off, endpoint, u):
                    break

    def start(self) -> None:
        st = self.state
        if st.is_leader:
            return
        leader = st.peers.members.get(0)
        if leader is None or st.address is None:
            log.info("member %d has no leader address; running solo", st.offset)
            return
        self._send(0, leader, PeeringRequest(st.activation_id, st.offset, st.address))

    def deliver(self, msg: Message) -> Action | None:
        st = self.state
        if isinstance(msg, StateUpdate):
            return apply_state_update(st, msg)
        if isinstance(msg, PeeringRequest):
            if not st.is_leader:
                log.warning("member %d got a peering request; ignoring", st.offset)
                return None
            new_peer = msg.sender_offset not in st.serviced
            snap = leader_serve_peering(st, msg)
            if snap is not None:
                self.broadcast(snap)
                if new_peer:
                    self._catch_up([msg.sender_offset])
            return None
        if isinstance(msg, Membership):
            self._catch_up(apply_membership(st, msg))
            return None
        raise FlightError(f"unknown message {msg!r}")

    def next_runnable(self) -> str | None:
        return next_runnable(self.state)

    def start_task(self, task: str) -> dict[str, Any]:
        return start_task(self.state, task)

    def complete(self, task: str, result: Any, failed: bool) -> StateUpdate:
        u = complete_local(self.state, task, result, failed)
        self.broadcast(u)
        return u

    def probe(self) -> None:
        for off, endpoint in self.state.peers.peers():
            if not self.transport.reachable(endpoint):
                mark_peer_failed(self.state, off)

    def is_complete(self) -> bool:
        return is_job_complete(self.state)

    def is_settled(self) -> bool:
        return is_job_settled(self.state)

    def outputs(self) -> Mapping[str, Any]:
        return job_outputs(self.state)
