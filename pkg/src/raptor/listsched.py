"""One-machine list schedules from Hu levels, diversified per flight member.

Every member of a flight computes the same Hu priority list. Ties between
tasks of equal level are ordered by reverse declaration order; inside each
*sibling group* (tasks with the same level and the same dependency set) that
order is rotated left by ``offset mod len(group)``. Offset 0 is the leader.
"""

from __future__ import annotations

import heapq
import math
from collections import defaultdict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .errors import MismatchedTaskSets
from .manifest import TaskDag, topological_order


@dataclass(frozen=True)
class PriorityTable:
    level: Mapping[str, int]

    def __getitem__(self, task: str) -> int:
        return self.level[task]


@dataclass(frozen=True)
class ListSchedule:
    order: tuple[str, ...]
    offset: int

    def __iter__(self):
        return iter(self.order)

    def __len__(self) -> int:
        return len(self.order)

    def position(self, task: str) -> int:
        return self.order.index(task)


def hu_priorities(dag: TaskDag) -> PriorityTable:
    """Longest path (in nodes) from each task to a sink."""
    level: dict[str, int] = {}
    for n in reversed(topological_order(dag)):
        succ = dag.succs[n]
        level[n] = 1 + max((level[s] for s in succ), default=0)
    return PriorityTable(level)


def sibling_groups(dag: TaskDag, levels: PriorityTable | None = None) -> list[tuple[str, ...]]:
    """Tasks sharing a Hu level and an identical dependency set.

    Each group is listed in reverse declaration order.
    """
    levels = levels or hu_priorities(dag)
    groups: dict[tuple[int, frozenset[str]], list[str]] = defaultdict(list)
    for n in reversed(dag.nodes):
        groups[(levels[n], frozenset(dag.preds[n]))].append(n)
    return [tuple(g) for g in groups.values()]


def priority_keys(dag: TaskDag, offset: int, levels: PriorityTable | None = None) -> dict[str, tuple[int, int]]:
    if offset < 0:
        raise ValueError(f"offset must be non-negative, got {offset}")
    levels = levels or hu_priorities(dag)
    # slots: position of each task in the reverse-declaration order of its level
    by_level: dict[int, list[str]] = defaultdict(list)
    for n in reversed(dag.nodes):
        by_level[levels[n]].append(n)
    slot = {n: i for tasks in by_level.values() for i, n in enumerate(tasks)}

    keys: dict[str, tuple[int, int]] = {}
    for group in sibling_groups(dag, levels):
        k = offset % len(group)
        rotated = group[k:] + group[:k]
        # the group keeps its slots; rotation only permutes who sits in them
        for s, task in zip(sorted(slot[n] for n in group), rotated):
            keys[task] = (-levels[task], s)
    return keys


def build_schedule(dag: TaskDag, offset: int = 0) -> ListSchedule:
    keys = priority_keys(dag, offset)
    waiting = {n: len(dag.preds[n]) for n in dag.nodes}
    ready = [(keys[n], n) for n in dag.nodes if waiting[n] == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        _, n = heapq.heappop(ready)
        order.append(n)
        for s in dag.succs[n]:
            waiting[s] -= 1
            if waiting[s] == 0:
                heapq.heappush(ready, (keys[s], s))
    return ListSchedule(tuple(order), offset)


def schedule_period(dag: TaskDag) -> int:
    """Smallest offset shift guaranteed to reproduce every schedule."""
    return math.lcm(*(len(g) for g in sibling_groups(dag)))


def schedule_distance(a: ListSchedule | Sequence[str], b: ListSchedule | Sequence[str]) -> int:
    """Number of positions at which two schedules over the same tasks differ."""
    ao = tuple(a.order if isinstance(a, ListSchedule) else a)
    bo = tuple(b.order if isinstance(b, ListSchedule) else b)
    if len(ao) != len(bo) or set(ao) != set(bo):
        raise MismatchedTaskSets(f"{sorted(ao)} vs {sorted(bo)}")
    return sum(x != y for x, y in zip(ao, bo))
