"""Container action manifests and the task DAG built from them.

A manifest document is JSON of the form::

    {"functions": [
        {"name": "function1:main", "location": "path1/file", "dependencies": []},
        {"name": "function3:main", "location": "path3/file",
         "dependencies": ["function1:main", "function2:main"]}
    ]}

Declaration order is preserved everywhere; the list scheduler uses it as its
deterministic tie-break.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import PurePosixPath
from typing import Any

from .errors import (
    CyclicDependency,
    DuplicateName,
    InvalidMask,
    MalformedDocument,
    PathTraversal,
    UnknownDependency,
    UnknownFunction,
)


@dataclass(frozen=True)
class FunctionEntry:
    name: str
    location: str
    dependencies: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "location": self.location,
            "dependencies": list(self.dependencies),
        }


@dataclass(frozen=True)
class ActionManifest:
    entries: tuple[FunctionEntry, ...]
    manifest_id: str

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def entry(self, name: str) -> FunctionEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise UnknownFunction(name)

    def to_document(self) -> dict[str, Any]:
        return {"functions": [e.to_dict() for e in self.entries]}

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_document())


@dataclass(frozen=True)
class FunctionMask:
    selected: frozenset[str]

    def __post_init__(self) -> None:
        if not self.selected:
            raise InvalidMask("function mask must select at least one function")

    @classmethod
    def of(cls, names: Iterable[str]) -> FunctionMask:
        return cls(frozenset(names))

    def sorted(self) -> list[str]:
        return sorted(self.selected)


@dataclass(frozen=True)
class TaskDag:
    """Dependency graph over task names.

    ``nodes`` keeps manifest declaration order; ``edges`` holds ``(u, v)``
    pairs meaning *u must finish before v starts*.
    """

    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]
    preds: Mapping[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)
    succs: Mapping[str, tuple[str, ...]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise DuplicateName("duplicate node in TaskDag")
        preds: dict[str, list[str]] = {n: [] for n in self.nodes}
        succs: dict[str, list[str]] = {n: [] for n in self.nodes}
        pos = {n: i for i, n in enumerate(self.nodes)}
        for u, v in sorted(self.edges, key=lambda e: (pos.get(e[1], -1), pos.get(e[0], -1))):
            if u not in node_set or v not in node_set:
                raise UnknownDependency(f"edge {u!r} -> {v!r} leaves the node set")
            preds[v].append(u)
            succs[u].append(v)
        object.__setattr__(self, "preds", {n: tuple(p) for n, p in preds.items()})
        object.__setattr__(self, "succs", {n: tuple(s) for n, s in succs.items()})
        topological_order(self)  # raises on cycles

    @property
    def sources(self) -> tuple[str, ...]:
        return tuple(n for n in self.nodes if not self.preds[n])

    @property
    def sinks(self) -> tuple[str, ...]:
        return tuple(n for n in self.nodes if not self.succs[n])

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, name: object) -> bool:
        return name in self.preds


def canonical_json(doc: Any) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def topological_order(dag: TaskDag) -> list[str]:
    """Kahn's algorithm, breaking ties by declaration order."""
    indeg = {n: len(dag.preds[n]) for n in dag.nodes}
    ready = [n for n in dag.nodes if indeg[n] == 0]
    order: list[str] = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for s in dag.succs[n]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    if len(order) != len(dag.nodes):
        stuck = [n for n in dag.nodes if indeg[n] > 0]
        raise CyclicDependency(f"dependency cycle through {stuck}")
    return order


def _check_location(name: str, location: Any) -> str:
    if not isinstance(location, str) or not location:
        raise MalformedDocument(f"{name}: location must be a non-empty string")
    path = PurePosixPath(location)
    if path.is_absolute() or ".." in path.parts or "\\" in location:
        raise PathTraversal(f"{name}: location {location!r} must be relative and stay inside the code root")
    return location


def _load_document(raw: bytes | str | Mapping[str, Any]) -> Mapping[str, Any]:
    if isinstance(raw, Mapping):
        return raw
    try:
        doc = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedDocument(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedDocument("manifest must be a JSON object")
    return doc


def parse_manifest(raw: bytes | str | Mapping[str, Any]) -> ActionManifest:
    doc = _load_document(raw)
    functions = doc.get("functions")
    if not isinstance(functions, list) or not functions:
        raise MalformedDocument("manifest needs a non-empty 'functions' array")

    entries: list[FunctionEntry] = []
    seen: set[str] = set()
    for item in functions:
        if not isinstance(item, Mapping):
            raise MalformedDocument("each function must be an object")
        name = item.get("name")
        if not isinstance(name, str) or not name:
            raise MalformedDocument("function name must be a non-empty string")
        if name in seen:
            raise DuplicateName(name)
        seen.add(name)
        deps = item.get("dependencies", [])
        if not isinstance(deps, list) or not all(isinstance(d, str) for d in deps):
            raise MalformedDocument(f"{name}: dependencies must be an array of names")
        if len(set(deps)) != len(deps):
            raise MalformedDocument(f"{name}: repeated dependency")
        location = _check_location(name, item.get("location"))
        entries.append(FunctionEntry(name, location, tuple(deps)))

    for e in entries:
        for d in e.dependencies:
            if d == e.name:
                raise CyclicDependency(f"{e.name} depends on itself")
            if d not in seen:
                raise UnknownDependency(f"{e.name} depends on unknown function {d!r}")

    manifest_doc = {"functions": [e.to_dict() for e in entries]}
    digest = hashlib.sha256(canonical_json(manifest_doc)).hexdigest()
    manifest = ActionManifest(tuple(entries), digest)
    build_dag(manifest)  # cycle check
    return manifest


def build_dag(m: ActionManifest) -> TaskDag:
    edges = frozenset((d, e.name) for e in m.entries for d in e.dependencies)
    return TaskDag(m.names, edges)


def ancestors(dag: TaskDag, name: str) -> set[str]:
    out: set[str] = set()
    stack = list(dag.preds[name])
    while stack:
        n = stack.pop()
        if n not in out:
            out.add(n)
            stack.extend(dag.preds[n])
    return out


def apply_mask(dag: TaskDag, mask: FunctionMask) -> TaskDag:
    """Sub-DAG of the selected tasks plus everything they transitively need."""
    unknown = sorted(mask.selected - set(dag.nodes))
    if unknown:
        raise UnknownFunction(f"mask names unknown functions: {unknown}")
    keep = set(mask.selected)
    for name in mask.selected:
        keep |= ancestors(dag, name)
    nodes = tuple(n for n in dag.nodes if n in keep)
    edges = frozenset((u, v) for u, v in dag.edges if u in keep and v in keep)
    return TaskDag(nodes, edges)


def dag_from_edges(nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> TaskDag:
    return TaskDag(tuple(nodes), frozenset(edges))


def manifest_from_dag(dag: TaskDag, suffix: str = ".py") -> ActionManifest:
    """Synthesize a manifest whose entry locations are ``<name><suffix>``."""
    doc = {
        "functions": [
            {"name": n, "location": _safe_filename(n) + suffix, "dependencies": list(dag.preds[n])}
            for n in dag.nodes
        ]
    }
    return parse_manifest(doc)


def _safe_filename(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def to_dot(dag: TaskDag) -> str:
    lines = ["digraph manifest {"]
    for n in dag.nodes:
        lines.append(f'  "{n}";')
    for n in dag.nodes:
        for s in dag.succs[n]:
            lines.append(f'  "{n}" -> "{s}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
