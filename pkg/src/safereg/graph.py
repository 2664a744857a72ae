"""Typed causal DAGs with d-separation and backdoor identification."""

from __future__ import annotations

import enum
import itertools
import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from safereg.errors import (
    CycleDetected,
    DuplicateNode,
    GraphError,
    InvalidTreatment,
    NotAControl,
    OutOfDomain,
    OverlappingSets,
    UnknownEndpoint,
    UnknownNode,
)


class VariableKind(str, enum.Enum):
    EXOGENOUS = "exogenous"
    INTERNAL = "internal"
    OBSERVABLE = "observable"
    CONTROL = "control"
    TARGET = "target"


# kinds that monitoring can never see; never usable for adjustment
HIDDEN_KINDS = frozenset({VariableKind.INTERNAL})
ADJUSTABLE_KINDS = frozenset({VariableKind.OBSERVABLE, VariableKind.CONTROL})


@dataclass(frozen=True)
class Node:
    name: str
    kind: VariableKind
    domain: tuple[float, float] | None = None


def _as_set(nodes) -> frozenset:
    if nodes is None:
        return frozenset()
    if isinstance(nodes, str):
        return frozenset({nodes})
    return frozenset(nodes)


class CausalGraph:
    """Immutable DAG over named, typed system variables.

    Use :func:`build_graph` (or :meth:`from_dict`) to construct one; the
    constructor validates endpoints, uniqueness and acyclicity.
    """

    def __init__(self, nodes: Iterable[Node], edges: Iterable[tuple[str, str]]):
        self._nodes: dict[str, Node] = {}
        for node in nodes:
            if node.name in self._nodes:
                raise DuplicateNode(f"node {node.name!r} declared twice")
            self._nodes[node.name] = node
        self._parents: dict[str, set] = {n: set() for n in self._nodes}
        self._children: dict[str, set] = {n: set() for n in self._nodes}
        edge_set = set()
        for parent, child in edges:
            for endpoint in (parent, child):
                if endpoint not in self._nodes:
                    raise UnknownEndpoint(f"edge ({parent!r}, {child!r}) uses undeclared node {endpoint!r}")
            edge_set.add((parent, child))
            self._parents[child].add(parent)
            self._children[parent].add(child)
        self._edges = frozenset(edge_set)
        self._order = self._topological_order()

    # --- construction helpers -------------------------------------------

    def _topological_order(self) -> tuple:
        indegree = {n: len(p) for n, p in self._parents.items()}
        ready = sorted(n for n, d in indegree.items() if d == 0)
        order = []
        while ready:
            n = ready.pop(0)
            order.append(n)
            for c in sorted(self._children[n]):
                indegree[c] -= 1
                if indegree[c] == 0:
                    ready.append(c)
        if len(order) != len(self._nodes):
            raise CycleDetected(self._find_cycle(set(self._nodes) - set(order)))
        return tuple(order)

    def _find_cycle(self, remaining: set) -> list:
        # every node left after Kahn's algorithm lies on or downstream of a cycle;
        # walking parents inside the remainder must revisit a node
        start = min(remaining)
        path, seen = [start], {start: 0}
        node = start
        while True:
            node = min(p for p in self._parents[node] if p in remaining)
            if node in seen:
                cycle = path[seen[node]:] + [node]
                return list(reversed(cycle))
            seen[node] = len(path)
            path.append(node)

    @classmethod
    def from_dict(cls, data: Mapping) -> "CausalGraph":
        try:
            raw_nodes = data["nodes"]
            raw_edges = data["edges"]
        except (KeyError, TypeError) as exc:
            raise GraphError("graph document needs 'nodes' and 'edges'") from exc
        nodes = []
        for entry in raw_nodes:
            try:
                kind = VariableKind(entry["kind"])
            except (KeyError, ValueError) as exc:
                raise GraphError(f"bad node entry {entry!r}") from exc
            domain = entry.get("domain")
            if domain is not None:
                lo, hi = float(domain[0]), float(domain[1])
                if not lo < hi:
                    raise GraphError(f"empty domain for {entry['name']!r}")
                domain = (lo, hi)
            nodes.append(Node(str(entry["name"]), kind, domain))
        edges = []
        for edge in raw_edges:
            if len(edge) != 2:
                raise GraphError(f"edge {edge!r} is not a (parent, child) pair")
            edges.append((str(edge[0]), str(edge[1])))
        return cls(nodes, edges)

    @classmethod
    def load(cls, path) -> "CausalGraph":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        nodes = []
        for name in sorted(self._nodes):
            node = self._nodes[name]
            entry = {"name": name, "kind": node.kind.value}
            if node.domain is not None:
                entry["domain"] = list(node.domain)
            nodes.append(entry)
        return {"nodes": nodes, "edges": [list(e) for e in sorted(self._edges)]}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    def without_edges(self, edges: Iterable[tuple[str, str]]) -> "CausalGraph":
        drop = set(edges)
        return CausalGraph(self._nodes.values(), [e for e in self._edges if e not in drop])

    # --- basic queries ----------------------------------------------------

    @property
    def nodes(self) -> tuple:
        return tuple(sorted(self._nodes))

    @property
    def edges(self) -> frozenset:
        return self._edges

    @property
    def topological_order(self) -> tuple:
        return self._order

    def node(self, name: str) -> Node:
        try:
            return self._nodes[name]
        except KeyError:
            raise UnknownNode(f"unknown node {name!r}") from None

    def kind(self, name: str) -> VariableKind:
        return self.node(name).kind

    def nodes_of_kind(self, *kinds: VariableKind) -> tuple:
        return tuple(n for n in self.nodes if self._nodes[n].kind in kinds)

    def parents(self, name: str) -> frozenset:
        self.node(name)
        return frozenset(self._parents[name])

    def children(self, name: str) -> frozenset:
        self.node(name)
        return frozenset(self._children[name])

    def _closure(self, start: Iterable[str], step: dict) -> set:
        seen = set(start)
        stack = list(seen)
        while stack:
            for nxt in step[stack.pop()]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen

    def descendants(self, nodes) -> frozenset:
        """Nodes reachable along directed edges, including ``nodes`` themselves."""
        nodes = self._check(nodes)
        return frozenset(self._closure(nodes, self._children))

    def ancestors(self, nodes) -> frozenset:
        """Nodes with a directed path into ``nodes``, including ``nodes`` themselves."""
        nodes = self._check(nodes)
        return frozenset(self._closure(nodes, self._parents))

    def _check(self, nodes) -> frozenset:
        nodes = _as_set(nodes)
        for n in nodes:
            if n not in self._nodes:
                raise UnknownNode(f"unknown node {n!r}")
        return nodes

    def __contains__(self, name) -> bool:
        return name in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __repr__(self) -> str:
        return f"CausalGraph(nodes={len(self._nodes)}, edges={len(self._edges)})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, CausalGraph):
            return NotImplemented
        return self._nodes == other._nodes and self._edges == other._edges

    def __hash__(self) -> int:
        return hash((frozenset(self._nodes.items()), self._edges))

    # --- d-separation -----------------------------------------------------

    def d_separated(self, a, b, z=()) -> bool:
        """True iff every path between ``a`` and ``b`` is blocked given ``z``.

        Implements the reachability ("Bayes ball") traversal: a trail may pass
        a non-collider only if it is unobserved, and a collider only if the
        collider has an observed descendant.
        """
        a, b, z = self._check(a), self._check(b), self._check(z)
        if a & b or a & z or b & z:
            raise OverlappingSets("A, B and Z must be pairwise disjoint")
        if not a or not b:
            return True
        observed_ancestors = self._closure(z, self._parents)

        # direction "up": arrived from a child; "down": arrived from a parent
        queue = deque((n, "up") for n in a)
        visited = set()
        while queue:
            node, direction = queue.popleft()
            if (node, direction) in visited:
                continue
            visited.add((node, direction))
            if node not in z and node in b:
                return False
            if direction == "up":
                if node in z:
                    continue
                queue.extend((p, "up") for p in self._parents[node])
                queue.extend((c, "down") for c in self._children[node])
            else:
                if node not in z:
                    queue.extend((c, "down") for c in self._children[node])
                if node in observed_ancestors:
                    queue.extend((p, "up") for p in self._parents[node])
        return True

    def implied_independencies(self, max_conditioning_size: int) -> list:
        """All (A, B, Z) with A < B singletons that are d-separated given Z, |Z| <= max.

        Entries are ``(a, b, z)`` with ``z`` a sorted tuple, ordered by
        ``a``, ``b``, ``len(z)`` and then ``z`` lexicographically.
        """
        if max_conditioning_size < 0:
            raise ValueError("max_conditioning_size must be >= 0")
        names = self.nodes
        found = []
        for a, b in itertools.combinations(names, 2):
            rest = [n for n in names if n not in (a, b)]
            for size in range(min(max_conditioning_size, len(rest)) + 1):
                for z in itertools.combinations(rest, size):
                    if self.d_separated({a}, {b}, set(z)):
                        found.append((a, b, tuple(z)))
        return found

    # --- identification ---------------------------------------------------

    def satisfies_backdoor(self, treatment, outcome, z) -> bool:
        """Check the backdoor criterion for ``z`` relative to (treatment, outcome)."""
        treatment, outcome, z = self._check(treatment), self._check(outcome), self._check(z)
        if z & self.descendants(treatment):
            return False
        pruned = self.without_edges((t, c) for t in treatment for c in self._children[t])
        return pruned.d_separated(treatment, outcome, z)

    def backdoor_set(self, treatment, outcome, max_size: int | None = None):
        """Smallest observable/control set satisfying the backdoor criterion.

        Ties are broken lexicographically. Returns ``None`` when no such set
        exists among adjustable (observable or control) nodes.
        """
        treatment = self._check(treatment)
        outcome = self._check(outcome)
        if not treatment:
            raise InvalidTreatment("treatment set is empty")
        for t in sorted(treatment):
            if self._nodes[t].kind not in ADJUSTABLE_KINDS:
                raise InvalidTreatment(f"treatment {t!r} is a {self._nodes[t].kind.value} variable")
        if treatment & outcome:
            raise OverlappingSets("outcome overlaps the treatment set")

        excluded = self.descendants(treatment) | outcome
        candidates = [
            n for n in self.nodes
            if self._nodes[n].kind in ADJUSTABLE_KINDS and n not in excluded
        ]
        pruned = self.without_edges((t, c) for t in treatment for c in self._children[t])
        limit = len(candidates) if max_size is None else min(max_size, len(candidates))
        for size in range(limit + 1):
            for z in itertools.combinations(candidates, size):
                if pruned.d_separated(treatment, outcome, set(z)):
                    return frozenset(z)
        return None

    def is_identifiable(self, target, outcome) -> bool:
        """Sufficient-condition identifiability: a backdoor adjustment set exists."""
        variables = target.variables if isinstance(target, InterventionTarget) else tuple(_as_set(target))
        for v in variables:
            if self.node(v).kind is not VariableKind.CONTROL:
                raise NotAControl(f"{v!r} is not a control input")
        return self.backdoor_set(set(variables), outcome) is not None

    def intervention(self, variables: Sequence[str], values: Sequence[float]) -> "InterventionTarget":
        return InterventionTarget.create(self, variables, values)


@dataclass(frozen=True)
class InterventionTarget:
    """A validated do(U' = u') assignment."""

    variables: tuple
    values: tuple

    @classmethod
    def create(cls, graph: CausalGraph, variables: Sequence[str], values: Sequence[float]) -> "InterventionTarget":
        variables = tuple(variables)
        values = tuple(float(v) for v in values)
        if not variables:
            raise GraphError("intervention needs at least one variable")
        if len(set(variables)) != len(variables):
            raise GraphError("intervention variables must be distinct")
        if len(values) != len(variables):
            raise GraphError("intervention needs one value per variable")
        for name, value in zip(variables, values):
            node = graph.node(name)
            if node.kind is not VariableKind.CONTROL:
                raise NotAControl(f"{name!r} is not a control input")
            if node.domain is not None and not node.domain[0] <= value <= node.domain[1]:
                raise OutOfDomain(f"{name}={value} outside {list(node.domain)}")
        return cls(variables, values)

    def as_dict(self) -> dict:
        return dict(zip(self.variables, self.values))


def build_graph(nodes, edges) -> CausalGraph:
    """Build a validated graph.

    ``nodes`` holds :class:`Node` objects, ``(name, kind)`` / ``(name, kind,
    domain)`` tuples, or dicts in the JSON layout.
    """
    parsed = []
    for entry in nodes:
        if isinstance(entry, Node):
            parsed.append(entry)
        elif isinstance(entry, Mapping):
            parsed.append(CausalGraph.from_dict({"nodes": [entry], "edges": []}).node(entry["name"]))
        else:
            name, kind, *rest = entry
            domain = tuple(float(x) for x in rest[0]) if rest and rest[0] is not None else None
            parsed.append(Node(name, VariableKind(kind), domain))
    return CausalGraph(parsed, [tuple(e) for e in edges])


def d_separated(graph: CausalGraph, a, b, z=()) -> bool:
    return graph.d_separated(a, b, z)


def implied_independencies(graph: CausalGraph, max_conditioning_size: int) -> list:
    return graph.implied_independencies(max_conditioning_size)


def backdoor_set(graph: CausalGraph, treatment, outcome):
    return graph.backdoor_set(treatment, outcome)


def is_identifiable(graph: CausalGraph, target, outcome) -> bool:
    return graph.is_identifiable(target, outcome)
