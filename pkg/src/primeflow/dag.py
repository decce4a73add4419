"""Dependency-graph validation, topological ordering, and phase computation.

Cycle detection is the classic three-color DFS (WHITE unvisited, GRAY on
the stack, BLACK finished): a back-edge to a GRAY node names the cycle.
Ordering uses Kahn's algorithm with ties broken by document order of the
steps, so schedules are deterministic and replayable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import CycleError, ValidationError

WHITE, GRAY, BLACK = 0, 1, 2


@dataclass(frozen=True)
class DependencyGraph:
    nodes: tuple[str, ...]  # step ids, document order
    edges: tuple[tuple[str, str], ...]  # (u, v): u must finish before v
    parallel_groups: tuple[frozenset[str], ...] = ()
    execution_mode: str = "phased"

    def predecessors(self, node: str) -> list[str]:
        return [u for (u, v) in self.edges if v == node]

    def successors(self, node: str) -> list[str]:
        return [v for (u, v) in self.edges if u == node]


@dataclass(frozen=True)
class DagReport:
    acyclic: bool
    cycle: tuple[str, ...] = ()


def derived_edges(steps) -> list[tuple[str, str]]:
    """Edges implied by depends_on and context_from declarations."""
    edges = []
    for s in steps:
        for dep in s.depends_on:
            edges.append((dep, s.id))
        for src in s.context_from:
            if (src, s.id) not in edges:
                edges.append((src, s.id))
    return edges


def build_graph(
    steps,
    extra_edges=(),
    parallel_groups=(),
    execution_mode: str = "phased",
) -> DependencyGraph:
    edges = derived_edges(steps)
    for e in extra_edges:
        if e not in edges:
            edges.append(tuple(e))
    return DependencyGraph(
        nodes=tuple(s.id for s in steps),
        edges=tuple(edges),
        parallel_groups=tuple(parallel_groups),
        execution_mode=execution_mode,
    )


def _adjacency(graph: DependencyGraph) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for u, v in graph.edges:
        if u in adj and v in adj:
            adj[u].append(v)
    return adj


def validate_dag(graph: DependencyGraph) -> DagReport:
    """Three-color DFS in O(V+E); reports the first cycle found."""
    adj = _adjacency(graph)
    color = {n: WHITE for n in graph.nodes}
    # Iterative DFS keeping the gray path so the cycle can be reported.
    for root in graph.nodes:
        if color[root] != WHITE:
            continue
        stack: list[tuple[str, int]] = [(root, 0)]
        path: list[str] = []
        while stack:
            node, idx = stack.pop()
            if idx == 0:
                color[node] = GRAY
                path.append(node)
            children = adj[node]
            advanced = False
            for i in range(idx, len(children)):
                child = children[i]
                if color[child] == GRAY:
                    cycle = path[path.index(child):] + [child]
                    return DagReport(acyclic=False, cycle=tuple(cycle))
                if color[child] == WHITE:
                    stack.append((node, i + 1))
                    stack.append((child, 0))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                path.pop()
    return DagReport(acyclic=True)


def topological_order(graph: DependencyGraph) -> list[str]:
    """Kahn's algorithm; ready nodes drain in document order."""
    adj = _adjacency(graph)
    indegree = {n: 0 for n in graph.nodes}
    for u, v in graph.edges:
        if u in indegree and v in indegree:
            indegree[v] += 1
    rank = {n: i for i, n in enumerate(graph.nodes)}
    ready = sorted((n for n in graph.nodes if indegree[n] == 0), key=rank.__getitem__)
    order: list[str] = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        changed = False
        for child in adj[node]:
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
                changed = True
        if changed:
            ready.sort(key=rank.__getitem__)
    if len(order) != len(graph.nodes):
        report = validate_dag(graph)
        raise CycleError(list(report.cycle))
    return order


def compute_phases(graph: DependencyGraph) -> list[set[str]]:
    """Phase i holds steps whose longest dependency chain has length i.

    Declared parallel_groups, when present, override the computed phases
    after a consistency check against the edges.
    """
    order = topological_order(graph)  # raises on cycles
    if graph.parallel_groups:
        _check_declared_groups(graph)
        return [set(g) for g in graph.parallel_groups]
    depth = {n: 0 for n in graph.nodes}
    preds: dict[str, list[str]] = {n: [] for n in graph.nodes}
    for u, v in graph.edges:
        preds[v].append(u)
    for node in order:
        if preds[node]:
            depth[node] = 1 + max(depth[p] for p in preds[node])
    phases: list[set[str]] = [set() for _ in range(max(depth.values(), default=0) + 1)]
    for node, d in depth.items():
        phases[d].add(node)
    return phases


def _check_declared_groups(graph: DependencyGraph) -> None:
    violations = []
    assigned: dict[str, int] = {}
    for i, group in enumerate(graph.parallel_groups):
        for node in group:
            if node in assigned:
                violations.append(f"step {node} appears in multiple parallel_groups")
            if node not in graph.nodes:
                violations.append(f"parallel_groups references unknown step {node}")
            assigned[node] = i
    for node in graph.nodes:
        if node not in assigned:
            violations.append(f"step {node} missing from parallel_groups")
    for u, v in graph.edges:
        if u in assigned and v in assigned and assigned[u] >= assigned[v]:
            violations.append(
                f"parallel_groups order edge {u} -> {v} (group {assigned[u]} "
                f"must precede group {assigned[v]})"
            )
    if violations:
        raise ValidationError(violations)
