"""Graph validation against brute-force oracles, ordering, and phases."""

import random

import pytest

from primeflow.dag import (
    DependencyGraph,
    compute_phases,
    topological_order,
    validate_dag,
)
from primeflow.errors import CycleError, ValidationError


def closure_has_cycle(n, adj_rows):
    """Oracle: bitmask transitive closure; cyclic iff any node reaches itself."""
    reach = list(adj_rows)
    for _ in range(n):
        for i in range(n):
            acc = reach[i]
            row = reach[i]
            j = 0
            while row:
                if row & 1:
                    acc |= reach[j]
                row >>= 1
                j += 1
            reach[i] = acc
    return any(reach[i] >> i & 1 for i in range(n))


def graph_from_mask(nodes, pairs, mask):
    edges = tuple(pairs[i] for i in range(len(pairs)) if mask >> i & 1)
    return DependencyGraph(nodes=nodes, edges=edges), edges


def check_topo(nodes, edges, order):
    assert sorted(order) == sorted(nodes)
    position = {n: i for i, n in enumerate(order)}
    for u, v in edges:
        assert position[u] < position[v], f"edge {u}->{v} violated by {order}"


class TestCycleOracle:
    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_exhaustive_small(self, n):
        nodes = tuple("abcde"[:n])
        index = {node: i for i, node in enumerate(nodes)}
        pairs = [(u, v) for u in nodes for v in nodes if u != v]
        for mask in range(1 << len(pairs)):
            graph, edges = graph_from_mask(nodes, pairs, mask)
            rows = [0] * n
            for u, v in edges:
                rows[index[u]] |= 1 << index[v]
            expected_acyclic = not closure_has_cycle(n, rows)
            report = validate_dag(graph)
            assert report.acyclic == expected_acyclic, f"mask {mask}"
            if expected_acyclic:
                check_topo(nodes, edges, topological_order(graph))

    def test_random_50_node_graphs(self):
        rng = random.Random(7)
        nodes = tuple(f"n{i}" for i in range(50))
        index = {node: i for i, node in enumerate(nodes)}
        for _ in range(1000):
            edges = []
            for _e in range(rng.randint(0, 120)):
                u, v = rng.sample(nodes, 2)
                if (u, v) not in edges:
                    edges.append((u, v))
            graph = DependencyGraph(nodes=nodes, edges=tuple(edges))
            rows = [0] * 50
            for u, v in edges:
                rows[index[u]] |= 1 << index[v]
            expected_acyclic = not closure_has_cycle(50, rows)
            report = validate_dag(graph)
            assert report.acyclic == expected_acyclic
            if expected_acyclic:
                check_topo(nodes, edges, topological_order(graph))

    def test_reported_cycle_is_a_real_cycle(self):
        graph = DependencyGraph(
            nodes=("a", "b", "c", "d"),
            edges=(("a", "b"), ("b", "c"), ("c", "b"), ("c", "d")),
        )
        report = validate_dag(graph)
        assert not report.acyclic
        cycle = report.cycle
        assert cycle[0] == cycle[-1]
        for u, v in zip(cycle, cycle[1:]):
            assert (u, v) in graph.edges

    def test_self_loop(self):
        graph = DependencyGraph(nodes=("a",), edges=(("a", "a"),))
        assert not validate_dag(graph).acyclic


class TestTopologicalOrder:
    def test_document_order_tie_break(self):
        graph = DependencyGraph(nodes=("z", "m", "a"), edges=())
        assert topological_order(graph) == ["z", "m", "a"]

    def test_ready_set_drains_in_document_order(self):
        graph = DependencyGraph(
            nodes=("root", "b", "a", "tail"),
            edges=(("root", "b"), ("root", "a"), ("b", "tail"), ("a", "tail")),
        )
        assert topological_order(graph) == ["root", "b", "a", "tail"]

    def test_cycle_raises(self):
        graph = DependencyGraph(nodes=("a", "b"), edges=(("a", "b"), ("b", "a")))
        with pytest.raises(CycleError):
            topological_order(graph)


class TestPhases:
    def test_longest_chain_phases(self):
        graph = DependencyGraph(
            nodes=("a", "b", "c", "d"),
            edges=(("a", "c"), ("b", "c"), ("c", "d"), ("a", "d")),
        )
        assert compute_phases(graph) == [{"a", "b"}, {"c"}, {"d"}]

    def test_independent_steps_share_phase_zero(self):
        graph = DependencyGraph(nodes=("a", "b", "c"), edges=())
        assert compute_phases(graph) == [{"a", "b", "c"}]

    def test_declared_groups_override(self):
        graph = DependencyGraph(
            nodes=("a", "b", "c"),
            edges=(("a", "c"),),
            parallel_groups=(frozenset({"a", "b"}), frozenset({"c"})),
        )
        assert compute_phases(graph) == [{"a", "b"}, {"c"}]

    def test_declared_groups_must_respect_edges(self):
        graph = DependencyGraph(
            nodes=("a", "b"),
            edges=(("a", "b"),),
            parallel_groups=(frozenset({"b"}), frozenset({"a"})),
        )
        with pytest.raises(ValidationError, match="order edge"):
            compute_phases(graph)

    def test_declared_groups_must_cover_all_steps(self):
        graph = DependencyGraph(
            nodes=("a", "b"),
            edges=(),
            parallel_groups=(frozenset({"a"}),),
        )
        with pytest.raises(ValidationError, match="missing from parallel_groups"):
            compute_phases(graph)

    def test_declared_groups_reject_duplicates(self):
        graph = DependencyGraph(
            nodes=("a", "b"),
            edges=(),
            parallel_groups=(frozenset({"a", "b"}), frozenset({"a"})),
        )
        with pytest.raises(ValidationError, match="multiple parallel_groups"):
            compute_phases(graph)
