"""Consensus propagation on loopless bidirectional graphs.

Nodes are indexed 0..K-1 here; shards carry the 1-based ``node_id``.
Every directed edge k->j carries a running average ``omega`` together with
the number of original values it summarizes (``upsilon``).  On a tree the
node estimates equal the exact global average after ``diameter`` rounds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import networkx as nx
import numpy as np


@dataclass(frozen=True)
class NetworkGraph:
    K: int
    adjacency: tuple[tuple[int, ...], ...]
    kind: str = "custom"
    diameter: int = field(init=False)

    def __post_init__(self):
        if self.K < 1 or len(self.adjacency) != self.K:
            raise ValueError("adjacency must list neighbours for each of the K nodes")
        g = self.to_networkx()
        for k, nbrs in enumerate(self.adjacency):
            if k in nbrs:
                raise ValueError(f"self-loop at node {k}")
            for j in nbrs:
                if k not in self.adjacency[j]:
                    raise ValueError(f"edge {k}-{j} is not bidirectional")
        if not nx.is_connected(g):
            raise ValueError("graph is disconnected")
        if g.number_of_edges() != self.K - 1:
            raise ValueError("graph contains a cycle; consensus propagation needs a tree")
        object.__setattr__(self, "diameter", nx.diameter(g) if self.K > 1 else 0)

    @classmethod
    def from_edges(cls, K: int, edges: Iterable[tuple[int, int]], kind: str = "custom") -> "NetworkGraph":
        nbrs: list[set[int]] = [set() for _ in range(K)]
        for a, b in edges:
            nbrs[a].add(b)
            nbrs[b].add(a)
        return cls(K, tuple(tuple(sorted(s)) for s in nbrs), kind)

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.K))
        g.add_edges_from((k, j) for k, nbrs in enumerate(self.adjacency) for j in nbrs)
        return g

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(k, j) for k, nbrs in enumerate(self.adjacency) for j in nbrs if k < j]

    @property
    def directed_edges(self) -> list[tuple[int, int]]:
        return [(k, j) for k, nbrs in enumerate(self.adjacency) for j in nbrs]

    def eccentricity(self, k: int) -> int:
        if self.K == 1:
            return 0
        return nx.eccentricity(self.to_networkx(), v=k)

    def is_star(self, center: int = 0) -> bool:
        return all(self.adjacency[k] == (center,) for k in range(self.K) if k != center)

    def edge_list_dump(self) -> str:
        """One ``a b`` line per undirected edge, for debugging."""
        lines = [f"# kind={self.kind} K={self.K} diameter={self.diameter}"]
        lines += [f"{a} {b}" for a, b in self.edges]
        return "\n".join(lines) + "\n"


def star_graph(K: int, center: int = 0) -> NetworkGraph:
    return NetworkGraph.from_edges(K, [(center, k) for k in range(K) if k != center], "star")


def path_graph(K: int) -> NetworkGraph:
    return NetworkGraph.from_edges(K, [(k, k + 1) for k in range(K - 1)], "path")


def balanced_tree(K: int, branching: int = 2) -> NetworkGraph:
    """Breadth-first filled tree: node k's parent is (k - 1) // branching."""
    return NetworkGraph.from_edges(K, [((k - 1) // branching, k) for k in range(1, K)], "balanced")


def random_tree(K: int, seed=None) -> NetworkGraph:
    """Uniform labelled tree from a random Pruefer sequence."""
    if K <= 2:
        return path_graph(K)
    rng = np.random.default_rng(seed)
    seq = rng.integers(0, K, size=K - 2).tolist()
    g = nx.from_prufer_sequence(seq)
    return NetworkGraph.from_edges(K, g.edges(), "random")


def caterpillar(K: int, diameter: int) -> NetworkGraph:
    """Path spine of ``diameter`` edges; leftover nodes hang off interior spine nodes.

    K=8, diameter=3 gives the two-hub tree used for the decentralized runs.
    """
    if K == 1:
        return NetworkGraph(1, ((),), "caterpillar")
    if not 1 <= diameter <= K - 1:
        raise ValueError(f"diameter {diameter} impossible for K={K}")
    if diameter < 2 and K > 2:
        raise ValueError("more than two nodes need diameter >= 2")
    edges = [(k, k + 1) for k in range(diameter)]
    interior = list(range(1, diameter)) or [0]
    for n, k in enumerate(range(diameter + 1, K)):
        edges.append((interior[n % len(interior)], k))
    return NetworkGraph.from_edges(K, edges, "caterpillar")


def make_graph(kind: str, K: int, **params) -> NetworkGraph:
    kind = kind.lower()
    if kind == "star":
        return star_graph(K, int(params.get("center", 0)))
    if kind == "path":
        return path_graph(K)
    if kind in ("balanced", "balanced_tree"):
        return balanced_tree(K, int(params.get("branching", 2)))
    if kind in ("random", "random_tree"):
        return random_tree(K, params.get("seed", 0))
    if kind == "caterpillar":
        return caterpillar(K, int(params.get("diameter", min(3, K - 1))))
    raise ValueError(f"unknown topology kind {kind!r}")


@dataclass
class ConsensusState:
    """Edge messages of the last completed round plus the node estimates."""

    omega: dict[tuple[int, int], np.ndarray]
    upsilon: dict[tuple[int, int], int]
    omega_hat: np.ndarray
    rounds: int = 0

    @classmethod
    def empty(cls, values: np.ndarray) -> "ConsensusState":
        return cls({}, {}, np.array(values, copy=True), 0)


def _as_payload(values) -> tuple[np.ndarray, bool]:
    arr = np.asarray(values)
    if arr.ndim == 1:
        return arr[:, None], True
    return arr, False


def cp_round(graph: NetworkGraph, state: ConsensusState, values) -> ConsensusState:
    """One synchronous round; all messages are computed from the previous round."""
    x, _ = _as_payload(values)
    if x.shape[0] != graph.K:
        raise ValueError(f"expected {graph.K} local values, got {x.shape[0]}")
    omega_new: dict[tuple[int, int], np.ndarray] = {}
    ups_new: dict[tuple[int, int], int] = {}
    for k, j in graph.directed_edges:
        acc = x[k].copy()
        cnt = 1
        for i in graph.adjacency[k]:
            if i == j or (i, k) not in state.upsilon:
                continue
            u = state.upsilon[(i, k)]
            acc = acc + u * state.omega[(i, k)]
            cnt += u
        omega_new[(k, j)] = acc / cnt
        ups_new[(k, j)] = cnt
    est = np.empty(x.shape, dtype=np.result_type(x.dtype, float))
    for k in range(graph.K):
        acc = x[k].copy()
        cnt = 1
        for i in graph.adjacency[k]:
            u = ups_new[(i, k)]
            acc = acc + u * omega_new[(i, k)]
            cnt += u
        est[k] = acc / cnt
    return ConsensusState(omega_new, ups_new, est, state.rounds + 1)


def run_consensus(graph: NetworkGraph, values, rounds: int) -> ConsensusState:
    if rounds < 1:
        raise ValueError("at least one consensus round is required")
    x, _ = _as_payload(values)
    state = ConsensusState.empty(x)
    for _ in range(rounds):
        state = cp_round(graph, state, x)
    return state


def global_average(graph: NetworkGraph, values, rounds: int) -> np.ndarray:
    """Per-node estimates of the mean of ``values`` (shape (K,) or (K, P))."""
    _, scalar = _as_payload(values)
    est = run_consensus(graph, values, rounds).omega_hat
    return est[:, 0] if scalar else est


def global_sum(graph: NetworkGraph, values, rounds: int) -> np.ndarray:
    """K times the consensus average; exact on trees once rounds >= diameter."""
    return graph.K * global_average(graph, values, rounds)
