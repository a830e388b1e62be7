# processors/graphcut.py
"""
Pairwise MRF minimization by alpha-beta swap moves.

Energy of a labeling f:

    sum_p unary[p, f_p] + sum_(u, v) weights[e] * metric[f_u, f_v]

Each swap move re-labels the nodes currently carrying alpha or beta through
one s-t minimum cut (networkx Edmonds-Karp).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, List, Optional

import networkx as nx
import numpy as np
from networkx.algorithms.flow import edmonds_karp

from services.errors import MrfError

logger = logging.getLogger(__name__)

SOURCE = "s"
SINK = "t"

# brute force refuses instances with more labelings than this
BRUTE_FORCE_LIMIT = 10_000_000


@dataclass
class MrfProblem:
    unary: np.ndarray                         # (n, L)
    edges: np.ndarray                         # (m, 2)
    weights: np.ndarray                       # (m,) nonnegative
    metric: np.ndarray                        # (L, L) semi-metric, zero diagonal

    def __post_init__(self) -> None:
        self.unary = np.atleast_2d(np.asarray(self.unary, dtype=np.float64))
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.metric = np.asarray(self.metric, dtype=np.float64)
        n, n_labels = self.unary.shape
        if not np.all(np.isfinite(self.unary)):
            raise MrfError("unary costs must be finite")
        if self.metric.shape != (n_labels, n_labels):
            raise MrfError(f"metric must be {n_labels}x{n_labels}, got {self.metric.shape}")
        if not np.all(np.isfinite(self.metric)):
            raise MrfError("pairwise costs must be finite")
        if not np.allclose(self.metric, self.metric.T, atol=1e-12):
            raise MrfError("pairwise metric must be symmetric")
        if np.any(np.diag(self.metric) != 0.0):
            raise MrfError("pairwise metric must vanish on equal labels")
        off = ~np.eye(n_labels, dtype=bool)
        if np.any(self.metric[off] <= 0.0):
            raise MrfError("pairwise metric must be positive between different labels")
        if len(self.weights) != len(self.edges):
            raise MrfError(f"{len(self.edges)} edges but {len(self.weights)} weights")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise MrfError("edge weights must be finite and nonnegative")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n or np.any(self.edges[:, 0] == self.edges[:, 1])):
            raise MrfError("edges must join two distinct existing nodes")

    @property
    def n_nodes(self) -> int:
        return self.unary.shape[0]

    @property
    def n_labels(self) -> int:
        return self.unary.shape[1]

    def pairwise(self, e: int) -> np.ndarray:
        """L x L cost table of edge ``e``."""
        return self.weights[e] * self.metric

    def to_dict(self) -> dict:
        return {
            "unary": self.unary.tolist(),
            "edges": self.edges.tolist(),
            "weights": self.weights.tolist(),
            "metric": self.metric.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MrfProblem":
        return cls(
            unary=np.asarray(data["unary"], dtype=np.float64),
            edges=np.asarray(data["edges"], dtype=np.int64).reshape(-1, 2),
            weights=np.asarray(data["weights"], dtype=np.float64),
            metric=np.asarray(data["metric"], dtype=np.float64),
        )


def write_problem(problem: MrfProblem, path: str | Path) -> None:
    """JSON dump for replaying an instance against the brute-force oracle."""
    Path(path).write_text(json.dumps(problem.to_dict()), encoding="utf-8")


def load_problem(path: str | Path) -> MrfProblem:
    return MrfProblem.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def energy_of_labeling(problem: MrfProblem, labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (problem.n_nodes,):
        raise MrfError(f"labeling has shape {labels.shape}, expected ({problem.n_nodes},)")
    unary = problem.unary[np.arange(problem.n_nodes), labels].sum()
    if len(problem.edges) == 0:
        return float(unary)
    u, v = problem.edges[:, 0], problem.edges[:, 1]
    return float(unary + (problem.weights * problem.metric[labels[u], labels[v]]).sum())


def unary_argmin(problem: MrfProblem) -> np.ndarray:
    return np.argmin(problem.unary, axis=1)


# ---------- max flow ----------

@dataclass
class FlowNetwork:
    graph: nx.DiGraph = field(default_factory=nx.DiGraph)
    source: Hashable = SOURCE
    sink: Hashable = SINK

    def __post_init__(self) -> None:
        self.graph.add_node(self.source)
        self.graph.add_node(self.sink)

    def add_edge(self, u: Hashable, v: Hashable, capacity: float) -> None:
        """Parallel arcs are merged by adding capacities."""
        if not np.isfinite(capacity) or capacity < 0:
            raise MrfError(f"capacity of {u}->{v} must be finite and nonnegative, got {capacity}")
        if self.graph.has_edge(u, v):
            self.graph[u][v]["capacity"] += float(capacity)
        else:
            self.graph.add_edge(u, v, capacity=float(capacity))

    def add_tedge(self, node: Hashable, cap_source: float, cap_sink: float) -> None:
        self.add_edge(self.source, node, cap_source)
        self.add_edge(node, self.sink, cap_sink)


@dataclass
class FlowResult:
    value: float
    source_side: set


def max_flow(network: FlowNetwork) -> FlowResult:
    """Maximum flow value and the source side of a minimum cut."""
    value, (reachable, _) = nx.minimum_cut(
        network.graph, network.source, network.sink, capacity="capacity", flow_func=edmonds_karp
    )
    return FlowResult(float(value), set(reachable))


# ---------- alpha-beta swap ----------

@dataclass(frozen=True)
class SwapMove:
    alpha: int
    beta: int
    energy_before: float
    energy_after: float                       # bookkeeping value: untouched terms + cut
    changed: int                              # nodes whose label changed


@dataclass
class SwapResult:
    labels: np.ndarray
    energy: float
    moves: List[SwapMove] = field(default_factory=list)
    cycles: int = 0


def _swap_network(problem: MrfProblem, labels: np.ndarray, alpha: int, beta: int, nodes: np.ndarray) -> tuple[FlowNetwork, float]:
    """
    Swap graph over ``nodes`` (labels alpha or beta) and the energy of every
    term that does not involve them.

    s -> p carries the cost of p taking alpha, p -> t the cost of beta; a node
    left on the sink side takes alpha.
    """
    in_swap = np.zeros(problem.n_nodes, dtype=bool)
    in_swap[nodes] = True
    t_alpha = problem.unary[nodes, alpha].copy()
    t_beta = problem.unary[nodes, beta].copy()
    pos = np.full(problem.n_nodes, -1, dtype=np.int64)
    pos[nodes] = np.arange(len(nodes))

    rest = float(problem.unary[~in_swap, labels[~in_swap]].sum())
    net = FlowNetwork()
    for p in nodes:
        net.graph.add_node(int(p))

    if len(problem.edges):
        u, v = problem.edges[:, 0], problem.edges[:, 1]
        w = problem.weights
        iu, iv = in_swap[u], in_swap[v]
        none = ~iu & ~iv
        rest += float((w[none] * problem.metric[labels[u[none]], labels[v[none]]]).sum())

        # one endpoint inside: the outside label is fixed, fold the term into the t-links
        for inside, outside, mask in ((u, v, iu & ~iv), (v, u, iv & ~iu)):
            other = labels[outside[mask]]
            np.add.at(t_alpha, pos[inside[mask]], w[mask] * problem.metric[alpha, other])
            np.add.at(t_beta, pos[inside[mask]], w[mask] * problem.metric[beta, other])

        both = iu & iv
        link = problem.metric[alpha, beta]
        for a, b, we in zip(u[both], v[both], w[both]):
            if we > 0:
                net.add_edge(int(a), int(b), we * link)
                net.add_edge(int(b), int(a), we * link)

    for p, ca, cb in zip(nodes, t_alpha, t_beta):
        net.add_tedge(int(p), float(ca), float(cb))
    return net, rest


def swap_move(problem: MrfProblem, labels: np.ndarray, alpha: int, beta: int) -> tuple[np.ndarray, float]:
    """Optimal relabeling of the alpha/beta nodes; returns (labels, bookkeeping energy)."""
    nodes = np.flatnonzero((labels == alpha) | (labels == beta))
    if len(nodes) == 0:
        return labels.copy(), energy_of_labeling(problem, labels)
    net, rest = _swap_network(problem, labels, alpha, beta, nodes)
    cut = max_flow(net)
    out = labels.copy()
    for p in nodes:
        out[p] = beta if int(p) in cut.source_side else alpha
    return out, rest + cut.value


def alpha_beta_swap(
    problem: MrfProblem,
    labels: Optional[np.ndarray] = None,
    max_cycles: int = 100,
) -> SwapResult:
    """
    Cycle over label pairs alpha < beta in ascending order; a move is kept
    only when it strictly lowers the energy. Stops after a cycle without change.
    """
    labels = unary_argmin(problem) if labels is None else np.asarray(labels, dtype=np.int64).copy()
    if labels.shape != (problem.n_nodes,) or (len(labels) and (labels.min() < 0 or labels.max() >= problem.n_labels)):
        raise MrfError("initial labeling does not fit the problem")
    energy = energy_of_labeling(problem, labels)
    result = SwapResult(labels, energy)
    if problem.n_labels < 2 or problem.n_nodes == 0:
        return result

    for cycle in range(1, max_cycles + 1):
        improved = False
        for alpha in range(problem.n_labels):
            for beta in range(alpha + 1, problem.n_labels):
                candidate, booked = swap_move(problem, labels, alpha, beta)
                if booked < energy - 1e-9 * max(1.0, abs(energy)):
                    changed = int(np.count_nonzero(candidate != labels))
                    result.moves.append(SwapMove(alpha, beta, energy, booked, changed))
                    labels, energy = candidate, energy_of_labeling(problem, candidate)
                    improved = True
        result.cycles = cycle
        if not improved:
            break
    else:
        logger.warning("alpha-beta swap stopped after %d cycles without converging", max_cycles)

    result.labels, result.energy = labels, energy
    logger.debug("swap: %d moves in %d cycles, energy %.6f", len(result.moves), result.cycles, energy)
    return result


# ---------- oracle ----------

def brute_force_min(problem: MrfProblem, limit: int = BRUTE_FORCE_LIMIT, chunk: int = 200_000) -> tuple[np.ndarray, float]:
    """Exhaustive minimum; the lexicographically first labeling wins ties."""
    n, n_labels = problem.n_nodes, problem.n_labels
    total = n_labels ** n
    if total > limit:
        raise MrfError(f"{n_labels}^{n} labelings exceed the brute-force limit {limit}")
    if n == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    shape = (n_labels,) * n
    best_e, best_i = np.inf, 0
    u, v = problem.edges[:, 0], problem.edges[:, 1]
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        labs = np.stack(np.unravel_index(idx, shape), axis=1)
        energy = problem.unary[np.arange(n), labs].sum(axis=1)
        if len(problem.edges):
            energy = energy + (problem.weights * problem.metric[labs[:, u], labs[:, v]]).sum(axis=1)
        k = int(np.argmin(energy))
        if energy[k] < best_e:
            best_e, best_i = float(energy[k]), int(idx[k])
    best = np.array(np.unravel_index(best_i, shape), dtype=np.int64)
    return best, best_e
