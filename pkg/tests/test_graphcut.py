from __future__ import annotations

import itertools

import numpy as np
import pytest

from processors.graphcut import (
    SINK,
    SOURCE,
    FlowNetwork,
    MrfProblem,
    alpha_beta_swap,
    brute_force_min,
    energy_of_labeling,
    load_problem,
    max_flow,
    swap_move,
    write_problem,
)
from services.errors import MrfError


def _random_problem(rng: np.random.Generator, n: int = 6, n_labels: int = 3, p_edge: float = 0.5) -> MrfProblem:
    pairs = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p_edge]
    # path-shaped label tree with random edge lengths
    lengths = rng.uniform(0.2, 1.0, n_labels - 1)
    pos = np.r_[0.0, np.cumsum(lengths)]
    metric = np.abs(pos[:, None] - pos[None, :])
    return MrfProblem(
        unary=rng.uniform(0.0, 1.0, (n, n_labels)),
        edges=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        weights=rng.uniform(0.0, 0.5, len(pairs)),
        metric=metric,
    )


def _cut_by_enumeration(caps: dict, inner: list) -> float:
    best = np.inf
    for k in range(len(inner) + 1):
        for chosen in itertools.combinations(inner, k):
            side = {SOURCE, *chosen}
            best = min(best, sum(c for (u, v), c in caps.items() if u in side and v not in side))
    return best


@pytest.mark.parametrize("seed", range(20))
def test_max_flow_equals_min_cut(seed):
    rng = np.random.default_rng(seed)
    inner = list(range(5))
    net = FlowNetwork()
    caps = {}
    for u, v in itertools.permutations([SOURCE, SINK, *inner], 2):
        if u == SINK or v == SOURCE or rng.random() < 0.5:
            continue
        c = float(rng.integers(0, 10))
        net.add_edge(u, v, c)
        caps[(u, v)] = c
    result = max_flow(net)
    assert result.value == pytest.approx(_cut_by_enumeration(caps, inner))
    assert SOURCE in result.source_side and SINK not in result.source_side
    cut = sum(c for (u, v), c in caps.items() if u in result.source_side and v not in result.source_side)
    assert cut == pytest.approx(result.value)


def test_parallel_arcs_add_up():
    net = FlowNetwork()
    net.add_edge(SOURCE, SINK, 1.5)
    net.add_edge(SOURCE, SINK, 2.0)
    assert max_flow(net).value == pytest.approx(3.5)
    with pytest.raises(MrfError):
        net.add_edge(SOURCE, SINK, -1.0)


@pytest.mark.parametrize("seed", range(30))
def test_swap_move_is_the_best_alpha_beta_relabeling(seed):
    rng = np.random.default_rng(seed)
    problem = _random_problem(rng)
    labels = rng.integers(0, 3, problem.n_nodes)
    alpha, beta = 0, 2
    out, booked = swap_move(problem, labels, alpha, beta)
    assert booked == pytest.approx(energy_of_labeling(problem, out))
    moved = np.flatnonzero((labels == alpha) | (labels == beta))
    assert np.all(out[labels == 1] == 1)
    best = np.inf
    for choice in itertools.product((alpha, beta), repeat=len(moved)):
        trial = labels.copy()
        trial[moved] = choice
        best = min(best, energy_of_labeling(problem, trial))
    assert booked == pytest.approx(best)


def test_swap_against_brute_force():
    rng = np.random.default_rng(2024)
    optimal = 0
    for _ in range(200):
        problem = _random_problem(rng)
        result = alpha_beta_swap(problem)
        _, best = brute_force_min(problem)
        assert result.energy >= best - 1e-9
        assert result.energy == pytest.approx(energy_of_labeling(problem, result.labels))
        before = energy_of_labeling(problem, np.argmin(problem.unary, axis=1))
        for move in result.moves:
            assert move.energy_after < move.energy_before
            assert move.changed > 0
        assert result.energy <= before
        optimal += result.energy <= best + 1e-9
    assert optimal >= 180


def test_swap_keeps_a_local_minimum():
    problem = _random_problem(np.random.default_rng(5))
    first = alpha_beta_swap(problem)
    again = alpha_beta_swap(problem, first.labels)
    np.testing.assert_array_equal(again.labels, first.labels)
    assert again.moves == []
    assert again.cycles == 1


def test_two_node_smoothing():
    # node 1 would rather be label 1 alone, the strong edge pulls it to 0
    problem = MrfProblem(
        unary=[[0.0, 5.0], [1.0, 0.5]],
        edges=[[0, 1]],
        weights=[2.0],
        metric=[[0.0, 1.0], [1.0, 0.0]],
    )
    result = alpha_beta_swap(problem)
    np.testing.assert_array_equal(result.labels, [0, 0])
    assert result.energy == pytest.approx(1.0)


def test_edgeless_problem_is_the_unary_argmin(rng):
    problem = MrfProblem(rng.random((5, 4)), np.zeros((0, 2)), np.zeros(0), 1.0 - np.eye(4))
    result = alpha_beta_swap(problem)
    np.testing.assert_array_equal(result.labels, np.argmin(problem.unary, axis=1))
    assert result.moves == []


@pytest.mark.parametrize("kwargs", [
    {"metric": [[0.0, 1.0], [2.0, 0.0]]},
    {"metric": [[0.1, 1.0], [1.0, 0.0]]},
    {"metric": [[0.0, 0.0], [0.0, 0.0]]},
    {"metric": np.eye(3)},
    {"weights": [-1.0]},
    {"weights": [1.0, 1.0]},
    {"edges": [[0, 0]]},
    {"edges": [[0, 5]]},
    {"unary": [[np.nan, 0.0], [0.0, 0.0]]},
])
def test_invalid_problems(kwargs):
    base = {"unary": [[0.0, 1.0], [1.0, 0.0]], "edges": [[0, 1]], "weights": [1.0], "metric": [[0.0, 1.0], [1.0, 0.0]]}
    with pytest.raises(MrfError):
        MrfProblem(**{**base, **kwargs})


def test_bad_initial_labeling():
    problem = MrfProblem([[0.0, 1.0]], np.zeros((0, 2)), [], [[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(MrfError):
        alpha_beta_swap(problem, np.array([2]))
    with pytest.raises(MrfError):
        energy_of_labeling(problem, np.array([0, 1]))


def test_brute_force_limit(rng):
    problem = _random_problem(rng, n=6)
    with pytest.raises(MrfError):
        brute_force_min(problem, limit=100)


def test_problem_json_round_trip(tmp_path, rng):
    problem = _random_problem(rng)
    write_problem(problem, tmp_path / "mrf.json")
    back = load_problem(tmp_path / "mrf.json")
    np.testing.assert_array_equal(back.unary, problem.unary)
    np.testing.assert_array_equal(back.edges, problem.edges)
    assert brute_force_min(back)[1] == pytest.approx(brute_force_min(problem)[1])
