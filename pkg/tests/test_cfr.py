import numpy as np
import pytest
from hypothesis import given, strategies as st

from zsposg.cfr import (
    OracleTooLarge,
    TreeTooLarge,
    best_response_value,
    build_extensive_form,
    cfr_plus_solve,
    estimate_tree_nodes,
    exact_value_oracle,
    exploitability,
    sequence_form_value,
    uniform_strategy,
)
from zsposg.dpomdp import load_benchmark
from zsposg.game import Role, embed_matrix_game
from zsposg.lp import solve_matrix_game

from conftest import tiny_games, zero_reward_game


def test_matrix_tree_counts(skewed):
    tree = build_extensive_form(skewed)
    assert tree.n_nodes == 1
    assert tree.n_infosets(Role.MAX) == 1
    assert tree.n_infosets(Role.MIN) == 1
    assert tree.n_terminals == 4


def test_tiger_five_is_oom():
    g = load_benchmark("adversarialtiger", 5)
    assert estimate_tree_nodes(g, 5) * 2048 > 2 * 1024**3
    with pytest.raises(TreeTooLarge):
        build_extensive_form(g, memory_budget=2 * 1024**3)


def test_horizon_one_single_node():
    g = load_benchmark("recycling", 1)
    tree = build_extensive_form(g)
    assert len(tree.stages) == 1
    assert tree.stages[0].weight.shape == (1, g.n_states)


def test_cfr_pennies_matrix(pennies):
    res = cfr_plus_solve(build_extensive_form(pennies), iterations=1000)
    assert res.value == pytest.approx(0.0, abs=1e-3)
    for strat in res.avg_strategies:
        assert strat[0][0] == pytest.approx([0.5, 0.5], abs=1e-2)


def test_cfr_skewed(skewed):
    res = cfr_plus_solve(build_extensive_form(skewed), iterations=2000)
    assert res.value == pytest.approx(1.5, abs=1e-3)


def test_cfr_mabc_three_matches_oracle():
    g = load_benchmark("mabc", 3)
    tree = build_extensive_form(g)
    res = cfr_plus_solve(tree, iterations=5000, target_exploitability=1e-3)
    assert res.status == "converged"
    assert res.value == pytest.approx(sequence_form_value(g, tree=tree)[0], abs=1e-3)


def test_best_response_cases(pennies, skewed):
    tree = build_extensive_form(pennies)
    assert best_response_value(tree, uniform_strategy(tree, Role.MAX), Role.MIN) == pytest.approx(0.0)
    tree = build_extensive_form(skewed)
    row0 = [np.array([[1.0, 0.0]])]
    assert best_response_value(tree, row0, Role.MIN) == pytest.approx(0.0)


def test_tiger_two_exploitability():
    tree = build_extensive_form(load_benchmark("adversarialtiger", 2))
    res = cfr_plus_solve(tree, iterations=3000, target_exploitability=1e-3)
    assert exploitability(tree, *res.avg_strategies) <= 1e-2


def test_regrets_stay_nonnegative():
    tree = build_extensive_form(load_benchmark("recycling", 2))
    res = cfr_plus_solve(tree, iterations=50, check_regrets=True)
    for table in res.tables:
        assert all(np.all(r >= 0) for r in table.regrets)


def test_oot_keeps_partials():
    tree = build_extensive_form(load_benchmark("mabc", 3))
    res = cfr_plus_solve(tree, iterations=10**6, time_budget=0.05)
    assert res.status == "oot"
    assert np.isfinite(res.value)


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4))
def test_oracle_reduces_to_matrix_game(seed, m, n):
    a = np.random.default_rng(seed).integers(-5, 6, size=(m, n)).astype(float)
    assert exact_value_oracle(embed_matrix_game(a)) == pytest.approx(solve_matrix_game(a)[0], abs=1e-9)


@pytest.mark.parametrize("horizon", [1, 2, 3])
def test_oracle_zero_reward(horizon):
    g = zero_reward_game(horizon)
    assert sequence_form_value(g)[0] == pytest.approx(0.0, abs=1e-12)
    if horizon < 3:
        assert exact_value_oracle(g) == pytest.approx(0.0, abs=1e-12)


def test_oracle_pennies_two():
    assert exact_value_oracle(load_benchmark("matchingpennies", 2)) == pytest.approx(0.2, abs=1e-6)


def test_oracle_refuses_large():
    with pytest.raises(OracleTooLarge):
        exact_value_oracle(load_benchmark("adversarialtiger", 3))


@pytest.mark.parametrize("game", tiny_games(3, 12), ids=lambda g: "tiny")
def test_enumeration_and_sequence_form_agree(game):
    assert exact_value_oracle(game) == pytest.approx(sequence_form_value(game)[0], abs=1e-7)
