import numpy as np
import pytest
from hypothesis import given, strategies as st

from zsposg.dpomdp import (
    DpomdpSyntaxError,
    load_benchmark,
    load_dpomdp,
    benchmark_path,
    parse_dpomdp,
    serialize_dpomdp,
)
from zsposg.cfr import exact_value_oracle
from zsposg.game import Role, ZsPosg, competitive_adaptation, embed_matrix_game, random_game, validate

MINIMAL = """\
agents: 2
discount: 1
values: reward
states: only
start: uniform
actions:
go
go
observations:
seen
seen
T: * : * : * : 1
O: * : * : * : 1
R: * : * : * : * : 1
"""


def test_minimal_file_parses():
    g = parse_dpomdp(MINIMAL)
    assert g.n_states == 1
    assert g.n_controls == (1, 1)
    assert g.n_observations == (1, 1)
    assert np.all(g.reward == 1.0)
    assert validate(g).ok


def test_missing_transitions_rejected():
    text = "\n".join(line for line in MINIMAL.splitlines() if not line.startswith("T:"))
    with pytest.raises(DpomdpSyntaxError, match=r"transition undefined for \(x,u\)"):
        parse_dpomdp(text)


def test_tiger_shape_and_reward_range():
    g = load_benchmark("adversarialtiger")
    assert g.n_states == 2
    assert g.n_controls == (3, 3)
    assert g.n_observations == (2, 2)
    assert g.reward_bounds() == (-101.0, 20.0)


@pytest.mark.parametrize("name", ["adversarialtiger", "competitivetiger", "recycling", "mabc", "matchingpennies"])
def test_bundled_benchmarks_valid(name):
    g = load_benchmark(name, 3)
    assert validate(g).ok
    assert g.roles_annotated
    assert g.horizon == 3


def test_unknown_benchmark():
    with pytest.raises(FileNotFoundError):
        benchmark_path("no-such-game")


def test_adaptation_keeps_payoffs():
    g = parse_dpomdp(MINIMAL)
    a = competitive_adaptation(g)
    assert a.roles_annotated
    assert np.array_equal(a.reward, g.reward)
    assert np.array_equal(a.transition, g.transition)
    raw = load_dpomdp(benchmark_path("adversarialtiger"))
    assert competitive_adaptation(raw).reward_bounds() == (-101.0, 20.0)


def test_validate_reports_transition_mass():
    g = random_game(0, 2, (2, 2), (2, 2))
    p = np.array(g.transition)
    p[0, 0, 0] *= 0.5
    report = validate(g.replace(transition=p))
    assert not report.ok
    assert max(m for _, m in report.violations) == pytest.approx(0.5)


def test_validate_reports_belief_mass():
    g = random_game(0, 2, (2, 2), (2, 2))
    report = validate(g.replace(initial_belief=np.array([0.6, 0.6])))
    assert [m for loc, m in report.violations if "belief" in loc] == [pytest.approx(0.2)]


def test_constructor_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ZsPosg(np.ones((1, 1, 1, 1, 1)), np.zeros((1, 1, 1)), np.ones(1))
    with pytest.raises(ValueError):
        ZsPosg(np.ones((1, 1, 1, 1, 1, 1)), np.zeros((1, 2, 1)), np.ones(1))
    with pytest.raises(ValueError):
        ZsPosg(np.ones((1, 1, 1, 1, 1, 1)), np.zeros((1, 1, 1)), np.ones(1), horizon=0)


def test_embed_pennies_shape(pennies):
    assert pennies.n_states == 1
    assert pennies.n_controls == (2, 2)
    assert pennies.n_observations == (1, 1)
    assert pennies.horizon == 1
    assert exact_value_oracle(pennies) == pytest.approx(0.0)


@pytest.mark.parametrize("payoff, value", [([[2.0]], 2.0), ([[3.0, 0.0], [1.0, 2.0]], 1.5)])
def test_embed_values(payoff, value):
    assert exact_value_oracle(embed_matrix_game(payoff)) == pytest.approx(value)


def test_swapped_negates_and_swaps():
    g = random_game(3, 2, (2, 3), (2, 1))
    s = g.swapped()
    assert s.n_controls == (3, 2)
    assert s.n_observations == (1, 2)
    assert np.allclose(s.reward[:, 2, 1], -g.reward[:, 1, 2])
    assert np.allclose(s.swapped().reward, g.reward)
    assert Role.MAX.other == Role.MIN


@given(st.integers(0, 10_000), st.integers(1, 2), st.integers(1, 3), st.integers(1, 2))
def test_serialize_round_trip(seed, nx, nu, nz):
    g = random_game(seed, nx, (nu, 2), (nz, 2), horizon=2)
    back = parse_dpomdp(serialize_dpomdp(g), horizon=2)
    assert np.allclose(back.transition, g.transition, atol=1e-12)
    assert np.allclose(back.reward, g.reward, atol=1e-12)
    assert np.allclose(back.initial_belief, g.initial_belief, atol=1e-12)
    assert back.discount == g.discount


def test_bundled_round_trip():
    g = load_benchmark("recycling", 2)
    back = parse_dpomdp(serialize_dpomdp(g), horizon=2)
    assert np.allclose(back.transition, g.transition, atol=1e-12)
    assert np.allclose(back.reward, g.reward, atol=1e-12)


def test_remaining_weight():
    g = random_game(0, horizon=3)
    assert g.remaining_weight(0) == 3
    assert g.replace(discount=0.5).remaining_weight(1) == pytest.approx(1.5)
