import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zsposg.dpomdp import load_benchmark
from zsposg.game import Role, embed_matrix_game, random_game
from zsposg.occupancy import (
    DecisionRule,
    JointDecisionRule,
    evaluate_joint_policy,
    initial_occupancy,
    step,
)
from zsposg.pbvi import SolverConfig, solve
from zsposg.value import (
    END,
    AlphaVector,
    Collection,
    Family,
    PlanTable,
    alpha_vectors,
    dump_families,
    eval_alpha,
    eval_collection,
    eval_family,
    load_families,
    prune_alpha,
    prune_collections,
    to_linear_basis,
    witness_conditionals,
)


def one_stage_collection(game, rule, pids=()):
    table = PlanTable(game)
    end = Collection.boundary(table)
    u1, z1 = game.n_controls[0], game.n_observations[0]
    keys = [()]
    return Collection(0, keys, {}, np.atleast_2d(rule), (end,), np.ones((2, u1, z1, 1)), table, plans=pids)


def with_vectors(col, vectors):
    """Replace the collection's vectors by explicit arrays ``[v, x, k]``."""
    col.vectors = np.asarray(vectors, dtype=float)
    col.plans = list(range(len(col.vectors)))
    return col


def stage_one_points(seed, count):
    rng = np.random.default_rng(seed)
    g = random_game(rng, 2, (2, 2), (2, 2), horizon=2)
    out = []
    for _ in range(count):
        s0 = initial_occupancy(g)
        out.append(step(g, s0, rng.dirichlet(np.ones(2), 1), rng.dirichlet(np.ones(2), 1)))
    return g, out


def test_eval_alpha_cases():
    const = AlphaVector(Role.MIN, 0, {(0, ()): 4.0, (1, ()): 4.0})
    assert eval_alpha(const, {(0, ()): 0.3, (1, ()): 0.7}) == pytest.approx(4.0)
    v = AlphaVector(Role.MIN, 1, {(0, (0, 0)): 1.0, (1, (0, 1)): 3.0})
    assert eval_alpha(v, {(1, (0, 1)): 1.0}) == 3.0
    assert eval_alpha(v, {(0, (0, 0)): 0.5, (1, (0, 1)): 0.5}) == pytest.approx(2.0)


def test_boundary_collection_is_zero():
    g = random_game(0, horizon=1)
    col = Collection.boundary(PlanTable(g))
    assert col.vector_of(END).shape == (2, 1)
    s = initial_occupancy(g)
    assert float(col.vector_of(END).sum()) == 0.0
    assert eval_collection(with_vectors(one_stage_collection(g, [1.0, 0.0]), np.zeros((1, 2, 2))), s) == 0.0


def test_two_constant_vectors_take_min():
    g = random_game(0, horizon=1)
    col = with_vectors(one_stage_collection(g, [0.5, 0.5]), [np.ones((2, 2)), -np.ones((2, 2))])
    assert eval_collection(col, initial_occupancy(g)) == pytest.approx(-1.0)


@pytest.mark.parametrize("p", [0.0, 0.25, 0.6, 1.0])
def test_policy_collection_is_security_level(skewed, p):
    col = one_stage_collection(skewed, [p, 1 - p])
    for b in range(2):
        col.activate(col.table.intern(0, b, (END,)))
    s0 = initial_occupancy(skewed)
    oracle = min(
        evaluate_joint_policy(skewed, [JointDecisionRule(
            DecisionRule(Role.MAX, 0, {(): [p, 1 - p]}, 2),
            DecisionRule.deterministic(Role.MIN, 0, {(): b}, 2),
        )])
        for b in range(2)
    )
    assert eval_collection(col, s0) == pytest.approx(oracle)


def test_family_of_one():
    g = random_game(1, horizon=1)
    col = with_vectors(one_stage_collection(g, [1.0, 0.0]), [np.full((2, 2), 0.7)])
    s = initial_occupancy(g)
    value, arg = eval_family(Family(0, Role.MAX, [col]), s)
    assert value == pytest.approx(col.evaluate(s))
    assert arg is col


def test_linear_basis():
    g = random_game(2, horizon=1)
    s = initial_occupancy(g)
    single = with_vectors(one_stage_collection(g, [1.0, 0.0]), [np.array([[1.0, 0.0], [2.0, 0.0]])])
    lb = to_linear_basis(single, s)
    assert lb.assignment == {(): 0}
    assert lb(s) == pytest.approx(single.evaluate(s))
    pair = with_vectors(one_stage_collection(g, [1.0, 0.0]), [np.full((2, 2), 5.0), np.full((2, 2), -3.0)])
    lb = to_linear_basis(pair, s)
    assert lb.assignment == {(): 1}
    assert lb(s) == pytest.approx(-3.0)


def test_alpha_vectors_export(skewed):
    col = one_stage_collection(skewed, [0.25, 0.75])
    for b in range(2):
        col.activate(col.table.intern(0, b, (END,)))
    vecs = alpha_vectors(col)
    assert [v.values[(0, ())] for v in vecs] == pytest.approx([1.5, 1.5])
    assert all(len(v.plan_tag) == 1 for v in vecs)


def test_prune_duplicates_with_zero_eps():
    g = random_game(0, horizon=1)
    v = np.random.default_rng(0).normal(size=(2, 2))
    col = with_vectors(one_stage_collection(g, [1.0, 0.0]), [v, v, v + 1.0])
    w = witness_conditionals(col, [initial_occupancy(g)])
    before = np.einsum("vxk,wxk->vw", col.vectors, w).min(axis=0)
    prune_alpha(col, w, 0.0)
    assert len(col.vectors) == 1
    assert np.einsum("vxk,wxk->vw", col.vectors, w).min(axis=0) == pytest.approx(before)


def test_prune_dominated_vector():
    g = random_game(0, horizon=1)
    low = np.zeros((2, 2))
    col = with_vectors(one_stage_collection(g, [1.0, 0.0]), [low + 0.5, low])
    prune_alpha(col, witness_conditionals(col, [initial_occupancy(g)]), 0.1)
    assert len(col.vectors) == 1
    assert col.vectors[0] == pytest.approx(low)


@given(st.integers(0, 10_000))
def test_prune_alpha_bounded_loss(seed):
    rng = np.random.default_rng(seed)
    g = random_game(0, horizon=1)
    col = with_vectors(one_stage_collection(g, [1.0, 0.0]), rng.normal(size=(10, 2, 2)))
    w = rng.dirichlet(np.ones(4), size=20).reshape(20, 2, 2)
    before = np.einsum("vxk,wxk->vw", col.vectors, w).min(axis=0)
    prune_alpha(col, w, 0.01)
    after = np.einsum("vxk,wxk->vw", col.vectors, w).min(axis=0)
    assert np.all(after >= before - 1e-12)
    assert np.all(after <= before + 0.01 + 1e-12)


def random_collections(g, points, rng, n):
    keys = sorted({h for s in points for h in s.histories[0]})
    table = PlanTable(g)
    end = Collection.boundary(table)
    cols = []
    for _ in range(n):
        col = Collection(1, keys, {}, np.full((len(keys), 2), 0.5), (end,), np.ones((len(keys) + 1, 2, 2, 1)), table)
        cols.append(with_vectors(col, rng.normal(size=(3, 2, len(keys) + 1))))
    return cols


def test_identical_collections_one_survives():
    g, points = stage_one_points(0, 3)
    rng = np.random.default_rng(0)
    a = random_collections(g, points, rng, 1)[0]
    b = random_collections(g, points, rng, 1)[0]
    with_vectors(b, a.vectors.copy())
    fam = Family(1, Role.MAX, [a, b], witnesses=points)
    prune_collections(fam, 0.0)
    assert len(fam.collections) == 1


def test_dominated_collection_removed():
    g, points = stage_one_points(1, 3)
    rng = np.random.default_rng(1)
    a, b = random_collections(g, points, rng, 2)
    with_vectors(b, a.vectors - 1.0)
    fam = Family(1, Role.MAX, [a, b], witnesses=points)
    prune_collections(fam, 0.1)
    assert fam.collections == [a]


@given(st.integers(0, 10_000))
def test_prune_collections_bounded_loss(seed):
    g, points = stage_one_points(seed, 6)
    cols = random_collections(g, points, np.random.default_rng(seed), 8)
    fam = Family(1, Role.MAX, cols, witnesses=points)
    before = [eval_family(fam, s)[0] for s in points]
    prune_collections(fam, 0.05)
    after = [eval_family(fam, s)[0] for s in points]
    assert np.all(np.array(after) >= np.array(before) - 0.05 - 1e-12)


def test_protected_collection_kept():
    g, points = stage_one_points(2, 3)
    rng = np.random.default_rng(2)
    a, b = random_collections(g, points, rng, 2)
    with_vectors(b, a.vectors - 1.0)
    fam = Family(1, Role.MAX, [a, b], witnesses=points)
    prune_collections(fam, 0.1, protect={b.id})
    assert len(fam.collections) == 2


def test_minimizer_family_value_is_negated(pennies):
    col = with_vectors(one_stage_collection(pennies.swapped(), [1.0, 0.0]), [np.full((1, 2), 0.3)])
    assert eval_family(Family(0, Role.MIN, [col]), initial_occupancy(pennies))[0] == pytest.approx(-0.3)


def test_dump_load_round_trip():
    g = load_benchmark("recycling", 3)
    res = solve(g, config=SolverConfig(max_iterations=2))
    fams = [f for stages in res.families.values() for f in stages]
    buf = io.StringIO()
    dump_families(fams, buf)
    text = buf.getvalue()
    assert text.startswith("# zsposg-family v2\n")
    loaded = load_families(io.StringIO(text), g)
    s0 = initial_occupancy(g)
    by_key = {(f.role, f.stage): f for f in loaded}
    for f in fams:
        if f.stage == 0:
            assert eval_family(by_key[(f.role, 0)], s0)[0] == pytest.approx(eval_family(f, s0)[0], abs=1e-12)
    with pytest.raises(ValueError):
        load_families(io.StringIO("# other format\n"), g)
