"""Extensive-form baselines: CFR+, best responses and exact oracles.

The game is unrolled into a layered tree of joint histories.  Node ``n``
of stage ``t`` stores the chance-weighted state vector
``weight[n, x] = Pr(x, joint history n)`` under the players choosing the
controls recorded in the history.  Player information sets at a stage
are the individual histories.  Simultaneous moves need no serialization
order here: the minimizer's information set never contains the
maximizer's current control.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .game import Role, ZsPosg, check_game
from .lp import LpError, solve_arrays, solve_matrix_game

NODE_BYTES = 2048
DEFAULT_MEMORY = 2 * 1024**3
ORACLE_LIMIT = 10**4


class TreeTooLarge(MemoryError):
    pass


class OracleTooLarge(ValueError):
    pass


@dataclass
class Stage:
    weight: np.ndarray  # [n, x]
    info: tuple  # (infoset id per node for MAX, for MIN)
    histories: tuple  # (list of MAX histories, list of MIN histories)
    imm: np.ndarray = None  # [n, a, b]
    child: np.ndarray = None  # [n, a, b, z1, z2] -> next-stage node or -1
    child_info: tuple = None  # per role [i, u, z] -> next-stage infoset or -1


@dataclass
class ExtensiveTree:
    game: ZsPosg
    horizon: int
    stages: list

    @property
    def n_nodes(self):
        return sum(len(s.weight) for s in self.stages)

    def n_infosets(self, role):
        return sum(len(s.histories[Role(role)]) for s in self.stages)

    @property
    def n_terminals(self):
        u1, u2 = self.game.n_controls
        last = self.stages[-1]
        return len(last.weight) * u1 * u2


def estimate_tree_nodes(game: ZsPosg, horizon: int) -> int:
    u1, u2 = game.n_controls
    z1, z2 = game.n_observations
    branching = u1 * u2 * z1 * z2
    return sum(branching**t for t in range(horizon))


def build_extensive_form(game: ZsPosg, horizon: int | None = None,
                         memory_budget: float = DEFAULT_MEMORY) -> ExtensiveTree:
    """Unroll ``game``; raises :class:`TreeTooLarge` when the size estimate exceeds the budget."""
    check_game(game)
    horizon = game.horizon if horizon is None else int(horizon)
    need = estimate_tree_nodes(game, horizon) * NODE_BYTES
    if need > memory_budget:
        raise TreeTooLarge(f"tree needs about {need / 2**20:.0f} MB, budget {memory_budget / 2**20:.0f} MB")
    u1, u2 = game.n_controls
    z1, z2 = game.n_observations
    nx = game.n_states
    root = Stage(game.initial_belief[None, :].copy(), (np.zeros(1, int), np.zeros(1, int)), ([()], [()]))
    stages = [root]
    node_h = [((), ())]
    for t in range(horizon):
        st = stages[-1]
        st.imm = np.einsum("nx,xab->nab", st.weight, game.reward)
        if t == horizon - 1:
            break
        nxt = np.einsum("nx,xabyuv->nabuvy", st.weight, game.transition, optimize=True)
        mass = nxt.sum(axis=-1)
        alive = np.argwhere(mass > 0)
        child = np.full(mass.shape, -1, dtype=int)
        child[tuple(alive.T)] = np.arange(len(alive))
        weight = nxt[tuple(alive.T)]
        idx = [{}, {}]
        hist = [[], []]
        info = [np.empty(len(alive), int), np.empty(len(alive), int)]
        new_h = []
        for k, (n, a, b, o1, o2) in enumerate(alive):
            h1 = node_h[n][0] + (int(a), int(o1))
            h2 = node_h[n][1] + (int(b), int(o2))
            for role, h in ((0, h1), (1, h2)):
                if h not in idx[role]:
                    idx[role][h] = len(hist[role])
                    hist[role].append(h)
                info[role][k] = idx[role][h]
            new_h.append((h1, h2))
        ci = []
        for role, (nu, nz) in enumerate(((u1, z1), (u2, z2))):
            table = np.full((len(st.histories[role]), nu, nz), -1, dtype=int)
            for i, h in enumerate(st.histories[role]):
                for u in range(nu):
                    for z in range(nz):
                        table[i, u, z] = idx[role].get(h + (u, z), -1)
            ci.append(table)
        st.child = child
        st.child_info = tuple(ci)
        stages.append(Stage(weight, tuple(info), (hist[0], hist[1])))
        node_h = new_h
    return ExtensiveTree(game, horizon, stages)


# -- strategy evaluation ---------------------------------------------------
def uniform_strategy(tree: ExtensiveTree, role: Role):
    n_u = tree.game.n_controls[Role(role)]
    return [np.full((len(s.histories[Role(role)]), n_u), 1.0 / n_u) for s in tree.stages]


def _node_reach(tree, role, strategy):
    """Own-reach probability per node under ``strategy``."""
    role = Role(role)
    reach = [np.ones(1)]
    for t, st in enumerate(tree.stages[:-1]):
        sig = strategy[t][st.info[role]]  # [n, u]
        r = reach[-1][:, None] * sig
        nxt = np.zeros(len(tree.stages[t + 1].weight))
        alive = st.child >= 0
        # broadcast own probability onto every child slot
        shape = st.child.shape
        own = r[:, :, None, None, None] if role == Role.MAX else r[:, None, :, None, None]
        own = np.broadcast_to(own, shape)
        nxt[st.child[alive]] = own[alive]
        reach.append(nxt)
    return reach


def _joint_values(tree, sig1, sig2):
    """``Q[t][n, a, b]`` and node values ``V[t][n]`` (chance-weighted)."""
    gamma = tree.game.discount
    q_all = [None] * len(tree.stages)
    v_all = [None] * len(tree.stages)
    v_next = None
    for t in range(len(tree.stages) - 1, -1, -1):
        st = tree.stages[t]
        q = st.imm.copy()
        if v_next is not None:
            padded = np.append(v_next, 0.0)
            q += gamma * padded[st.child].sum(axis=(3, 4))
        p1 = sig1[t][st.info[0]]
        p2 = sig2[t][st.info[1]]
        v = np.einsum("nab,na,nb->n", q, p1, p2)
        q_all[t], v_all[t] = q, v
        v_next = v
    return q_all, v_all


def expected_value(tree, sig1, sig2) -> float:
    return float(_joint_values(tree, sig1, sig2)[1][0][0])


def best_response_value(tree: ExtensiveTree, fixed_strategy, responder: Role) -> float:
    """Exact best-response value of ``responder`` against the opponent's ``fixed_strategy``."""
    responder = Role(responder)
    fixed = responder.other
    for t, st in enumerate(tree.stages):
        if fixed_strategy[t].shape[0] != len(st.histories[fixed]):
            raise ValueError(f"strategy at stage {t} does not cover the opponent's information sets")
    reach = _node_reach(tree, fixed, fixed_strategy)
    gamma = tree.game.discount
    pick = np.max if responder == Role.MAX else np.min
    br_next = None
    for t in range(len(tree.stages) - 1, -1, -1):
        st = tree.stages[t]
        sig = fixed_strategy[t][st.info[fixed]]
        if responder == Role.MIN:
            imm = np.einsum("nab,na->nb", st.imm, sig) * reach[t][:, None]
        else:
            imm = np.einsum("nab,nb->na", st.imm, sig) * reach[t][:, None]
        n_info = len(st.histories[responder])
        agg = np.zeros((n_info, imm.shape[1]))
        np.add.at(agg, st.info[responder], imm)
        if br_next is not None:
            padded = np.append(br_next, 0.0)
            agg += gamma * padded[st.child_info[responder]].sum(axis=2)
        br_next = pick(agg, axis=1)
    return float(br_next[0])


def exploitability(tree, sig1, sig2) -> float:
    return best_response_value(tree, sig2, Role.MAX) - best_response_value(tree, sig1, Role.MIN)


# -- CFR+ ------------------------------------------------------------------
@dataclass
class RegretTable:
    regrets: list
    strategy_sum: list

    def current(self, t):
        r = self.regrets[t]
        tot = r.sum(axis=1, keepdims=True)
        u = r.shape[1]
        return np.where(tot > 0, r / np.where(tot > 0, tot, 1.0), 1.0 / u)

    def average(self):
        out = []
        for s in self.strategy_sum:
            tot = s.sum(axis=1, keepdims=True)
            u = s.shape[1]
            out.append(np.where(tot > 0, s / np.where(tot > 0, tot, 1.0), 1.0 / u))
        return out


@dataclass
class CfrResult:
    value: float
    avg_strategies: tuple
    trace: list
    status: str = "converged"
    exploitability: float = float("nan")
    iterations: int = 0
    tables: tuple = field(default=(), repr=False)


def _new_table(tree, role):
    n_u = tree.game.n_controls[Role(role)]
    return RegretTable(
        [np.zeros((len(s.histories[Role(role)]), n_u)) for s in tree.stages],
        [np.zeros((len(s.histories[Role(role)]), n_u)) for s in tree.stages],
    )


def _update(tree, role, table, own, other, weight, check_nonnegative=False):
    """One regret-matching+ update of ``role`` against the fixed ``other``."""
    role = Role(role)
    sig1, sig2 = (own, other) if role == Role.MAX else (other, own)
    q_all, _ = _joint_values(tree, sig1, sig2)
    opp = _node_reach(tree, role.other, other)
    mine = _node_reach(tree, role, own)
    sign = 1.0 if role == Role.MAX else -1.0
    for t, st in enumerate(tree.stages):
        if role == Role.MAX:
            cf = np.einsum("nab,nb->na", q_all[t], sig2[t][st.info[1]])
        else:
            cf = np.einsum("nab,na->nb", q_all[t], sig1[t][st.info[0]])
        cf = cf * opp[t][:, None] * sign
        n_info = len(st.histories[role])
        agg = np.zeros((n_info, cf.shape[1]))
        np.add.at(agg, st.info[role], cf)
        base = (agg * own[t]).sum(axis=1, keepdims=True)
        table.regrets[t] = np.maximum(table.regrets[t] + agg - base, 0.0)
        own_reach = np.zeros(n_info)
        np.maximum.at(own_reach, st.info[role], mine[t])
        table.strategy_sum[t] += weight * own_reach[:, None] * own[t]
        if check_nonnegative and np.any(table.regrets[t] < 0):
            raise AssertionError("negative cumulative regret")


def cfr_plus_solve(tree: ExtensiveTree, iterations: int = 1000, time_budget: float = float("inf"),
                   trace_every: int = 1, check_regrets: bool = False,
                   target_exploitability: float = 0.0) -> CfrResult:
    """CFR+ with alternating updates and iteration-weighted averaging.

    ``trace`` rows are ``(iteration, value, exploitability)`` of the
    average strategies.  Stops early once exploitability falls to
    ``target_exploitability``.
    """
    t1, t2 = _new_table(tree, Role.MAX), _new_table(tree, Role.MIN)
    start = time.monotonic()
    trace = []
    status = "iteration_cap"
    it = 0
    for it in range(1, iterations + 1):
        sig2 = [t2.current(t) for t in range(len(tree.stages))]
        sig1 = [t1.current(t) for t in range(len(tree.stages))]
        _update(tree, Role.MAX, t1, sig1, sig2, it, check_regrets)
        sig1 = [t1.current(t) for t in range(len(tree.stages))]
        _update(tree, Role.MIN, t2, sig2, sig1, it, check_regrets)
        if it % trace_every == 0 or it == iterations:
            a1, a2 = t1.average(), t2.average()
            trace.append((it, expected_value(tree, a1, a2), exploitability(tree, a1, a2)))
            if trace[-1][2] <= target_exploitability:
                status = "converged"
                break
        if time.monotonic() - start > time_budget:
            status = "oot"
            break
    a1, a2 = t1.average(), t2.average()
    return CfrResult(
        expected_value(tree, a1, a2), (a1, a2), trace, status,
        exploitability(tree, a1, a2), it, (t1, t2),
    )


def strategy_from_rules(tree: ExtensiveTree, role: Role, rules):
    """Tree-aligned strategy arrays from per-stage :class:`DecisionRule` objects."""
    role = Role(role)
    return [rules[t].matrix(st.histories[role]) for t, st in enumerate(tree.stages)]


def security_value(game: ZsPosg, role: Role, rules, tree: ExtensiveTree | None = None) -> float:
    """Worst-case value of ``role`` playing ``rules`` (payoff to the maximizer)."""
    tree = tree or build_extensive_form(game)
    strat = strategy_from_rules(tree, role, rules)
    return best_response_value(tree, strat, Role(role).other)


# -- exact oracles -----------------------------------------------------------
def pure_policy_count(tree: ExtensiveTree, role: Role) -> int:
    role = Role(role)
    n_u = tree.game.n_controls[role]
    total = 1
    for st in tree.stages:
        total *= n_u ** len(st.histories[role])
        if total > 10**12:
            break
    return total


def pure_policies(tree, role):
    """Every deterministic policy of ``role`` as tree-aligned strategy arrays."""
    role = Role(role)
    n_u = tree.game.n_controls[role]
    sizes = [len(st.histories[role]) for st in tree.stages]
    for flat in itertools.product(range(n_u), repeat=sum(sizes)):
        out, k = [], 0
        for n in sizes:
            out.append(np.eye(n_u)[list(flat[k:k + n])].reshape(n, n_u))
            k += n
        yield out


def _realization(tree, role, strategies):
    """``R[p, t][n, u]``: own reach of node ``n`` times the control probability."""
    reach = _node_reach(tree, role, strategies)
    return [reach[t][:, None] * strategies[t][st.info[Role(role)]] for t, st in enumerate(tree.stages)]


def payoff_matrix(tree: ExtensiveTree, limit: int = ORACLE_LIMIT):
    """Payoffs of every pure policy pair, computed bilinearly over tree nodes."""
    for role in Role:
        if pure_policy_count(tree, role) > limit:
            raise OracleTooLarge(f"{role.name} has more than {limit} pure policies")
    gamma = tree.game.discount
    r1 = [_realization(tree, Role.MAX, p) for p in pure_policies(tree, Role.MAX)]
    r2 = [_realization(tree, Role.MIN, p) for p in pure_policies(tree, Role.MIN)]
    m = np.zeros((len(r1), len(r2)))
    for t, st in enumerate(tree.stages):
        a = np.stack([r[t] for r in r1])  # [p, n, u1]
        b = np.stack([r[t] for r in r2])  # [q, n, u2]
        m += gamma**t * np.einsum("pna,nab,qnb->pq", a, st.imm, b, optimize=True)
    return m


def exact_value_oracle(game: ZsPosg, horizon: int | None = None, limit: int = ORACLE_LIMIT) -> float:
    """Game value by enumerating pure policies and solving the matrix game."""
    game = game if horizon is None else game.with_horizon(horizon)
    tree = build_extensive_form(game, memory_budget=float("inf"))
    value, _, _ = solve_matrix_game(payoff_matrix(tree, limit))
    return value


def sequence_form_value(game: ZsPosg, horizon: int | None = None, tree: ExtensiveTree | None = None):
    """Game value from the sequence-form linear program.

    Returns ``(value, realization_plan_max)``.  Polynomial in the tree
    size, so it reaches horizons where pure-policy enumeration cannot.
    """
    game = game if horizon is None else game.with_horizon(horizon)
    tree = tree or build_extensive_form(game, memory_budget=float("inf"))
    u1, u2 = game.n_controls
    seq = []
    for role, n_u in ((0, u1), (1, u2)):
        # sequence 0 is empty; infoset i of stage t owns sequences offset[t] + i*n_u + u
        offsets, total = [], 1
        for st in tree.stages:
            offsets.append(total)
            total += len(st.histories[role]) * n_u
        seq.append((offsets, total))

    def parent_seq(role, t, i):
        if t == 0:
            return 0
        n_u = (u1, u2)[role]
        h = tree.stages[t].histories[role][i]
        pi = _index(tree, role, t - 1)[h[:-2]]
        return seq[role][0][t - 1] + pi * n_u + h[-2]

    def constraints(role):
        n_u = (u1, u2)[role]
        offsets, total = seq[role]
        rows, cols, vals = [0], [0], [1.0]
        r = 1
        for t, st in enumerate(tree.stages):
            for i in range(len(st.histories[role])):
                for u in range(n_u):
                    rows.append(r)
                    cols.append(offsets[t] + i * n_u + u)
                    vals.append(1.0)
                rows.append(r)
                cols.append(parent_seq(role, t, i))
                vals.append(-1.0)
                r += 1
        rhs = np.zeros(r)
        rhs[0] = 1.0
        return sparse.csr_matrix((vals, (rows, cols)), shape=(r, total)), rhs

    e_mat, e_rhs = constraints(0)
    f_mat, f_rhs = constraints(1)
    rows, cols, vals = [], [], []
    gamma = game.discount
    for t, st in enumerate(tree.stages):
        i1, i2 = st.info
        for a in range(u1):
            for b in range(u2):
                rows.append(seq[0][0][t] + i1 * u1 + a)
                cols.append(seq[1][0][t] + i2 * u2 + b)
                vals.append(gamma**t * st.imm[:, a, b])
    pay = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(seq[0][1], seq[1][1]),
    )
    n1, nq = seq[0][1], f_mat.shape[0]
    # max f_rhs.q  s.t.  F^T q - A^T x <= 0,  E x = e,  x >= 0
    c = np.concatenate([np.zeros(n1), f_rhs])
    a_ub = sparse.hstack([-pay.T, f_mat.T]).tocsc()
    a_eq = sparse.hstack([e_mat, sparse.csr_matrix((e_mat.shape[0], nq))]).tocsc()
    bounds = [(0.0, None)] * n1 + [(None, None)] * nq
    sol = solve_arrays(c, "max", a_ub, np.zeros(a_ub.shape[0]), a_eq, e_rhs, bounds)
    if not sol.optimal:
        raise LpError(f"sequence-form LP failed: {sol.status}")
    return float(sol.objective), sol.primal[:n1]


def _index(tree, role, t):
    cache = tree.__dict__.setdefault("_hindex", {})
    key = (role, t)
    if key not in cache:
        cache[key] = {h: i for i, h in enumerate(tree.stages[t].histories[role])}
    return cache[key]
