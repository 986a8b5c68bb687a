"""Greedy selection and point-based backups.

Everything is written for the maximizer of the game at hand; the
minimizer's operators run the same code on ``game.swapped()`` with the
occupancy state viewed through ``s.swapped()``.

The greedy LP at occupancy state ``s`` against the next-stage family
``{V_m}`` chooses the maximizer's rule ``pi[i, a]`` together with a
continuation mixture ``y[i, a, z1, m]`` (history ``i`` continues as
collection ``m`` after control ``a`` and observation ``z1``):

    max  sum_j w[j]
    s.t. w[j] <= sum_{i,a} pi[i,a] imm[i,a,j,b] + gamma * sum_z g[j,b,z]    for all j, b
         g[j,b,z] <= sum_{i,a,z1,m} y[i,a,z1,m] C_p[i,a,z1,m,j,b,z]       for all j, b, z, plans p
         sum_m y[i,a,z1,m] = pi[i,a],   sum_a pi[i,a] = 1

``C_p`` is the value of opponent plan ``p`` against collection ``m``
from the unnormalized successor of ``s``.  The minimizer's best response
decomposes over its histories, so this LP is equivalent to one with a
constraint per minimizer decision rule.  Mixing continuations lets the
maximizer randomize its future play, which a single stored collection
cannot express.

The plan pool only holds the plans found so far, so the LP can
overestimate.  With ``exact=True`` it is closed by constraint
generation: the minimizer's exact best response against the mixed
continuation is computed at every successor and added to the pool until
no constraint is violated.  The LP value is then the security value of
the stitched policy, a certified lower bound.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .game import Role, ZsPosg
from .lp import LpError, solve_arrays
from .occupancy import DecisionRule, OccupancyState
from .value import Collection, Family

MASS_EPS = 1e-14
VIOLATION_TOL = 1e-9
WEIGHT_EPS = 1e-12


class TimeBudgetExceeded(Exception):
    pass


class ResponseBudgetExceeded(Exception):
    pass


@dataclass
class ResponseContext:
    """Shared state for best-response searches within one solve."""

    deadline: float = float("inf")
    node_budget: int = 20000
    nodes: int = 0
    memo: dict = field(default_factory=dict)
    memo_cap: int = 200000
    skipped: int = 0

    def tick(self):
        self.nodes += 1
        if self.nodes > self.node_budget:
            raise ResponseBudgetExceeded
        if self.nodes % 64 == 0 and time.monotonic() > self.deadline:
            raise TimeBudgetExceeded


def _child_histories(histories, n_u, n_z):
    return tuple(h + (a, z) for h in histories for a in range(n_u) for z in range(n_z))


# -- exact best response ------------------------------------------------------
def best_response(game: ZsPosg, entries, ctx: ResponseContext):
    """Minimizer's best response against a weighted set of policies.

    ``entries`` is a list of ``(collection, c)`` with ``c[x, k]`` the
    unnormalized mass on (state, column) of that stage-``t`` collection.
    Returns ``(value, plan_id)``; the plan is interned in the collections'
    plan table and kept by every collection it was computed against.
    """
    table = entries[0][0].table
    stage = entries[0][0].stage
    if stage == table.horizon:
        return 0.0, 0
    fixed, live = 0.0, []
    for col, c in entries:
        if c.sum() <= MASS_EPS:
            continue
        if col.bound:
            fixed += col.level * float(c.sum())
        else:
            live.append((col, c))
    if not live:
        return fixed, table.default(stage)
    mass = sum(float(c.sum()) for _, c in live)
    key = tuple(sorted((col.id, np.round(c / mass, 10).tobytes()) for col, c in live))
    hit = ctx.memo.get(key)
    if hit is not None:
        unit, pid = hit
        for col, _ in live:
            # pruning may have dropped the plan since it was memoized
            col.activate(pid)
        return fixed + unit * mass, pid
    ctx.tick()
    u2, z2 = game.n_controls[1], game.n_observations[1]
    imm = np.zeros(u2)
    children = [[{} for _ in range(z2)] for _ in range(u2)]
    for col, c in live:
        w = c[:, :, None] * col.rule_full[None]  # [x, k, a]
        imm += np.einsum("xka,xab->b", w, game.reward, optimize=True)
        t = np.einsum("xka,xabyuv->bvykau", w, game.transition, optimize=True)
        t = t.reshape(u2, z2, game.n_states, -1)
        for m in col.active_nexts():
            nxt = col.nexts[m]
            succ = t @ col.onehot(m)  # [b, z2, y, k']
            for b in range(u2):
                for z in range(z2):
                    slot = children[b][z]
                    prev = slot.get(nxt.id)
                    slot[nxt.id] = (nxt, succ[b, z] if prev is None else prev[1] + succ[b, z])
    best = None
    for b in range(u2):
        total = imm[b]
        kids = []
        for z in range(z2):
            sub = list(children[b][z].values())
            v, pid = best_response(game, sub, ctx) if sub else (0.0, table.default(stage + 1))
            total += game.discount * v
            kids.append(pid)
        if best is None or total < best[0] - 1e-12:
            best = (total, b, kids)
    total, b, kids = best
    pid = table.intern(stage, b, kids)
    for col, _ in live:
        col.activate(pid)
    if len(ctx.memo) > ctx.memo_cap:
        ctx.memo.clear()
    ctx.memo[key] = (total / mass, pid)
    return fixed + total, pid


# -- greedy LP -------------------------------------------------------------------
@dataclass
class GreedyResult:
    rule: np.ndarray
    value: float
    sigma: np.ndarray  # plan id per (j, b, z2)
    candidates: list
    mix: np.ndarray  # y[i, a, z1, m]
    exact: bool
    lp_rounds: int = 1
    response: np.ndarray | None = None  # opponent's best control per history
    plan_ids: list = field(default_factory=list)
    # LP duals: opponent rule weights [j, b] and plan weights [p, j, b, z2]
    duals: tuple | None = None


class _Point:
    """Precomputed tensors of one occupancy state against one game."""

    def __init__(self, game: ZsPosg, s: OccupancyState):
        self.game = game
        self.s = s
        t = s.table
        self.n1, self.n2 = t.shape[1], t.shape[2]
        self.imm = np.einsum("xij,xab->iajb", t, game.reward, optimize=True)
        # sp[i, a, j, b, y, z1, z2] = sum_x s(x, i, j) p(y, z | x, a, b)
        self.sp = np.einsum("xij,xabyuv->iajbyuv", t, game.transition, optimize=True)
        self.children = _child_histories(s.histories[0], game.n_controls[0], game.n_observations[0])
        self._idx = {}

    def child_index(self, col: Collection):
        idx = self._idx.get(col.id)
        if idx is None:
            (u1, _), (z1, _) = self.game.n_controls, self.game.n_observations
            idx = col.columns(self.children).reshape(self.n1, u1, z1)
            self._idx[col.id] = idx
        return idx

    def plan_values(self, col: Collection, pids):
        """``C[p, i, a, z1, j, b, z2]`` for plans ``pids`` against ``col``."""
        idx = self.child_index(col)
        vecs = np.stack([col.vector_of(p) for p in pids])  # [p, y, k]
        cont = vecs[:, :, idx]  # [p, y, i, a, z1]
        return np.einsum("iajbyuv,pyiau->piaujbv", self.sp, cont, optimize=True)


def _solve_greedy(point: _Point, cvals, gamma):
    """Solve the LP for plan values ``cvals[p, i, a, z1, m, j, b, z2]``."""
    n1, n2 = point.n1, point.n2
    u1, u2 = point.imm.shape[1], point.imm.shape[3]
    n_p, _, _, z1, n_m, _, _, z2 = cvals.shape
    npi, ny, nw, ng = n1 * u1, n1 * u1 * z1 * n_m, n2, n2 * u2 * z2
    o_y, o_w, o_g = npi, npi + ny, npi + ny + nw
    c = np.zeros(o_g + ng)
    c[o_w:o_g] = 1.0
    # w_j - pi.imm[:, :, j, b] - gamma sum_z g[j, b, z] <= 0
    imm = point.imm.reshape(npi, n2 * u2).T
    block1 = sparse.hstack([
        sparse.csr_matrix(-imm),
        sparse.csr_matrix((n2 * u2, ny)),
        sparse.kron(sparse.eye(n2), np.ones((u2, 1))),
        sparse.kron(sparse.eye(n2 * u2), np.ones((1, z2))) * (-gamma),
    ])
    # g[j, b, z] - sum y C_p <= 0
    cmat = cvals.reshape(n_p, ny, ng).transpose(0, 2, 1).reshape(n_p * ng, ny)
    block2 = sparse.hstack([
        sparse.csr_matrix((n_p * ng, npi)),
        sparse.csr_matrix(-cmat),
        sparse.csr_matrix((n_p * ng, nw)),
        sparse.vstack([sparse.eye(ng)] * n_p),
    ])
    a_ub = sparse.vstack([block1, block2]).tocsc()
    # sum_a pi = 1;  sum_m y[i, a, z1, m] - pi[i, a] = 0
    link = sparse.kron(sparse.eye(npi * z1), np.ones((1, n_m)))
    pi_rep = sparse.kron(sparse.eye(npi), np.ones((z1, 1)))
    a_eq = sparse.vstack([
        sparse.hstack([sparse.kron(sparse.eye(n1), np.ones((1, u1))), sparse.csr_matrix((n1, ny + nw + ng))]),
        sparse.hstack([-pi_rep, link, sparse.csr_matrix((npi * z1, nw + ng))]),
    ]).tocsc()
    b_eq = np.concatenate([np.ones(n1), np.zeros(npi * z1)])
    bounds = [(0.0, 1.0)] * (npi + ny) + [(None, None)] * (nw + ng)
    sol = solve_arrays(c, "max", a_ub, np.zeros(a_ub.shape[0]), a_eq, b_eq, bounds)
    if not sol.optimal:
        raise LpError(f"greedy LP failed with status {sol.status}")
    x = sol.primal
    pi = np.clip(x[:npi].reshape(n1, u1), 0.0, None)
    pi /= pi.sum(axis=1, keepdims=True)
    y = np.clip(x[o_y:o_w].reshape(n1, u1, z1, n_m), 0.0, None)
    ub = np.clip(sol.dual[0], 0.0, None)
    duals = (ub[:n2 * u2].reshape(n2, u2), ub[n2 * u2:].reshape(n_p, n2, u2, z2))
    return pi, y, float(sol.objective), x[o_g:].reshape(n2, u2, z2), duals


def _candidates(v_next):
    if isinstance(v_next, Family):
        return list(v_next.collections)
    if isinstance(v_next, Collection):
        return [v_next]
    return list(v_next)


def greedy_lp(game: ZsPosg, s: OccupancyState, v_next, ctx: ResponseContext | None = None,
              exact: bool = True, point: _Point | None = None, max_rounds: int = 60) -> GreedyResult:
    """Greedy maximizer rule at ``s`` against a next-stage family (or collections)."""
    point = point or _Point(game, s)
    cands = _candidates(v_next)
    if not cands:
        raise ValueError("no continuation collections")
    table = cands[0].table
    stage = cands[0].stage
    closed_form = all(c.bound or c.is_boundary for c in cands)
    check = exact and not closed_form
    certified = exact or closed_form
    ctx = ctx or ResponseContext()
    pids = list(table.pool[stage]) or [table.default(stage)]
    cvals = np.stack([point.plan_values(col, pids) for col in cands], axis=4)
    rounds = 0
    while True:
        rounds += 1
        pi, y, value, g, duals = _solve_greedy(point, cvals, game.discount)
        if not check:
            break
        if rounds >= max_rounds:
            certified = False
            break
        known = set(pids)
        try:
            violated = _generate_responses(game, point, y, g, cands, ctx)
        except ResponseBudgetExceeded:
            # keep what was harvested, re-solve once, give up the certificate
            ctx.skipped += 1
            certified = check = False
            violated = True
        new = [p for p in table.pool[stage] if p not in known]
        if new:
            pids += new
            extra = np.stack([point.plan_values(col, new) for col in cands], axis=4)
            cvals = np.concatenate([cvals, extra], axis=0)
        if not violated:
            break
        if not new:
            certified = False
            break
    # plan choice per (j, b, z2) under the final mixture
    per_plan = np.einsum("piaumjbv,iaum->pjbv", cvals, y, optimize=True)
    sigma = np.asarray(pids)[per_plan.argmin(axis=0)]
    q = np.einsum("iajb,ia->jb", point.imm, pi) + game.discount * per_plan.min(axis=0).sum(axis=-1)
    return GreedyResult(pi, value, sigma, cands, y, certified, rounds, q.argmin(axis=1),
                        list(pids), duals)


def _generate_responses(game, point, y, g, cands, ctx):
    """Best responses at every successor; True when some ``g`` was too optimistic."""
    ctx.nodes = 0
    u2, z2 = game.n_controls[1], game.n_observations[1]
    succ = []
    for m, col in enumerate(cands):
        idx = point.child_index(col)
        onehot = np.zeros((idx.size, col.n_keys + 1))
        onehot[np.arange(idx.size), idx.reshape(-1)] = 1.0
        # mass[j, b, z2, y, (i, a, z1)] weighted by y[i, a, z1, m]
        weighted = np.einsum("iajbyuv,iau->jbvyiau", point.sp, y[..., m], optimize=True)
        succ.append(weighted.reshape(*weighted.shape[:4], -1) @ onehot)  # [j, b, z2, y, k]
    violated = False
    for j in range(point.n2):
        for b in range(u2):
            for z in range(z2):
                entries = [(col, succ[m][j, b, z]) for m, col in enumerate(cands)
                           if succ[m][j, b, z].sum() > MASS_EPS]
                if not entries:
                    continue
                v, _ = best_response(game, entries, ctx)
                if v < g[j, b, z] - VIOLATION_TOL * max(1.0, abs(v)):
                    violated = True
    return violated


# -- backups --------------------------------------------------------------------
def backup_collection(game: ZsPosg, s: OccupancyState, greedy: GreedyResult) -> Collection:
    """New collection at ``s`` following ``greedy.rule`` and its continuation mixture.

    It keeps one opponent plan per (minimizer history, minimizer control),
    continuing with the plans chosen by ``greedy.sigma``.
    """
    cands = greedy.candidates
    table = cands[0].table
    stage = cands[0].stage - 1
    y = greedy.mix
    _, u1, z1, n_m = y.shape
    weight = y.sum(axis=(0, 1, 2))
    main = int(weight.argmax())
    used = sorted({m for m in range(n_m) if weight[m] > WEIGHT_EPS} | {main})
    yy = y[..., used]
    tot = yy.sum(axis=-1, keepdims=True)
    fallback = np.zeros(len(used))
    fallback[used.index(main)] = 1.0
    mix = np.where(tot > WEIGHT_EPS, yy / np.where(tot > WEIGHT_EPS, tot, 1.0), fallback)
    mix = np.concatenate([mix, np.broadcast_to(fallback, (1, u1, z1, len(used)))], axis=0)
    col = Collection(
        stage, s.histories[0], s.alias[0] or {}, greedy.rule, [cands[m] for m in used], mix, table,
        origin=s.key(), exact=greedy.exact,
    )
    for j in range(greedy.sigma.shape[0]):
        for b in range(greedy.sigma.shape[1]):
            col.activate(table.intern(stage, b, greedy.sigma[j, b]))
    return col


@dataclass
class BackupResult:
    greedy_rule_max: DecisionRule
    greedy_rule_min: DecisionRule
    value: float
    new_collection_min_side: Collection
    new_collection_max_side: Collection
    value_min_side: float = float("nan")
    exact: bool = True


def greedy_over_family(game, s, fam: Family, ctx=None, exact=True):
    """Greedy LP at ``s`` mixing over every collection of ``fam``."""
    if ctx is not None and time.monotonic() > ctx.deadline:
        raise TimeBudgetExceeded
    return greedy_lp(game, s, fam, ctx, exact=exact)


def point_backup(s: OccupancyState, fam_next_max: Family, fam_next_min: Family,
                 game: ZsPosg, ctx: ResponseContext | None = None, exact: bool = True) -> BackupResult:
    """Greedy rules for both players at ``s`` and the collections they support.

    The minimizer's side works on the swapped game, so its collection and
    value are expressed in that game (value negated).
    """
    ctx = ctx or ResponseContext()
    res_max = greedy_over_family(game, s, fam_next_max, ctx, exact)
    swapped = game.swapped()
    s_min = s.swapped()
    res_min = greedy_over_family(swapped, s_min, fam_next_min, ctx, exact)
    col_max = backup_collection(game, s, res_max)
    col_min = backup_collection(swapped, s_min, res_min)
    rule_max = DecisionRule.from_matrix(Role.MAX, s.stage, s.histories[0], res_max.rule)
    rule_min = DecisionRule.from_matrix(Role.MIN, s.stage, s.histories[1], res_min.rule)
    return BackupResult(rule_max, rule_min, res_max.value, col_max, col_min,
                        -res_min.value, res_max.exact and res_min.exact)
