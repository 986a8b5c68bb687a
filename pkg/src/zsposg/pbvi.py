"""Point-based value iteration over occupancy states.

Each iteration samples one occupancy state per stage by following the
current greedy joint rules (with some random exploration), then sweeps
the stages backwards, backing up both players' value functions at the
sampled points.  ``pbvi2`` adds bounded pruning of linear functions and
collections, ``pbvi3`` also prunes sampled points.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .game import Role, ZsPosg, check_game
from .occupancy import DecisionRule, OccupancyState, compress, initial_occupancy, step
from .operators import (
    WEIGHT_EPS,
    ResponseBudgetExceeded,
    ResponseContext,
    TimeBudgetExceeded,
    backup_collection,
    best_response,
    greedy_over_family,
)
from .value import (
    Collection,
    Family,
    dump_families,
    eval_family,
    PlanTable,
    load_families,
    prune_alpha,
    prune_collections,
    witness_conditionals,
)

log = logging.getLogger(__name__)

VARIANTS = ("pbvi1", "pbvi2", "pbvi3")
CONVERGED, OOT, OOM, ITERATION_CAP = "converged", "oot", "oom", "iteration_cap"


class MemoryBudgetExceeded(Exception):
    pass


@dataclass
class SolverConfig:
    variant: str = "pbvi1"
    epsilon: float = 1e-3
    max_iterations: int = 1000
    time_budget: float = 7200.0
    memory_budget: float = 2 * 1024**3
    prune_epsilon: float = 1e-3
    exploration_rate: float = 0.1
    rng_seed: int = 0
    witness_cap: int = 64
    patience: int = 3
    compress: bool = True
    exact_responses: bool = True
    response_budget: int = 20000
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    explore_mode: str = "mixed"
    seed_responses: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.epsilon < 0 or self.prune_epsilon < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.time_budget <= 0 or self.memory_budget <= 0:
            raise ValueError("budgets must be positive")
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValueError("exploration_rate must lie in [0, 1]")
        if self.max_iterations < 0 or self.witness_cap < 1 or self.patience < 1:
            raise ValueError("invalid iteration settings")


class PolicyBook:
    """Bookkept joint policy: a stage-0 collection per player and its continuations.

    Executing a player's policy tracks a distribution over (collection,
    column) pairs.  At each stage the control is drawn from the rule of
    the current pair; after control ``a`` and observation ``z`` the pair
    moves to the columns its continuation mixture assigns.  The
    behavioural rule at a history is the rule averaged over the posterior
    of the pairs given the controls played so far.
    """

    def __init__(self, game: ZsPosg, roots):
        self.game = game
        self.roots = tuple(roots)
        for role, root in zip(Role, self.roots):
            if self.depth(role) != game.horizon:
                raise ValueError(f"incomplete policy book for {role.name}")

    def depth(self, role: Role):
        n, col = 0, self.roots[Role(role)]
        while not col.is_boundary:
            n += 1
            col = col.nexts[0]
        return n

    def chain(self, role: Role):
        """Main continuation path (largest mixing weight at each stage)."""
        out = []
        col = self.roots[Role(role)]
        while col is not None and not col.is_boundary:
            out.append(col)
            col = col.next
        return out

    def distribution(self, role: Role, history) -> np.ndarray:
        role = Role(role)
        if len(history) // 2 >= self.game.horizon:
            raise ValueError(f"history {history} longer than the horizon")
        root = self.roots[role]
        belief = {(root.id, root.lookup(())): (root, root.lookup(()), 1.0)}
        for t in range(len(history) // 2):
            a, z = int(history[2 * t]), int(history[2 * t + 1])
            cond = {k: (c, col, w * c.rule_full[col][a]) for k, (c, col, w) in belief.items()}
            if sum(w for _, _, w in cond.values()) > 0:
                belief = cond
            nxt = {}
            for c, col, w in belief.values():
                if w <= 0:
                    continue
                cms = c.child_maps()
                for m in c.active_nexts():
                    p = c.mix[col, a, z, m]
                    if p <= 0:
                        continue
                    n = c.nexts[m]
                    k = int(cms[m][col, a, z])
                    prev = nxt.get((n.id, k))
                    nxt[(n.id, k)] = (n, k, p * w + (prev[2] if prev else 0.0))
            belief = nxt
        total = sum(w for _, _, w in belief.values())
        n_u = self.game.n_controls[role]
        if total <= 0:
            return np.full(n_u, 1.0 / n_u)
        return sum(w * c.rule_full[col] for c, col, w in belief.values()) / total

    def rules(self, role: Role, histories_by_stage):
        """Decision rules on explicit history sets, one per stage."""
        role = Role(role)
        n_u = self.game.n_controls[role]
        return [
            DecisionRule(role, t, {h: self.distribution(role, h) for h in hs}, n_u, "uniform")
            for t, hs in enumerate(histories_by_stage)
        ]

    def to_dict(self):
        return {role.name: [c.id for c in self.chain(role)] for role in Role}


@dataclass
class SolveResult:
    value: float
    per_iteration_trace: list
    status: str
    policy: PolicyBook | None
    upper_bound: float = float("nan")
    certified: bool = False
    families: dict = field(default_factory=dict, repr=False)
    peak_memory: int = 0
    iterations: int = 0

    @property
    def gap(self):
        return self.upper_bound - self.value


def all_histories(game: ZsPosg, role: Role, horizon=None):
    """Every individual history of ``role`` per stage (small games only)."""
    role = Role(role)
    horizon = game.horizon if horizon is None else horizon
    n_u, n_z = game.n_controls[role], game.n_observations[role]
    stages = [[()]]
    for _ in range(1, horizon):
        stages.append([h + (u, z) for h in stages[-1] for u in range(n_u) for z in range(n_z)])
    return stages


def extract_policy(book: PolicyBook, histories=None):
    """Stitched policy as explicit decision rules per player and stage."""
    if book is None:
        raise ValueError("no policy book: the solve did not complete a sweep")
    game = book.game
    out = []
    for role in Role:
        hs = histories[role] if histories is not None else all_histories(game, role)
        out.append(book.rules(role, hs))
    return tuple(out)


# -- solver internals ---------------------------------------------------
def init_families(game: ZsPosg, horizon: int):
    """Boundary and constant lower-bound collections for both players."""
    fams = {}
    for role, g in ((Role.MAX, game), (Role.MIN, game.swapped())):
        table = PlanTable(g, horizon)
        lo = g.reward_bounds()[0]
        stages = [None] * (horizon + 1)
        stages[horizon] = Family(horizon, role, [Collection.boundary(table)], table=table)
        for t in range(horizon - 1, -1, -1):
            col = Collection.lower_bound(table, t, lo * g.remaining_weight(t), stages[t + 1].collections[0])
            stages[t] = Family(t, role, [col], table=table)
        fams[role] = stages
    return fams


def _random_rule(rng, n_hist, n_u):
    return np.eye(n_u)[rng.integers(n_u, size=n_hist)]


def _explore_rules(mode, g1, g2, u1, u2):
    if mode == "greedy":
        return g1.rule, g2.rule
    r1, r2 = np.eye(u1)[g2.response], np.eye(u2)[g1.response]
    if mode == "response":
        return r1, r2
    return 0.5 * (g1.rule + r1), 0.5 * (g2.rule + r2)


def explore(game, families, config, rng, ctx=None, trail=None):
    """One occupancy state per stage along greedy (or random) joint rules.

    When ``trail`` is a list, the rule matrices used at each stage are
    appended to it.
    """
    s = initial_occupancy(game)
    if config.compress:
        s = compress(s)
    points = [s]
    swapped = game.swapped()
    for t in range(game.horizon - 1):
        n1, n2 = len(s.histories[0]), len(s.histories[1])
        u1, u2 = game.n_controls
        if rng.random() < config.exploration_rate:
            pi1, pi2 = _random_rule(rng, n1, u1), _random_rule(rng, n2, u2)
        else:
            g1 = greedy_over_family(game, s, families[Role.MAX][t + 1], ctx, exact=False)
            g2 = greedy_over_family(swapped, s.swapped(), families[Role.MIN][t + 1], ctx, exact=False)
            pi1, pi2 = _explore_rules(config.explore_mode, g1, g2, u1, u2)
        if trail is not None:
            trail.append((pi1, pi2))
        s = step(game, s, pi1, pi2)
        if config.compress:
            s = compress(s)
        points.append(s)
    return points


def memory_in_use(families):
    return sum(f.nbytes() for stages in families.values() for f in stages)


def response_policy(plan_table: PlanTable, pid: int, own_table: PlanTable, end: Collection,
                    key_cap: int = 4096, stage: int = 0, prefix: tuple = ()):
    """Collections (one per stage) playing an opponent-table plan as a pure policy.

    ``plan_table`` holds plans whose controls belong to the player owning
    ``own_table``.  The plan starts at ``stage`` after history ``prefix``;
    entries before ``stage`` are ``None``.  Returns ``None`` when the policy
    would need more than ``key_cap`` histories.
    """
    horizon = plan_table.horizon
    layers = [[(tuple(prefix), pid)]]
    total = 1
    for t in range(stage, horizon - 1):
        nxt = []
        for h, p in layers[-1]:
            b, kids = plan_table.get(t, p)
            nxt.extend((h + (b, z), k) for z, k in enumerate(kids))
        total += len(nxt)
        if total > key_cap:
            return None
        layers.append(nxt)
    g = own_table.game
    u1, z1 = g.n_controls[0], g.n_observations[0]
    out, col = [None] * horizon, end
    for t in range(horizon - 1, stage - 1, -1):
        layer = layers[t - stage]
        keys = [h for h, _ in layer]
        rule = np.eye(u1)[[plan_table.get(t, p)[0] for _, p in layer]]
        col = Collection(t, keys, {}, rule, (col,), np.ones((len(keys) + 1, u1, z1, 1)), own_table,
                         origin="response", exact=False)
        out[t] = col
    return out


def dual_policy(game, fam: Family, fam_next: Family, own_table: PlanTable, end: Collection,
                s0, ctx):
    """Opponent policy at ``s0`` read off the duals of the greedy LP of ``fam``'s owner.

    It is the opponent mixture against which the owner's current
    continuations are optimal, so a best response to it finds a pure
    policy worth adding (the double-oracle step).  ``own_table`` and
    ``end`` belong to the opponent.  Returns ``None`` when unavailable.
    """
    res = greedy_over_family(game, s0, fam_next, ctx, exact=False)
    if res.duals is None:
        return None
    d1, d2 = res.duals
    n2, u2 = d1.shape
    z2 = d2.shape[-1]
    table = fam_next.table
    heads, mix = [], []
    rule = np.full((n2, u2), 1.0 / u2)
    for j, hj in enumerate(s0.histories[1]):
        if d1[j].sum() > WEIGHT_EPS:
            rule[j] = d1[j] / d1[j].sum()
        for b in range(u2):
            for z in range(z2):
                w = d2[:, j, b, z]
                if w.sum() <= WEIGHT_EPS:
                    w = np.eye(len(w))[0]
                for p in np.flatnonzero(w > WEIGHT_EPS * w.sum()):
                    chain = response_policy(table, res.plan_ids[p], own_table, end,
                                            stage=1, prefix=tuple(hj) + (b, z))
                    if chain is None:
                        return None
                    heads.append(chain[1])
                    mix.append((j, b, z, w[p] / w.sum()))
    mixarr = np.zeros((n2 + 1, u2, z2, len(heads)))
    for m, (j, b, z, w) in enumerate(mix):
        mixarr[j, b, z, m] = w
    mixarr[n2, :, :, 0] = 1.0
    return Collection(0, list(s0.histories[1]), {}, rule, heads, mixarr, own_table,
                      origin="dual", exact=False)


def seed_responses(game, families, s0, ctx, seen):
    """Insert best responses to opponent stage-0 policies as continuations.

    Two opponent policies are used per player: the opponent's own best
    stage-0 collection and the mixture read off the player's LP duals.
    Only stages ``1..horizon-1`` receive the new collections, where greedy
    LPs may mix them in; stage-0 values keep coming from certified LPs.
    """
    added = 0
    for role in Role:
        other = role.other
        g_other = game if other == Role.MAX else game.swapped()
        g_role = game if role == Role.MAX else game.swapped()
        view = s0 if other == Role.MAX else s0.swapped()
        own_view = s0 if role == Role.MAX else s0.swapped()
        fams, ofams = families[role], families[other]
        _, root = eval_family(ofams[0], s0)
        opponents = [root]
        if game.horizon > 1:
            dual = dual_policy(g_role, fams[0], fams[1], ofams[0].table,
                               ofams[game.horizon].collections[0], own_view, ctx)
            if dual is not None:
                opponents.append(dual)
        for opp in opponents:
            cols = opp.columns(view.histories[0])
            c = np.zeros((view.n_states, opp.n_keys + 1))
            np.add.at(c.T, cols, view.table[:, :, 0].T)
            try:
                _, pid = best_response(g_other, [(opp, c)], ctx)
            except ResponseBudgetExceeded:
                continue
            if (role, pid) in seen:
                continue
            seen.add((role, pid))
            chain = response_policy(ofams[0].table, pid,
                                    fams[0].table, fams[game.horizon].collections[0])
            if chain is None:
                continue
            for t in range(1, game.horizon):
                col = chain[t]
                for p in list(fams[t].table.pool[t]):
                    col.activate(p)
                fams[t].collections.append(col)
                added += 1
    return added


def backward_sweep(points, families, game, config, ctx=None, on_stage=None):
    """Back up both players at each point from the last stage to the first."""
    ctx = ctx or ResponseContext(node_budget=config.response_budget)
    swapped = game.swapped()
    s0_key = points[0].key()
    for t in range(game.horizon - 1, -1, -1):
        s = points[t]
        for role, g, view in ((Role.MAX, game, s), (Role.MIN, swapped, s.swapped())):
            fam, fam_next = families[role][t], families[role][t + 1]
            res = greedy_over_family(g, view, fam_next, ctx, exact=config.exact_responses)
            fam.insert(backup_collection(g, view, res))
            fam.add_witness(s, config.witness_cap, protect=s0_key if t == 0 else None)
            # stage t+1 is pruned once stage t has chosen what it mixes in
            if t + 1 < game.horizon:
                _prune(fam_next, config, s0_key, mixed_into(fam))
            if t == 0:
                _prune(fam, config, s0_key, ())
        if on_stage is not None:
            on_stage(t)
    return s0_value(families, points[0])


def _prune(fam: Family, config: SolverConfig, s0_key, protect):
    if config.variant in ("pbvi2", "pbvi3"):
        prune_family(fam, config.prune_epsilon, protect)
    if config.variant == "pbvi3":
        prune_points(fam, config, s0_key)


def mixed_into(fam: Family):
    """Ids of the collections that ``fam``'s collections continue with."""
    out = set()
    for col in fam.collections:
        for m in col.active_nexts():
            out.add(col.nexts[m].id)
    return out


def prune_family(fam: Family, eps: float, protect=()):
    """Bounded pruning of vectors, then of collections not in ``protect``."""
    views = [fam.view(w) for w in fam.witnesses]
    for col in fam.collections:
        if col.bound or col.is_boundary:
            continue
        prune_alpha(col, witness_conditionals(col, views), eps)
    prune_collections(fam, eps, protect=protect)
    fam.sync_pool()
    return fam


def prune_points(fam: Family, config: SolverConfig, s0_key=None):
    """Drop witness points whose own collections barely matter there.

    A point (never the initial one) goes together with the collections
    built at it when removing them lowers the family value at the point
    by at most ``prune_epsilon``.  Repeated witnesses are dropped first.
    Unlike the bounded pruning above this carries no guarantee for other
    points.
    """
    eps = config.prune_epsilon
    unique = {}
    for w in fam.witnesses:
        unique.setdefault(w.key(), w)
    fam.witnesses = list(unique.values())
    for w in list(fam.witnesses)[::-1]:
        if w.key() == s0_key:
            continue
        view = fam.view(w)
        key = view.key()
        own = [c for c in fam.collections if c.origin == key]
        rest = [c for c in fam.collections if c.origin != key]
        if not own or not rest:
            continue
        before = max(c.evaluate(view) for c in fam.collections)
        after = max(c.evaluate(view) for c in rest)
        if before - after <= eps:
            fam.collections = rest
            fam.witnesses = [x for x in fam.witnesses if fam.view(x).key() != key]
    return fam


def s0_value(families, s0):
    lower, col_lo = eval_family(families[Role.MAX][0], s0)
    upper, col_up = eval_family(families[Role.MIN][0], s0)
    return lower, upper, col_lo, col_up


def _checkpoint(path, families, rng, trace, iteration):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "families.txt", "w") as fh:
        dump_families([f for stages in families.values() for f in stages], fh)
    state = {"iteration": iteration, "trace": trace, "rng": rng.bit_generator.state}
    (path / "state.json").write_text(json.dumps(state))


def load_checkpoint(path, game: ZsPosg):
    """Families (without witnesses), rng and trace saved by a solve."""
    path = Path(path)
    with open(path / "families.txt") as fh:
        fams = load_families(fh, game)
    state = json.loads((path / "state.json").read_text())
    families = {Role.MAX: [None] * (game.horizon + 1), Role.MIN: [None] * (game.horizon + 1)}
    for f in fams:
        families[f.role][f.stage] = f
    rng = np.random.default_rng()
    rng.bit_generator.state = state["rng"]
    return families, rng, state


def solve(game: ZsPosg, horizon: int | None = None, config: SolverConfig | None = None,
          resume: str | None = None) -> SolveResult:
    """Run PBVI until the value settles or a budget trips."""
    config = config or SolverConfig()
    check_game(game)
    if horizon is not None:
        game = game.with_horizon(horizon)
    start = time.monotonic()
    deadline = start + config.time_budget
    ctx = ResponseContext(deadline=deadline, node_budget=config.response_budget)
    s0 = initial_occupancy(game)
    if config.compress:
        s0 = compress(s0)
    if resume:
        families, rng, state = load_checkpoint(resume, game)
        trace = [tuple(r) for r in state["trace"]]
        first = state["iteration"] + 1
    else:
        families = init_families(game, game.horizon)
        rng = np.random.default_rng(config.rng_seed)
        trace = []
        first = 1
    for role in Role:
        families[role][0].add_witness(s0, config.witness_cap)
    lower, upper, col_lo, col_up = s0_value(families, s0)
    if not trace:
        trace.append((0, lower, time.monotonic() - start))
    status = ITERATION_CAP
    peak = memory_in_use(families)
    stall = 0
    it = first - 1
    seeded = set()

    def budget(_stage=None):
        nonlocal peak
        peak = max(peak, memory_in_use(families))
        if peak > config.memory_budget:
            raise MemoryBudgetExceeded
        if time.monotonic() > deadline:
            raise TimeBudgetExceeded

    try:
        budget()
        for it in range(first, config.max_iterations + 1):
            if config.seed_responses and game.horizon > 1:
                seed_responses(game, families, s0, ctx, seeded)
            points = explore(game, families, config, rng, ctx)
            budget()
            prev = lower
            lower, upper, col_lo, col_up = backward_sweep(points, families, game, config, ctx, budget)
            trace.append((it, lower, time.monotonic() - start))
            log.debug("iter %d value %.6f upper %.6f", it, lower, upper)
            if config.checkpoint_every and config.checkpoint_dir and it % config.checkpoint_every == 0:
                _checkpoint(config.checkpoint_dir, families, rng, trace, it)
            stall = stall + 1 if abs(lower - prev) <= config.epsilon else 0
            certified = col_lo.exact and col_up.exact
            if stall >= 1 and certified and upper - lower <= config.epsilon:
                status = CONVERGED
                break
            if stall >= config.patience:
                status = CONVERGED
                break
            budget()
    except TimeBudgetExceeded:
        status = OOT
    except MemoryBudgetExceeded:
        status = OOM
    lower, upper, col_lo, col_up = s0_value(families, s0)
    if status in (OOT, OOM) and trace[-1][1] != lower:
        trace.append((trace[-1][0] + 1, lower, time.monotonic() - start))
    try:
        book = PolicyBook(game, (col_lo, col_up))
    except ValueError:
        book = None
    return SolveResult(
        value=lower,
        per_iteration_trace=trace,
        status=status,
        policy=book,
        upper_bound=upper,
        certified=bool(col_lo.exact and col_up.exact),
        families=families,
        peak_memory=peak,
        iterations=it,
    )


class PBVISolver(BaseEstimator):
    """Estimator-style front end: ``fit(game)`` then read the fitted attributes.

    ``predict`` maps occupancy states to the lower-bound value of the fitted
    maximizer family at their stage.
    """

    def __init__(self, variant="pbvi1", horizon=None, epsilon=1e-3, max_iterations=1000,
                 time_budget=7200.0, memory_budget=2 * 1024**3, prune_epsilon=1e-3,
                 exploration_rate=0.1, rng_seed=0):
        self.variant = variant
        self.horizon = horizon
        self.epsilon = epsilon
        self.max_iterations = max_iterations
        self.time_budget = time_budget
        self.memory_budget = memory_budget
        self.prune_epsilon = prune_epsilon
        self.exploration_rate = exploration_rate
        self.rng_seed = rng_seed

    def _config(self):
        params = self.get_params()
        params.pop("horizon")
        return SolverConfig(**params)

    def fit(self, game: ZsPosg, y=None):
        check_game(game)
        result = solve(game, self.horizon, self._config())
        self.result_ = result
        self.value_ = result.value
        self.upper_bound_ = result.upper_bound
        self.trace_ = result.per_iteration_trace
        self.status_ = result.status
        self.policy_ = result.policy
        self.n_iter_ = result.iterations
        return self

    def predict(self, states):
        check_is_fitted(self, "result_")
        fams = self.result_.families[Role.MAX]
        out = []
        for s in states:
            if not isinstance(s, OccupancyState):
                raise TypeError("predict expects OccupancyState objects")
            if not 0 <= s.stage < len(fams):
                raise ValueError(f"stage {s.stage} outside the fitted horizon")
            out.append(eval_family(fams[s.stage], s)[0])
        return np.array(out)


def config_dict(config: SolverConfig):
    return asdict(config)
