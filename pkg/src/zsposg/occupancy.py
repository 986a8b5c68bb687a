"""Occupancy states: distributions over hidden states and joint histories.

An individual history is a flat tuple ``(u0, z1, u1, z2, ...)`` of integer
ids, so a stage-``t`` history has length ``2 t``.  An occupancy state keeps
the list of reachable histories of each player and a dense table
``table[x, i, j]`` over (state, maximizer history, minimizer history).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .game import Role, ZsPosg

SUPPORT_EPS = 1e-12


class UncoveredHistoryError(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class OccupancyState:
    """Sparse-support occupancy state at stage ``stage``.

    ``alias`` optionally maps, per player, raw histories (a parent
    representative extended by one control/observation pair) onto the
    representative kept in ``histories`` after lossless clustering.
    """

    stage: int
    histories: tuple
    table: np.ndarray
    alias: tuple = (None, None)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        h1, h2 = (tuple(h) for h in self.histories)
        object.__setattr__(self, "histories", (h1, h2))
        if t.shape[1:] != (len(h1), len(h2)):
            raise ValueError("table shape does not match history lists")

    @classmethod
    def from_support(cls, stage, support, n_states):
        """Build from a mapping ``(x, h_max, h_min) -> prob``."""
        h1 = sorted({k[1] for k, v in support.items() if v > 0})
        h2 = sorted({k[2] for k, v in support.items() if v > 0})
        i1 = {h: i for i, h in enumerate(h1)}
        i2 = {h: i for i, h in enumerate(h2)}
        table = np.zeros((n_states, len(h1), len(h2)))
        for (x, a, b), v in support.items():
            if v > 0:
                table[x, i1[a], i2[b]] += v
        return cls(stage, (tuple(h1), tuple(h2)), table)

    @property
    def n_states(self):
        return self.table.shape[0]

    @property
    def support(self) -> dict:
        h1, h2 = self.histories
        return {
            (int(x), h1[i], h2[j]): float(self.table[x, i, j])
            for x, i, j in zip(*np.nonzero(self.table))
        }

    def marginal(self, role: Role) -> np.ndarray:
        axis = (0, 2) if role == Role.MAX else (0, 1)
        return self.table.sum(axis=axis)

    def swapped(self) -> "OccupancyState":
        """View with the players' roles exchanged."""
        cached = self._cache.get("swapped")
        if cached is None:
            cached = OccupancyState(
                self.stage,
                self.histories[::-1],
                np.ascontiguousarray(self.table.transpose(0, 2, 1)),
                self.alias[::-1],
            )
            cached._cache["swapped"] = self
            self._cache["swapped"] = cached
        return cached

    def key(self):
        """Hashable fingerprint used to spot duplicated points."""
        cached = self._cache.get("key")
        if cached is None:
            cached = (self.stage, self.histories, np.round(self.table, 12).tobytes())
            self._cache["key"] = cached
        return cached

    def resolve(self, role: Role, history):
        """Index of ``history`` in this state's list for ``role``, or ``None``."""
        index = self._cache.get(("index", role))
        if index is None:
            index = {h: i for i, h in enumerate(self.histories[role])}
            alias = self.alias[role]
            if alias:
                for raw, rep in alias.items():
                    if rep in index:
                        index.setdefault(raw, index[rep])
            self._cache[("index", role)] = index
        return index.get(history)


@dataclass(frozen=True)
class MarginalOccupancy:
    owner: Role
    weights: dict


@dataclass(frozen=True)
class ConditionalFamily:
    owner: Role
    members: dict


class DecisionRule:
    """Per-history distributions over one player's controls.

    With ``fallback="uniform"`` histories missing from ``rule`` play
    uniformly; otherwise looking them up raises :class:`UncoveredHistoryError`.
    """

    def __init__(self, owner, stage, rule, n_controls, fallback=None):
        self.owner = Role(owner)
        self.stage = int(stage)
        self.n_controls = int(n_controls)
        self.fallback = fallback
        self.rule = {}
        for h, dist in rule.items():
            d = np.asarray(dist, dtype=float)
            if d.shape != (self.n_controls,):
                raise ValueError(f"rule at {h} has shape {d.shape}")
            if np.any(d < -1e-9) or abs(d.sum() - 1.0) > 1e-7:
                raise ValueError(f"rule at {h} is not a distribution")
            self.rule[tuple(h)] = d

    def distribution(self, history) -> np.ndarray:
        d = self.rule.get(tuple(history))
        if d is not None:
            return d
        if self.fallback == "uniform":
            return np.full(self.n_controls, 1.0 / self.n_controls)
        raise UncoveredHistoryError(f"no decision for history {history} at stage {self.stage}")

    def matrix(self, histories) -> np.ndarray:
        return np.array([self.distribution(h) for h in histories]).reshape(
            len(histories), self.n_controls
        )

    @classmethod
    def from_matrix(cls, owner, stage, histories, matrix, fallback="uniform"):
        m = np.clip(np.asarray(matrix, dtype=float), 0.0, None)
        m = m / m.sum(axis=1, keepdims=True)
        return cls(owner, stage, dict(zip(histories, m)), m.shape[1], fallback)

    @classmethod
    def deterministic(cls, owner, stage, choices, n_controls, fallback=None):
        return cls(
            owner, stage, {h: np.eye(n_controls)[u] for h, u in choices.items()}, n_controls, fallback
        )

    @classmethod
    def uniform(cls, owner, stage, n_controls):
        return cls(owner, stage, {}, n_controls, fallback="uniform")


@dataclass(frozen=True)
class JointDecisionRule:
    max_rule: DecisionRule
    min_rule: DecisionRule

    @property
    def stage(self):
        return self.max_rule.stage

    def __getitem__(self, role):
        return self.max_rule if Role(role) == Role.MAX else self.min_rule


def initial_occupancy(game: ZsPosg) -> OccupancyState:
    b = game.initial_belief
    return OccupancyState(0, (((),), ((),)), b.reshape(-1, 1, 1).copy())


def _rule_arrays(s, a):
    if a.stage != s.stage:
        raise ValueError(f"decision rule stage {a.stage} != occupancy stage {s.stage}")
    return a.max_rule.matrix(s.histories[0]), a.min_rule.matrix(s.histories[1])


def successor_table(game, table, pi1, pi2):
    """Unnormalized successor ``[y, i, u1, z1, j, u2, z2]`` of a dense table."""
    m = table[:, :, :, None, None] * pi1[None, :, None, :, None] * pi2[None, None, :, None, :]
    return np.einsum("xijab,xabyuv->yiaujbv", m, game.transition, optimize=True)


def step(game, s: OccupancyState, pi1, pi2) -> OccupancyState:
    """Transition under rule matrices aligned with ``s.histories``."""
    nxt = successor_table(game, s.table, pi1, pi2)
    nx = game.n_states
    h1, h2 = s.histories
    (n1, u1, z1), (n2, u2, z2) = nxt.shape[1:4], nxt.shape[4:7]
    flat = nxt.reshape(nx, n1 * u1 * z1, n2 * u2 * z2)
    flat = np.where(flat < SUPPORT_EPS, 0.0, flat)
    keep1 = np.flatnonzero(flat.sum(axis=(0, 2)) > 0)
    keep2 = np.flatnonzero(flat.sum(axis=(0, 1)) > 0)
    flat = flat[:, keep1][:, :, keep2]
    total = flat.sum()
    if total <= 0:
        raise ValueError("successor occupancy has no mass")
    flat = flat / total
    child1 = [h1[k // (u1 * z1)] + ((k // z1) % u1, k % z1) for k in keep1.tolist()]
    child2 = [h2[k // (u2 * z2)] + ((k // z2) % u2, k % z2) for k in keep2.tolist()]
    return OccupancyState(s.stage + 1, (tuple(child1), tuple(child2)), flat)


def transition(game: ZsPosg, s: OccupancyState, a: JointDecisionRule) -> OccupancyState:
    """Next occupancy state under joint rule ``a``."""
    pi1, pi2 = _rule_arrays(s, a)
    return step(game, s, pi1, pi2)


def expected_reward(game: ZsPosg, s: OccupancyState, a: JointDecisionRule) -> float:
    pi1, pi2 = _rule_arrays(s, a)
    return reward_of(game, s.table, pi1, pi2)


def reward_of(game, table, pi1, pi2) -> float:
    return float(np.einsum("xij,ia,jb,xab->", table, pi1, pi2, game.reward, optimize=True))


def marginalize(s: OccupancyState, owner: Role) -> MarginalOccupancy:
    owner = Role(owner)
    m = s.marginal(owner)
    return MarginalOccupancy(
        owner, {h: float(v) for h, v in zip(s.histories[owner], m) if v > 0}
    )


def condition(s: OccupancyState, owner: Role) -> ConditionalFamily:
    owner = Role(owner)
    view = s if owner == Role.MIN else s.swapped()
    # view.table[x, other, own]
    other = view.histories[0]
    members = {}
    for j, h in enumerate(view.histories[1]):
        col = view.table[:, :, j]
        mass = col.sum()
        if mass <= 0:
            continue
        members[h] = {
            (int(x), other[i]): float(col[x, i] / mass) for x, i in zip(*np.nonzero(col))
        }
    return ConditionalFamily(owner, members)


def recompose(cond: ConditionalFamily, marg: MarginalOccupancy, stage=None) -> OccupancyState:
    """Inverse of (condition, marginalize)."""
    if cond.owner != marg.owner:
        raise ValueError("conditional and marginal owners differ")
    missing = [h for h in marg.weights if h not in cond.members]
    if missing:
        raise KeyError(f"conditional family lacks histories {missing[:3]}")
    support = {}
    n_states = 0
    for h, w in marg.weights.items():
        for (x, o), c in cond.members[h].items():
            key = (x, o, h) if cond.owner == Role.MIN else (x, h, o)
            support[key] = support.get(key, 0.0) + c * w
            n_states = max(n_states, x + 1)
    if stage is None:
        stage = len(next(iter(marg.weights))) // 2 if marg.weights else 0
    return OccupancyState.from_support(stage, support, n_states)


def compress(s: OccupancyState, tol: float = 1e-12) -> OccupancyState:
    """Merge histories with identical conditional occupancies.

    Two histories of one player are merged when the distributions over
    (state, opponent history) they induce coincide.  Such histories can
    share a decision rule without changing the value of the game for
    either player, so clustering them is lossless.  The representative of
    a class is its lexicographically smallest history.
    """
    table = np.array(s.table)
    hist = [list(s.histories[0]), list(s.histories[1])]
    alias = [{}, {}]
    for role in (0, 1):
        prior = s.alias[role] or {}
        alias[role] = dict(prior)
        for h in hist[role]:
            alias[role].setdefault(h, h)
    changed = True
    while changed:
        changed = False
        for role in (0, 1):
            t = table if role == 0 else table.transpose(0, 2, 1)
            n = t.shape[1]
            if n < 2:
                continue
            mass = t.sum(axis=(0, 2))
            cond = t / mass[None, :, None]
            groups = {}
            for i in range(n):
                key = np.round(cond[:, i, :], 9).tobytes()
                groups.setdefault(key, []).append(i)
            if len(groups) == n:
                continue
            blocks = []
            for members in groups.values():
                base = members[0]
                exact = [m for m in members if np.abs(cond[:, m] - cond[:, base]).max() <= tol * 1e3]
                rest = [m for m in members if m not in exact]
                blocks.append(exact)
                blocks.extend([m] for m in rest)
            if len(blocks) == n:
                continue
            changed = True
            blocks = [sorted(b, key=lambda k: hist[role][k]) for b in blocks]
            blocks.sort(key=lambda b: hist[role][b[0]])
            merged = np.stack([t[:, b, :].sum(axis=1) for b in blocks], axis=1)
            reps = [hist[role][b[0]] for b in blocks]
            remap = {hist[role][k]: hist[role][b[0]] for b in blocks for k in b}
            alias[role] = {raw: remap.get(rep, rep) for raw, rep in alias[role].items()}
            hist[role] = reps
            table = merged if role == 0 else merged.transpose(0, 2, 1)
    return OccupancyState(
        s.stage, (tuple(hist[0]), tuple(hist[1])), table, (alias[0], alias[1])
    )


def evaluate_joint_policy(game: ZsPosg, policy) -> float:
    """Expected discounted payoff to the maximizer under a joint policy.

    ``policy`` is a sequence of :class:`JointDecisionRule`, one per stage.
    Values are computed by the backward recursion over (state, joint
    history) with a zero boundary.
    """
    policy = list(policy)
    if len(policy) != game.horizon:
        raise ValueError(f"policy has {len(policy)} stages, game horizon is {game.horizon}")
    states = [initial_occupancy(game)]
    rules = []
    for a in policy:
        pi = _rule_arrays(states[-1], a)
        rules.append(pi)
        if len(states) < game.horizon:
            states.append(step(game, states[-1], *pi))
    nx = game.n_states
    p, r, gamma = game.transition, game.reward, game.discount
    alpha_next = None
    for t in range(game.horizon - 1, -1, -1):
        s = states[t]
        pi1, pi2 = rules[t]
        n1, n2 = len(s.histories[0]), len(s.histories[1])
        u1, u2 = game.n_controls
        z1, z2 = game.n_observations
        # beta[x, i, j, a, b] = r(x, a, b) + gamma * sum_{y,z} p * alpha_{t+1}
        beta = np.broadcast_to(r[:, None, None], (nx, n1, n2, u1, u2)).copy()
        if alpha_next is not None:
            nxt = states[t + 1]
            c1 = {h: k for k, h in enumerate(nxt.histories[0])}
            c2 = {h: k for k, h in enumerate(nxt.histories[1])}
            idx1 = np.array(
                [[[c1.get(h + (a, z), -1) for z in range(z1)] for a in range(u1)] for h in s.histories[0]]
            ).reshape(n1, u1, z1)
            idx2 = np.array(
                [[[c2.get(h + (b, z), -1) for z in range(z2)] for b in range(u2)] for h in s.histories[1]]
            ).reshape(n2, u2, z2)
            padded = np.zeros((nx, alpha_next.shape[1] + 1, alpha_next.shape[2] + 1))
            padded[:, :-1, :-1] = alpha_next
            # cont[y, i, a, u, j, b, v] = alpha_{t+1}(y, child_i, child_j)
            cont = padded[:, idx1[:, :, :, None, None, None], idx2[None, None, None]]
            beta = beta + gamma * np.einsum("xabyuv,yiaujbv->xijab", p, cont, optimize=True)
        alpha_next = np.einsum("xijab,ia,jb->xij", beta, pi1, pi2, optimize=True)
    return float(np.dot(game.initial_belief, alpha_next[:, 0, 0]))


def dump_occupancy_csv(s: OccupancyState, fh, game: ZsPosg | None = None):
    """Write ``state,history_max,history_min,prob`` rows, one per support entry."""
    writer = csv.writer(fh)
    writer.writerow(["state", "history_max", "history_min", "prob"])
    for (x, h1, h2), v in sorted(s.support.items()):
        name = game.state_names[x] if game is not None else x
        writer.writerow([name, " ".join(map(str, h1)), " ".join(map(str, h2)), repr(v)])
