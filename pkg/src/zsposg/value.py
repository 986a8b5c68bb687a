"""Value functions as families of collections of linear functions.

All structures are written for the maximizer of a game; the minimizer's
side lives on ``game.swapped()`` and reads occupancy states through
``s.swapped()``.

A :class:`Collection` stores one bookkept policy fragment of the
maximizer:

* the maximizer histories it was built on (``keys``) and the alias map
  sending raw histories onto them,
* the decision rule on those keys,
* its continuation: after key ``k``, control ``a`` and observation ``z``
  the policy continues as collection ``nexts[m]`` with probability
  ``mix[k, a, z, m]``, from the column that ``nexts[m]`` assigns to the
  extended history,
* the linear functions ``vectors[v, x, k]`` of the opponent plans kept so
  far; column ``K`` stands for histories outside ``keys`` when there are
  no keys at all (uniform play).

Opponent plans are interned trees in a :class:`PlanTable`; a collection
can evaluate any plan of its stage, so plans found against one policy
bound every other policy as well.

A collection evaluates an occupancy state as
``sum_j min_v sum_{x,i} s(x, i, j) vectors[v, x, key(i)]``, the
security level of its policy against the kept plans.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .game import Role
from .occupancy import OccupancyState

_ids = itertools.count()
FORMAT_HEADER = "# zsposg-family v2"
END = 0


class PlanTable:
    """Interned opponent plans per stage, with the pool of plans in use.

    A plan at stage ``t < horizon`` is ``(control, children)`` where
    ``children[z]`` is the stage-``t+1`` plan followed after observation
    ``z``.  Stage ``horizon`` has the single empty plan ``END``.
    """

    def __init__(self, game, horizon: int | None = None):
        self.game = game
        self.horizon = int(game.horizon if horizon is None else horizon)
        self.entries = [[] for _ in range(self.horizon)] + [[None]]
        self.index = [{} for _ in range(self.horizon + 1)]
        self.pool = [[] for _ in range(self.horizon)] + [[END]]
        self._pooled = [set() for _ in range(self.horizon)] + [{END}]
        self._default = {self.horizon: END}

    @property
    def n_observations(self):
        return self.game.n_observations[1]

    def intern(self, stage: int, control: int, children) -> int:
        key = (int(control), tuple(int(c) for c in children))
        pid = self.index[stage].get(key)
        if pid is None:
            pid = len(self.entries[stage])
            self.entries[stage].append(key)
            self.index[stage][key] = pid
        return pid

    def get(self, stage: int, pid: int):
        return self.entries[stage][pid]

    def default(self, stage: int) -> int:
        """Plan playing control 0 from ``stage`` on."""
        if stage not in self._default:
            child = self.default(stage + 1)
            self._default[stage] = self.intern(stage, 0, (child,) * self.n_observations)
        return self._default[stage]

    def add_to_pool(self, stage: int, pid: int) -> bool:
        if pid in self._pooled[stage]:
            return False
        self._pooled[stage].add(pid)
        self.pool[stage].append(pid)
        return True

    def set_pool(self, stage: int, pids):
        self.pool[stage] = list(dict.fromkeys(int(p) for p in pids))
        self._pooled[stage] = set(self.pool[stage])

    def size(self, stage: int, pid: int) -> int:
        """Number of decision nodes in a plan tree."""
        if stage == self.horizon:
            return 0
        _, kids = self.get(stage, pid)
        return 1 + sum(self.size(stage + 1, k) for k in kids)


class Collection:
    def __init__(self, stage, keys, alias, rule, nexts, mix, table: PlanTable,
                 plans=(), bound=False, origin=None, exact=True, level=0.0):
        self.id = next(_ids)
        self.stage = int(stage)
        self.keys = tuple(keys)
        self.alias = dict(alias or {})
        self.rule = None if rule is None else np.asarray(rule, dtype=float)
        self.nexts = tuple(nexts)
        self.mix = None if mix is None else np.asarray(mix, dtype=float)
        self.table = table
        self.bound = bool(bound)
        self.level = float(level)
        self.origin = origin
        self.exact = bool(exact)
        self.n_states = table.game.n_states
        self.vectors = np.zeros((0, self.n_states, self.n_keys + 1))
        self.plans = []
        self._pv = {}
        self._index = None
        self._cols = {}
        self._rule_full = None
        self._cms = None
        self._onehots = {}
        for pid in plans:
            self.activate(pid)

    # -- construction helpers -------------------------------------------
    @classmethod
    def boundary(cls, table: PlanTable):
        return cls(table.horizon, (), {}, None, (), None, table, plans=(END,))

    @classmethod
    def lower_bound(cls, table: PlanTable, stage: int, level: float, next_collection):
        """Constant pessimistic collection; its policy plays uniformly."""
        u1, z1 = table.game.n_controls[0], table.game.n_observations[0]
        return cls(
            stage, (), {}, np.zeros((0, u1)), (next_collection,), np.ones((1, u1, z1, 1)),
            table, bound=True, level=level, plans=(table.default(stage),),
        )

    @property
    def is_boundary(self):
        return self.rule is None

    @property
    def n_keys(self):
        return len(self.keys)

    @property
    def next(self):
        """Continuation with the largest total mixing weight."""
        if not self.nexts:
            return None
        return self.nexts[int(self.mix.sum(axis=(0, 1, 2)).argmax())]

    @property
    def rule_full(self):
        """Rule with an extra uniform row for unknown histories."""
        if self._rule_full is None:
            u = self.rule.shape[1]
            self._rule_full = np.vstack([self.rule, np.full((1, u), 1.0 / u)])
        return self._rule_full

    def lookup(self, history):
        """Column index of ``history``.

        Keys and aliased raw histories map to their key.  Any other history
        goes to the key sharing its longest suffix of (control, observation)
        pairs, lowest index on ties.  The column ``n_keys`` (uniform play)
        is only used when the collection has no keys.  Stored values stay
        exact under any such fixed assignment because policy execution
        resolves histories through this same method.
        """
        if self._index is None:
            idx = {h: i for i, h in enumerate(self.keys)}
            for raw, rep in self.alias.items():
                if rep in idx:
                    idx.setdefault(raw, idx[rep])
            self._index = idx
        k = self._index.get(history)
        if k is None:
            k = self._nearest(history)
            self._index[history] = k
        return k

    def _nearest(self, history):
        if not self.keys:
            return 0
        best, arg = -1, 0
        for i, h in enumerate(self.keys):
            n = 0
            while n < len(h) // 2 and n < len(history) // 2:
                if h[len(h) - 2 * n - 2: len(h) - 2 * n] != history[len(history) - 2 * n - 2: len(history) - 2 * n]:
                    break
                n += 1
            if n > best:
                best, arg = n, i
        return arg

    def columns(self, histories):
        """Cached column indices for a tuple of histories."""
        cols = self._cols.get(histories)
        if cols is None:
            cols = np.array([self.lookup(h) for h in histories], dtype=int)
            if len(self._cols) > 256:
                self._cols.clear()
            self._cols[histories] = cols
        return cols

    # -- continuation -----------------------------------------------------
    def child_maps(self):
        """``cms[m][k, a, z]``: column of ``nexts[m]`` after column ``k``, control ``a``, observation ``z``."""
        if self._cms is None:
            g = self.table.game
            u1, z1 = g.n_controls[0], g.n_observations[0]
            out = []
            for nxt in self.nexts:
                kids = tuple(h + (a, z) for h in self.keys for a in range(u1) for z in range(z1))
                inner = nxt.columns(kids).reshape(self.n_keys, u1, z1)
                off = np.full((1, u1, z1), nxt.n_keys, dtype=int)
                out.append(np.concatenate([inner, off], axis=0))
            self._cms = out
        return self._cms

    def active_nexts(self):
        return [m for m in range(len(self.nexts)) if self.mix[..., m].any()]

    def onehot(self, m):
        """Scatter matrix from flattened ``(k, a, z)`` onto the columns of ``nexts[m]``."""
        oh = self._onehots.get(m)
        if oh is None:
            cm = self.child_maps()[m].reshape(-1)
            oh = np.zeros((cm.size, self.nexts[m].n_keys + 1))
            oh[np.arange(cm.size), cm] = self.mix[..., m].reshape(-1)
            self._onehots[m] = oh
        return oh

    # -- opponent plans ----------------------------------------------------
    def vector_of(self, pid: int) -> np.ndarray:
        """Linear function ``[x, k]`` of plan ``pid`` against this policy."""
        v = self._pv.get(pid)
        if v is not None:
            return v
        if self.is_boundary:
            v = np.zeros((self.n_states, 1))
        elif self.bound:
            v = np.full((self.n_states, 1), self.level)
        else:
            b, kids = self.table.get(self.stage, pid)
            v = self._plan_vector(b, kids)
        self._pv[pid] = v
        return v

    def _plan_vector(self, b, kids):
        g = self.table.game
        p = g.transition[:, :, b]  # [x, a, y, z1, z2]
        r = g.reward[:, :, b]  # [x, a]
        ny, u1, z1, z2 = g.n_states, g.n_controls[0], g.n_observations[0], g.n_observations[1]
        cont = np.zeros((ny, self.n_keys + 1, u1, z1, z2))
        cms = self.child_maps()
        for m in self.active_nexts():
            w = self.mix[..., m]
            for z in range(z2):
                sub = self.nexts[m].vector_of(kids[z])  # [y, k']
                cont[..., z] += sub[:, cms[m]] * w[None]
        vals = r[:, None, :] + g.discount * np.einsum("xayuv,ykauv->xka", p, cont, optimize=True)
        return np.einsum("xka,ka->xk", vals, self.rule_full, optimize=True)

    def activate(self, pid: int) -> bool:
        """Keep plan ``pid`` among the vectors evaluated by this collection."""
        pid = int(pid)
        if pid in self.plans:
            return False
        v = self.vector_of(pid)
        self.vectors = np.concatenate([self.vectors, v[None]], axis=0)
        self.plans.append(pid)
        self.table.add_to_pool(self.stage, pid)
        return True

    def keep(self, mask):
        mask = np.asarray(mask, dtype=bool)
        self.vectors = self.vectors[mask]
        self.plans = [p for p, k in zip(self.plans, mask) if k]

    def nbytes(self):
        n = self.vectors.nbytes + sum(v.nbytes for v in self._pv.values())
        if self.rule is not None:
            n += self.rule.nbytes
        if self.mix is not None:
            n += self.mix.nbytes
        return n

    # -- evaluation -----------------------------------------------------
    def values_at(self, s: OccupancyState) -> np.ndarray:
        """Unnormalized vector values ``E[v, j]`` per minimizer history."""
        cols = self.columns(s.histories[0])
        sub = self.vectors[:, :, cols]  # [v, x, i]
        return np.einsum("vxi,xij->vj", sub, s.table, optimize=True)

    def evaluate(self, s: OccupancyState) -> float:
        return float(self.values_at(s).min(axis=0).sum())

    def same_policy(self, other, tol=1e-9):
        return (
            self.keys == other.keys and self.bound == other.bound and self.alias == other.alias
            and self.rule is not None and other.rule is not None
            and self.rule.shape == other.rule.shape
            and np.abs(self.rule - other.rule).max() <= tol
            and tuple(c.id for c in self.nexts) == tuple(c.id for c in other.nexts)
            and self.mix.shape == other.mix.shape and np.abs(self.mix - other.mix).max() <= tol
        )

    def __repr__(self):
        return (f"Collection(id={self.id}, stage={self.stage}, keys={len(self.keys)}, "
                f"vectors={len(self.vectors)}, nexts={len(self.nexts)}, bound={self.bound})")


@dataclass
class Family:
    """Max over collections; ``role`` says whose value it represents."""

    stage: int
    role: Role = Role.MAX
    collections: list = field(default_factory=list)
    witnesses: list = field(default_factory=list)
    table: PlanTable | None = None

    def view(self, s: OccupancyState) -> OccupancyState:
        return s if self.role == Role.MAX else s.swapped()

    def add_witness(self, s: OccupancyState, cap: int = 64, protect=None):
        key = s.key()
        if any(w.key() == key for w in self.witnesses):
            return False
        self.witnesses.append(s)
        while len(self.witnesses) > cap:
            for k, w in enumerate(self.witnesses):
                if protect is None or w.key() != protect:
                    del self.witnesses[k]
                    break
            else:
                break
        return True

    def insert(self, col: Collection) -> Collection:
        """Add ``col`` unless a collection with the same policy exists; merge plans then."""
        for other in self.collections:
            if other.same_policy(col):
                for pid in col.plans:
                    other.activate(pid)
                return other
        self.collections.append(col)
        return col

    def sync_pool(self):
        """Restrict the plan pool of this stage to plans kept by some collection."""
        if self.table is not None:
            self.table.set_pool(self.stage, [p for c in self.collections for p in c.plans])

    def nbytes(self):
        return sum(c.nbytes() for c in self.collections) + sum(w.table.nbytes for w in self.witnesses)


def eval_collection(col: Collection, s: OccupancyState) -> float:
    return col.evaluate(s)


def eval_family(fam: Family, s: OccupancyState):
    """Value of ``fam`` at ``s`` in the game's own payoff and the witness collection.

    For a minimizer family the max over collections is taken in the
    swapped game and the result negated.
    """
    if not fam.collections:
        raise ValueError("empty family")
    view = fam.view(s)
    best, arg = -np.inf, None
    for col in fam.collections:
        v = col.evaluate(view)
        if v > best + 1e-12:
            best, arg = v, col
    return (best if fam.role == Role.MAX else -best), arg


# -- single linear functions ----------------------------------------------
@dataclass(frozen=True)
class AlphaVector:
    """One linear function over conditional occupancy states.

    ``values`` maps (state, history of the value's owner) to a value;
    pairs outside it use ``default[state]`` when given.
    """

    owner: Role
    stage: int
    values: dict
    plan_tag: tuple = ()
    default: tuple | None = None


def alpha_vectors(col: Collection, owner: Role = Role.MIN):
    out = []
    for v, plan in zip(col.vectors, col.plans):
        vals = {(x, h): float(v[x, k]) for k, h in enumerate(col.keys) for x in range(v.shape[0])}
        out.append(AlphaVector(owner, col.stage, vals, (plan,), tuple(float(d) for d in v[:, -1])))
    return out


def eval_alpha(v: AlphaVector, c: dict, missing: list | None = None) -> float:
    """``sum c(x, o) v(x, o)``; unmatched entries use the default or count as 0."""
    total = 0.0
    for (x, o), w in c.items():
        val = v.values.get((x, o))
        if val is None:
            if missing is not None:
                missing.append((x, o))
            val = v.default[x] if v.default is not None else 0.0
        total += w * val
    return total


@dataclass(frozen=True)
class LinearBasisFunctional:
    """A fixed choice of one vector per minimizer history."""

    stage: int
    collection: Collection
    assignment: dict

    def __call__(self, s: OccupancyState) -> float:
        e = self.collection.values_at(s)
        total = 0.0
        for j, h in enumerate(s.histories[1]):
            v = self.assignment.get(h)
            total += e[v, j] if v is not None else e[:, j].min()
        return float(total)


def to_linear_basis(col: Collection, s: OccupancyState) -> LinearBasisFunctional:
    e = col.values_at(s)
    choice = e.argmin(axis=0)
    return LinearBasisFunctional(
        col.stage, col, {h: int(choice[j]) for j, h in enumerate(s.histories[1])}
    )


# -- bounded pruning --------------------------------------------------------
def witness_conditionals(col: Collection, witnesses) -> np.ndarray:
    """Conditionals of the witness points over ``col``'s columns, one row per history."""
    rows = []
    width = col.n_keys + 1
    for s in witnesses:
        cols = col.columns(s.histories[0])
        mass = s.table.sum(axis=(0, 1))
        for j in range(s.table.shape[2]):
            if mass[j] <= 0:
                continue
            c = np.zeros((s.n_states, width))
            np.add.at(c.T, cols, (s.table[:, :, j] / mass[j]).T)
            rows.append(c)
    return np.array(rows).reshape(-1, col.n_states, width)


def prune_alpha(col: Collection, witnesses, eps: float) -> Collection:
    """Drop vectors while each witness minimum rises by at most ``eps``.

    ``witnesses`` holds conditional distributions ``c[x, k]`` over the
    collection's columns (see :func:`witness_conditionals`).
    """
    c = np.asarray(witnesses, dtype=float)
    if len(col.vectors) <= 1 or c.size == 0:
        return col
    vals = np.einsum("vxk,wxk->vw", col.vectors, c)
    target = vals.min(axis=0) + eps
    keep = np.ones(len(vals), dtype=bool)
    # least useful vectors first
    order = np.argsort(-vals.min(axis=1), kind="stable")
    for v in order:
        if keep.sum() <= 1:
            break
        keep[v] = False
        if not np.all(vals[keep].min(axis=0) <= target + 1e-12):
            keep[v] = True
    if not keep.all():
        col.keep(keep)
    return col


def prune_collections(fam: Family, eps: float, witnesses=None, protect=()) -> Family:
    """Remove collections while the family value at each witness drops by at most ``eps``.

    Collections whose id is in ``protect`` are always kept.
    """
    points = [fam.view(s) for s in (witnesses if witnesses is not None else fam.witnesses)]
    if len(fam.collections) <= 1 or not points:
        return fam
    vals = np.array([[c.evaluate(s) for s in points] for c in fam.collections])
    floor = vals.max(axis=0) - eps
    keep = np.ones(len(vals), dtype=bool)
    order = np.argsort(vals.max(axis=1), kind="stable")
    protect = set(protect)
    for k in order:
        if keep.sum() <= 1:
            break
        if fam.collections[k].id in protect:
            continue
        keep[k] = False
        if not np.all(vals[keep].max(axis=0) >= floor - 1e-12):
            keep[k] = True
    fam.collections = [c for c, k in zip(fam.collections, keep) if k]
    return fam


# -- text serialization -----------------------------------------------------
def dump_families(families, fh):
    """Line-oriented dump: a header, then plan, collection, vector and family lines.

    Every vector occupies one line holding its collection, stage, owner,
    plan id and the sparse nonzero ``(state, column) -> value`` triples.
    Witness points are not stored.
    """
    fh.write(FORMAT_HEADER + "\n")
    tables = {}
    for fam in families:
        if fam.table is not None:
            tables.setdefault(fam.role, fam.table)
    for role, table in sorted(tables.items()):
        for t in range(table.horizon):
            for pid, (b, kids) in enumerate(table.entries[t]):
                fh.write("plan\t" + json.dumps({"role": role.name, "stage": t, "id": pid,
                                                "control": b, "children": list(kids)}) + "\n")
        for t in range(table.horizon + 1):
            fh.write("pool\t" + json.dumps({"role": role.name, "stage": t,
                                            "ids": [int(p) for p in table.pool[t]]}) + "\n")
    seen, order = set(), []
    role_of = {}

    def visit(col, role):
        if col.id in seen:
            return
        seen.add(col.id)
        role_of[col.id] = role
        for nxt in col.nexts:
            visit(nxt, role)
        order.append(col)

    for fam in families:
        for col in fam.collections:
            visit(col, fam.role)
    for col in order:
        mix = [] if col.mix is None else [
            [int(k), int(a), int(z), int(m), float(col.mix[k, a, z, m])]
            for k, a, z, m in zip(*np.nonzero(col.mix))
        ]
        head = {
            "id": col.id, "role": role_of[col.id].name, "stage": col.stage,
            "nexts": [c.id for c in col.nexts], "mix": mix,
            "bound": col.bound, "level": col.level, "exact": col.exact,
            "keys": [[int(u) for u in h] for h in col.keys],
            "alias": [[[int(u) for u in a], [int(u) for u in b]] for a, b in col.alias.items()],
            "rule": None if col.rule is None else col.rule.tolist(),
        }
        fh.write("collection\t" + json.dumps(head) + "\n")
        for v, plan in zip(col.vectors, col.plans):
            triples = [[int(x), int(k), float(v[x, k])] for x, k in zip(*np.nonzero(v))]
            fh.write("vector\t" + json.dumps({"col": col.id, "stage": col.stage, "owner": "MIN",
                                              "plan": int(plan), "pairs": triples}) + "\n")
    for fam in families:
        fh.write("family\t" + json.dumps({
            "stage": fam.stage, "role": fam.role.name,
            "collections": [c.id for c in fam.collections],
        }) + "\n")


def load_families(fh, game):
    """Inverse of :func:`dump_families` for the game the families were built on."""
    first = fh.readline().rstrip("\n")
    if first != FORMAT_HEADER:
        raise ValueError(f"unsupported family format header {first!r}")
    tables = {Role.MAX: PlanTable(game), Role.MIN: PlanTable(game.swapped())}
    cols, fams = {}, []
    for line in fh:
        kind, _, payload = line.rstrip("\n").partition("\t")
        data = json.loads(payload)
        if kind == "plan":
            table = tables[Role[data["role"]]]
            pid = table.intern(data["stage"], data["control"], data["children"])
            if pid != data["id"]:
                raise ValueError("plan records out of order")
        elif kind == "pool":
            tables[Role[data["role"]]].set_pool(data["stage"], data["ids"])
        elif kind == "collection":
            table = tables[Role[data["role"]]]
            nk = len(data["keys"])
            nexts = [cols[i] for i in data["nexts"]]
            mix = None
            if data["rule"] is not None:
                g = table.game
                mix = np.zeros((nk + 1, g.n_controls[0], g.n_observations[0], len(nexts)))
                for k, a, z, m, w in data["mix"]:
                    mix[k, a, z, m] = w
            col = Collection(
                data["stage"], [tuple(h) for h in data["keys"]],
                {tuple(a): tuple(b) for a, b in data["alias"]},
                None if data["rule"] is None else np.array(data["rule"], dtype=float).reshape(nk, table.game.n_controls[0]),
                nexts, mix, table, bound=data["bound"], level=data["level"], exact=data["exact"],
            )
            cols[data["id"]] = col
        elif kind == "vector":
            col = cols[data["col"]]
            v = np.zeros((col.n_states, col.n_keys + 1))
            for x, k, val in data["pairs"]:
                v[x, k] = val
            col._pv[data["plan"]] = v
            col.vectors = np.concatenate([col.vectors, v[None]])
            col.plans.append(data["plan"])
        elif kind == "family":
            role = Role[data["role"]]
            fams.append(Family(data["stage"], role, [cols[i] for i in data["collections"]],
                               table=tables[role]))
        else:
            raise ValueError(f"unknown record {kind!r}")
    return fams
