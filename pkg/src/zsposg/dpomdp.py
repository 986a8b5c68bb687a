"""Reader and writer for the Cassandra-style ``.dpomdp`` text format.

Two-agent files map agent 0 to the maximizer and agent 1 to the minimizer.
The observation function is folded into the joint kernel at parse time,
p(y, z | x, u) = T(y | x, u) O(z | u, y), and rewards R(x, u, y, z) are
reduced to their expectation r(x, u).
"""
from __future__ import annotations

import itertools
import os
import re
from importlib import resources
from pathlib import Path

import numpy as np

from .game import ZsPosg, validate

BENCHMARK_ENV = "ZSPOSG_DATA"
BENCHMARKS = (
    "adversarialtiger",
    "competitivetiger",
    "recycling",
    "mabc",
    "matchingpennies",
)


class DpomdpSyntaxError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


_ENTRY = re.compile(r"^\s*([TOR])\s*:", re.MULTILINE)
_HEADERS = ("agents", "discount", "values", "states", "start", "actions", "observations")


def _strip_comments(text):
    return [line.split("#", 1)[0] for line in text.splitlines()]


def _is_number(tok):
    try:
        float(tok)
        return True
    except ValueError:
        return False


class _Reader:
    def __init__(self, text):
        self.lines = _strip_comments(text)
        self.n_agents = None
        self.discount = None
        self.sign = 1.0
        self.states = None
        self.start = None
        self.start_line = None
        self.actions = []
        self.observations = []

    # -- preamble -------------------------------------------------------
    def parse(self):
        i = 0
        n = len(self.lines)
        entries_at = None
        while i < n:
            raw = self.lines[i].strip()
            if not raw:
                i += 1
                continue
            if _ENTRY.match(raw):
                entries_at = i
                break
            key, sep, rest = raw.partition(":")
            key = key.strip()
            words = key.split()
            if not sep or not words or words[0] not in _HEADERS:
                raise DpomdpSyntaxError(f"unexpected content {raw!r}", i + 1)
            head = words[0]
            rest = rest.strip()
            if head == "agents":
                toks = rest.split()
                if len(toks) == 1 and toks[0].isdigit():
                    self.n_agents = int(toks[0])
                else:
                    self.n_agents = len(toks)
                if self.n_agents != 2:
                    raise DpomdpSyntaxError(
                        f"expected 2 agents, found {self.n_agents}", i + 1
                    )
                i += 1
            elif head == "discount":
                self.discount = float(rest)
                i += 1
            elif head == "values":
                if rest not in ("reward", "cost"):
                    raise DpomdpSyntaxError(f"values must be reward or cost, got {rest!r}", i + 1)
                self.sign = 1.0 if rest == "reward" else -1.0
                i += 1
            elif head == "states":
                self.states = self._names(rest.split(), i + 1)
                i += 1
            elif head in ("actions", "observations"):
                if self.n_agents is None:
                    raise DpomdpSyntaxError(f"{head} declared before agents", i + 1)
                sets = []
                if rest:
                    sets.append(self._names(rest.split(), i + 1))
                i += 1
                while len(sets) < self.n_agents:
                    if i >= n:
                        raise DpomdpSyntaxError(f"missing {head} for agent {len(sets)}", i)
                    line = self.lines[i].strip()
                    if line:
                        sets.append(self._names(line.split(), i + 1))
                    i += 1
                setattr(self, head, sets)
            elif head == "start":
                i = self._parse_start(words[1:], rest, i)
        if self.n_agents is None:
            raise DpomdpSyntaxError("missing agents header")
        if self.states is None:
            raise DpomdpSyntaxError("missing states header")
        if len(self.actions) != 2 or len(self.observations) != 2:
            raise DpomdpSyntaxError("actions and observations must be declared for both agents")
        self._resolve_start()
        return self._parse_entries(entries_at)

    @staticmethod
    def _names(toks, line):
        if len(toks) == 1 and toks[0].isdigit():
            return tuple(str(k) for k in range(int(toks[0])))
        if not toks:
            raise DpomdpSyntaxError("empty declaration", line)
        return tuple(toks)

    def _parse_start(self, modifiers, rest, i):
        self.start_line = i + 1
        if modifiers:
            self.start = (modifiers[0], rest.split())
            return i + 1
        toks = rest.split()
        i += 1
        if not toks:
            while i < len(self.lines) and not self.lines[i].strip():
                i += 1
            if i < len(self.lines):
                toks = self.lines[i].split()
                i += 1
        self.start = ("dist", toks)
        return i

    def _resolve_start(self):
        nx = len(self.states)
        if self.start is None:
            self.belief = np.full(nx, 1.0 / nx)
            return
        kind, toks = self.start
        line = self.start_line
        if kind == "dist":
            if toks == ["uniform"]:
                b = np.full(nx, 1.0 / nx)
            elif len(toks) == nx and all(_is_number(t) for t in toks):
                b = np.array([float(t) for t in toks])
            elif len(toks) == 1:
                b = np.zeros(nx)
                b[self._state(toks[0], line)] = 1.0
            else:
                raise DpomdpSyntaxError("cannot parse start distribution", line)
        elif kind in ("include", "exclude"):
            chosen = {self._state(t, line) for t in toks}
            if kind == "exclude":
                chosen = set(range(nx)) - chosen
            b = np.zeros(nx)
            b[sorted(chosen)] = 1.0 / len(chosen)
        else:
            raise DpomdpSyntaxError(f"unknown start modifier {kind!r}", line)
        self.belief = b

    # -- identifiers ------------------------------------------------------
    def _lookup(self, tok, names, what, line):
        if tok in names:
            return names.index(tok)
        if tok.isdigit() and int(tok) < len(names):
            return int(tok)
        raise DpomdpSyntaxError(f"undeclared {what} {tok!r}", line)

    def _state(self, tok, line):
        return self._lookup(tok, self.states, "state", line)

    def _states(self, tok, line):
        if tok == "*":
            return list(range(len(self.states)))
        return [self._state(tok, line)]

    def _joint(self, toks, sets, what, line):
        """Expand a joint action/observation spec into (i, j) index pairs."""
        if len(toks) == 1 and self.n_agents > 1:
            tok = toks[0]
            if tok == "*":
                return list(itertools.product(range(len(sets[0])), range(len(sets[1]))))
            if tok.isdigit():
                k = int(tok)
                n1 = len(sets[1])
                if k >= len(sets[0]) * n1:
                    raise DpomdpSyntaxError(f"joint {what} index {k} out of range", line)
                return [(k // n1, k % n1)]
            raise DpomdpSyntaxError(f"undeclared joint {what} {tok!r}", line)
        if len(toks) != self.n_agents:
            raise DpomdpSyntaxError(f"joint {what} needs {self.n_agents} components", line)
        per_agent = []
        for agent, tok in enumerate(toks):
            if tok == "*":
                per_agent.append(range(len(sets[agent])))
            else:
                per_agent.append([self._lookup(tok, sets[agent], what, line)])
        return list(itertools.product(*per_agent))

    # -- entries ----------------------------------------------------------
    def _parse_entries(self, start):
        nx = len(self.states)
        n1, n2 = len(self.actions[0]), len(self.actions[1])
        m1, m2 = len(self.observations[0]), len(self.observations[1])
        self.T = np.zeros((nx, n1, n2, nx))
        self.t_defined = np.zeros((nx, n1, n2), dtype=bool)
        self.O = np.zeros((n1, n2, nx, m1, m2))
        self.o_defined = np.zeros((n1, n2, nx), dtype=bool)
        self.R = np.zeros((nx, n1, n2, nx, m1, m2))
        if start is None:
            return
        body = "\n".join(self.lines[start:])
        matches = list(_ENTRY.finditer(body))
        for k, m in enumerate(matches):
            end = matches[k + 1].start() if k + 1 < len(matches) else len(body)
            line = start + body.count("\n", 0, m.start()) + 1
            chunk = body[m.end():end]
            parts = chunk.split(":")
            kind = m.group(1)
            try:
                getattr(self, f"_entry_{kind}")([p.split() for p in parts], line)
            except DpomdpSyntaxError:
                raise
            except (ValueError, IndexError) as exc:
                raise DpomdpSyntaxError(f"malformed {kind} entry: {exc}", line) from exc

    def _numbers(self, toks, count, line):
        if len(toks) != count or not all(_is_number(t) for t in toks):
            raise DpomdpSyntaxError(f"expected {count} numbers, got {len(toks)} tokens", line)
        return np.array([float(t) for t in toks])

    def _entry_T(self, parts, line):
        nx = len(self.states)
        acts = self._joint(parts[0], self.actions, "action", line)
        if len(parts) == 4:
            xs = self._states(self._single(parts[1], line), line)
            ys = self._states(self._single(parts[2], line), line)
            p = float(self._single(parts[3], line))
            for (a, b), x, y in itertools.product(acts, xs, ys):
                self.T[x, a, b, y] = p
                self.t_defined[x, a, b] = True
        elif len(parts) == 3:
            xs = self._states(self._single(parts[1], line), line)
            row = self._row(parts[2], nx, line)
            for (a, b), x in itertools.product(acts, xs):
                self.T[x, a, b, :] = row
                self.t_defined[x, a, b] = True
        elif len(parts) == 2:
            mat = self._matrix(parts[1], nx, nx, line)
            for a, b in acts:
                self.T[:, a, b, :] = mat
                self.t_defined[:, a, b] = True
        else:
            raise DpomdpSyntaxError("malformed T entry", line)

    def _entry_O(self, parts, line):
        nx = len(self.states)
        m1, m2 = len(self.observations[0]), len(self.observations[1])
        acts = self._joint(parts[0], self.actions, "action", line)
        if len(parts) == 4:
            ys = self._states(self._single(parts[1], line), line)
            obs = self._joint(parts[2], self.observations, "observation", line)
            p = float(self._single(parts[3], line))
            for (a, b), y, (o1, o2) in itertools.product(acts, ys, obs):
                self.O[a, b, y, o1, o2] = p
                self.o_defined[a, b, y] = True
        elif len(parts) == 3:
            ys = self._states(self._single(parts[1], line), line)
            row = self._row(parts[2], m1 * m2, line).reshape(m1, m2)
            for (a, b), y in itertools.product(acts, ys):
                self.O[a, b, y] = row
                self.o_defined[a, b, y] = True
        elif len(parts) == 2:
            mat = self._matrix(parts[1], nx, m1 * m2, line).reshape(nx, m1, m2)
            for a, b in acts:
                self.O[a, b] = mat
                self.o_defined[a, b] = True
        else:
            raise DpomdpSyntaxError("malformed O entry", line)

    def _entry_R(self, parts, line):
        nx = len(self.states)
        m1, m2 = len(self.observations[0]), len(self.observations[1])
        acts = self._joint(parts[0], self.actions, "action", line)
        xs = self._states(self._single(parts[1], line), line) if len(parts) >= 3 else None
        if len(parts) == 5:
            ys = self._states(self._single(parts[2], line), line)
            obs = self._joint(parts[3], self.observations, "observation", line)
            r = float(self._single(parts[4], line))
            for (a, b), x, y, (o1, o2) in itertools.product(acts, xs, ys, obs):
                self.R[x, a, b, y, o1, o2] = r
        elif len(parts) == 4:
            ys = self._states(self._single(parts[2], line), line)
            row = self._row(parts[3], m1 * m2, line).reshape(m1, m2)
            for (a, b), x, y in itertools.product(acts, xs, ys):
                self.R[x, a, b, y] = row
        elif len(parts) == 3:
            mat = self._row(parts[2], nx * m1 * m2, line).reshape(nx, m1, m2)
            for (a, b), x in itertools.product(acts, xs):
                self.R[x, a, b] = mat
        else:
            raise DpomdpSyntaxError("malformed R entry", line)

    @staticmethod
    def _single(toks, line):
        if len(toks) != 1:
            raise DpomdpSyntaxError(f"expected one token, got {toks}", line)
        return toks[0]

    def _row(self, toks, count, line):
        if toks == ["uniform"]:
            return np.full(count, 1.0 / count)
        return self._numbers(toks, count, line)

    def _matrix(self, toks, rows, cols, line):
        if toks == ["uniform"]:
            return np.full((rows, cols), 1.0 / cols)
        if toks == ["identity"]:
            if rows != cols:
                raise DpomdpSyntaxError("identity needs a square matrix", line)
            return np.eye(rows)
        return self._numbers(toks, rows * cols, line).reshape(rows, cols)

    # -- assembly -----------------------------------------------------------
    def build(self, name=""):
        states = self.states
        for x, a, b in np.argwhere(~self.t_defined):
            raise DpomdpSyntaxError(
                "transition undefined for (x,u) = "
                f"({states[x]}, ({self.actions[0][a]}, {self.actions[1][b]}))"
            )
        for a, b, y in np.argwhere(~self.o_defined):
            raise DpomdpSyntaxError(
                "observation undefined for (u,y) = "
                f"(({self.actions[0][a]}, {self.actions[1][b]}), {states[y]})"
            )
        # p[x,a,b,y,o1,o2] = T[x,a,b,y] * O[a,b,y,o1,o2]
        p = self.T[:, :, :, :, None, None] * self.O[None]
        reward = self.sign * np.einsum("xabyij,xabyij->xab", p, self.R)
        return ZsPosg(
            transition=p,
            reward=reward,
            initial_belief=self.belief,
            discount=1.0 if self.discount is None else self.discount,
            horizon=1,
            state_names=tuple(states),
            control_names=tuple(tuple(a) for a in self.actions),
            observation_names=tuple(tuple(o) for o in self.observations),
            name=name,
        )


def parse_dpomdp(text: str, name: str = "", horizon: int | None = None) -> ZsPosg:
    """Parse ``.dpomdp`` text into a validated :class:`ZsPosg`."""
    reader = _Reader(text)
    reader.parse()
    game = reader.build(name)
    report = validate(game)
    if not report.ok:
        raise ValueError(f"stochasticity violation in {name or 'model'}:\n{report}")
    if horizon is not None:
        game = game.with_horizon(horizon)
    return game


def load_dpomdp(path, horizon: int | None = None) -> ZsPosg:
    path = Path(path)
    return parse_dpomdp(path.read_text(), name=path.stem, horizon=horizon)


def serialize_dpomdp(game: ZsPosg) -> str:
    """Write ``game`` back out. The kernel must factor as T(y|x,u) O(z|u,y)."""
    p = game.transition
    t = p.sum(axis=(4, 5))
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(t[..., None, None] > 0, p / t[..., None, None], np.nan)
    nx, n1, n2 = game.reward.shape
    obs = np.zeros((n1, n2, nx) + p.shape[4:])
    for a, b, y in itertools.product(range(n1), range(n2), range(nx)):
        rows = cond[:, a, b, y]
        rows = rows[~np.isnan(rows).any(axis=(1, 2))]
        if len(rows) == 0:
            obs[a, b, y] = 1.0 / (p.shape[4] * p.shape[5])
            continue
        if np.abs(rows - rows[0]).max() > 1e-12:
            raise ValueError("observation probabilities depend on the source state")
        obs[a, b, y] = rows[0]

    sn = game.state_names
    an, on = game.control_names, game.observation_names
    out = [
        "agents: 2",
        f"discount: {game.discount!r}",
        "values: reward",
        "states: " + " ".join(sn),
        "start:",
        " ".join(repr(float(v)) for v in game.initial_belief),
        "actions:",
        " ".join(an[0]),
        " ".join(an[1]),
        "observations:",
        " ".join(on[0]),
        " ".join(on[1]),
    ]
    for x, a, b in itertools.product(range(nx), range(n1), range(n2)):
        for y in range(nx):
            if t[x, a, b, y] != 0.0:
                out.append(f"T: {an[0][a]} {an[1][b]} : {sn[x]} : {sn[y]} : {float(t[x, a, b, y])!r}")
    for a, b, y in itertools.product(range(n1), range(n2), range(nx)):
        for o1, o2 in itertools.product(range(p.shape[4]), range(p.shape[5])):
            if obs[a, b, y, o1, o2] != 0.0:
                out.append(
                    f"O: {an[0][a]} {an[1][b]} : {sn[y]} : {on[0][o1]} {on[1][o2]} : "
                    f"{float(obs[a, b, y, o1, o2])!r}"
                )
    for x, a, b in itertools.product(range(nx), range(n1), range(n2)):
        r = float(game.reward[x, a, b])
        if r != 0.0:
            out.append(f"R: {an[0][a]} {an[1][b]} : {sn[x]} : * : * : {r!r}")
    return "\n".join(out) + "\n"


def data_dir() -> Path:
    env = os.environ.get(BENCHMARK_ENV)
    if env:
        return Path(env)
    return Path(str(resources.files("zsposg") / "data"))


def benchmark_path(name: str) -> Path:
    path = Path(name)
    if path.suffix == ".dpomdp" and path.exists():
        return path
    candidate = data_dir() / f"{name.lower()}.dpomdp"
    if not candidate.exists():
        known = sorted(p.stem for p in data_dir().glob("*.dpomdp"))
        raise FileNotFoundError(f"unknown game {name!r}; bundled: {', '.join(known)}")
    return candidate


def load_benchmark(name: str, horizon: int | None = None) -> ZsPosg:
    from .game import competitive_adaptation

    return competitive_adaptation(load_dpomdp(benchmark_path(name), horizon=horizon))
