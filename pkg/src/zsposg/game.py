"""Two-player zero-sum partially observable stochastic games.

Player ``MAX`` (index 0) receives the reward, player ``MIN`` (index 1) pays it.
All dynamics are stored as dense numpy tables indexed by integer ids.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

TOL = 1e-9


class Role(enum.IntEnum):
    MAX = 0
    MIN = 1

    @property
    def other(self) -> "Role":
        return Role(1 - self)


@dataclass(frozen=True, eq=False)
class ZsPosg:
    """Finite zero-sum POSG.

    ``transition[x, u_max, u_min, y, z_max, z_min]`` is p(y, z | x, u) and
    ``reward[x, u_max, u_min]`` is the payoff to the maximizer.
    """

    transition: np.ndarray
    reward: np.ndarray
    initial_belief: np.ndarray
    discount: float = 1.0
    horizon: int = 1
    state_names: tuple = ()
    control_names: tuple = ((), ())
    observation_names: tuple = ((), ())
    roles_annotated: bool = False
    name: str = ""
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.reward, dtype=float)
        b = np.asarray(self.initial_belief, dtype=float)
        if p.ndim != 6:
            raise ValueError("transition must have shape (X, U1, U2, X, Z1, Z2)")
        nx, nu1, nu2, ny, nz1, nz2 = p.shape
        if ny != nx:
            raise ValueError("transition source and target state counts differ")
        if r.shape != (nx, nu1, nu2):
            raise ValueError(f"reward shape {r.shape} != {(nx, nu1, nu2)}")
        if b.shape != (nx,):
            raise ValueError(f"initial belief shape {b.shape} != {(nx,)}")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= float(self.discount) <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        for arr in (p, r, b):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_belief", b)
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "discount", float(self.discount))
        if not self.state_names:
            object.__setattr__(self, "state_names", tuple(f"s{i}" for i in range(nx)))
        if not any(self.control_names):
            object.__setattr__(
                self,
                "control_names",
                (tuple(f"a{i}" for i in range(nu1)), tuple(f"a{i}" for i in range(nu2))),
            )
        if not any(self.observation_names):
            object.__setattr__(
                self,
                "observation_names",
                (tuple(f"o{i}" for i in range(nz1)), tuple(f"o{i}" for i in range(nz2))),
            )

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_controls(self) -> tuple[int, int]:
        return self.transition.shape[1], self.transition.shape[2]

    @property
    def n_observations(self) -> tuple[int, int]:
        return self.transition.shape[4], self.transition.shape[5]

    def with_horizon(self, horizon: int) -> "ZsPosg":
        return self.replace(horizon=horizon)

    def replace(self, **changes) -> "ZsPosg":
        kwargs = dict(
            transition=self.transition,
            reward=self.reward,
            initial_belief=self.initial_belief,
            discount=self.discount,
            horizon=self.horizon,
            state_names=self.state_names,
            control_names=self.control_names,
            observation_names=self.observation_names,
            roles_annotated=self.roles_annotated,
            name=self.name,
        )
        kwargs.update(changes)
        return ZsPosg(**kwargs)

    def swapped(self) -> "ZsPosg":
        """The same game seen from the minimizer: roles exchanged, payoff negated.

        Solving the swapped game for its maximizer yields the minimizer's
        policies in the original game, with values negated.
        """
        cached = self._cache.get("swapped")
        if cached is None:
            cached = self.replace(
                transition=np.ascontiguousarray(self.transition.transpose(0, 2, 1, 3, 5, 4)),
                reward=np.ascontiguousarray(-self.reward.transpose(0, 2, 1)),
                control_names=self.control_names[::-1],
                observation_names=self.observation_names[::-1],
                name=f"{self.name}~swapped" if self.name else "",
            )
            self._cache["swapped"] = cached
        return cached

    def reward_bounds(self) -> tuple[float, float]:
        return float(self.reward.min()), float(self.reward.max())

    def remaining_weight(self, stage: int) -> float:
        """Sum of discount factors over stages ``stage .. horizon-1``."""
        n = self.horizon - stage
        if n <= 0:
            return 0.0
        g = self.discount
        return float(n) if g == 1.0 else (1.0 - g**n) / (1.0 - g)


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "ok"
        return "\n".join(f"{loc}: {mag:.3g}" for loc, mag in self.violations)


def validate(game: ZsPosg, tol: float = TOL) -> ValidationReport:
    """Check stochasticity of the kernel and the initial belief."""
    violations = []
    p = game.transition
    neg = np.argwhere(p < 0)
    for idx in neg:
        violations.append((f"negative p{tuple(int(i) for i in idx)}", float(-p[tuple(idx)])))
    mass = p.sum(axis=(3, 4, 5))
    for x, u1, u2 in np.argwhere(np.abs(mass - 1.0) > tol):
        violations.append(
            (f"transition mass (x={x}, u=({u1},{u2}))", float(abs(mass[x, u1, u2] - 1.0)))
        )
    b = game.initial_belief
    for (x,) in np.argwhere(b < 0):
        violations.append((f"negative initial belief x={x}", float(-b[x])))
    if abs(b.sum() - 1.0) > tol:
        violations.append(("initial belief mass", float(abs(b.sum() - 1.0))))
    if not np.all(np.isfinite(game.reward)):
        violations.append(("non-finite reward", float("inf")))
    return ValidationReport(tuple(violations))


def check_game(game) -> ZsPosg:
    """Raise ``ValueError`` unless ``game`` is a valid :class:`ZsPosg`."""
    if not isinstance(game, ZsPosg):
        raise TypeError(f"expected ZsPosg, got {type(game).__name__}")
    report = validate(game)
    if not report.ok:
        raise ValueError(f"invalid game:\n{report}")
    return game


def competitive_adaptation(game: ZsPosg) -> ZsPosg:
    """Reinterpret a common-payoff model as zero-sum: agent 1 now minimizes.

    The dynamics and reward table are untouched.
    """
    if game.roles_annotated:
        return game
    return game.replace(roles_annotated=True)


def embed_matrix_game(payoff) -> ZsPosg:
    """One-shot game with a single hidden state and blind players."""
    a = np.asarray(payoff, dtype=float)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("payoff must be a non-empty m x n matrix")
    m, n = a.shape
    p = np.ones((1, m, n, 1, 1, 1))
    return ZsPosg(
        transition=p,
        reward=a[None, :, :],
        initial_belief=np.ones(1),
        discount=1.0,
        horizon=1,
        roles_annotated=True,
        name="matrix",
    )


def random_game(
    rng,
    n_states: int = 2,
    n_controls=(2, 2),
    n_observations=(2, 2),
    horizon: int = 2,
    discount: float = 1.0,
    reward_scale: float = 1.0,
) -> ZsPosg:
    """Random game whose kernel factors as T(y|x,u) O(z|u,y)."""
    rng = np.random.default_rng(rng)
    nx = n_states
    n1, n2 = n_controls
    o1, o2 = n_observations
    t = rng.dirichlet(np.ones(nx), size=(nx, n1, n2))
    o = rng.dirichlet(np.ones(o1 * o2), size=(n1, n2, nx)).reshape(n1, n2, nx, o1, o2)
    p = t[:, :, :, :, None, None] * o[None]
    r = np.round(rng.uniform(-1.0, 1.0, size=(nx, n1, n2)) * reward_scale, 3)
    b = rng.dirichlet(np.ones(nx))
    return ZsPosg(
        transition=p,
        reward=r,
        initial_belief=b,
        discount=discount,
        horizon=horizon,
        roles_annotated=True,
        name="random",
    )
