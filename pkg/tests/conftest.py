import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from zsposg.game import ZsPosg, embed_matrix_game, random_game

settings.register_profile(
    "default", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def tiny_games(seed, count, horizons=(1, 2)):
    """Random games with at most 2 states and 2 controls/observations per player."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        nx = int(rng.integers(1, 3))
        u1, u2, z1, z2 = (int(v) for v in rng.integers(1, 3, size=4))
        h = int(rng.choice(horizons))
        out.append(random_game(rng, nx, (u1, u2), (z1, z2), horizon=h))
    return out


def noisy_one_state_game(horizon=2):
    """One state, one control each, two equally likely private observations each."""
    p = np.full((1, 1, 1, 1, 2, 2), 0.25)
    return ZsPosg(p, np.zeros((1, 1, 1)), np.ones(1), horizon=horizon)


def zero_reward_game(horizon=2, seed=0):
    g = random_game(seed, 2, (2, 2), (2, 2), horizon=horizon)
    return g.replace(reward=np.zeros_like(g.reward))


@pytest.fixture
def pennies():
    return embed_matrix_game([[1.0, -1.0], [-1.0, 1.0]])


@pytest.fixture
def skewed():
    return embed_matrix_game([[3.0, 0.0], [1.0, 2.0]])


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def report_criterion(number, title, ok, detail=""):
    line = f"acceptance criterion {number} [{'PASS' if ok else 'FAIL'}] {title}"
    if detail:
        line += f": {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
