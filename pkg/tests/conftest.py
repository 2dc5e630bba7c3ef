"""Shared fixtures: benchmark scenario, fast test scenario, random instances.

Session-scoped fixtures cache solved gain sets so the expensive backward
solves run once per session.  The random-scenario factory draws well-posed
instances (hard validation checks pass, both solver stages integrate without
blow-up) and is deterministic in its seed argument.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from stackmf.follower import solve_follower_gains
from stackmf.integrators import BlowUpError
from stackmf.leader import SingularFlowError, solve_leader_gains
from stackmf.model import (
    Dims,
    Distribution,
    FollowerCost,
    FollowerDynamics,
    InitialLaw,
    LeaderCost,
    LeaderDynamics,
    Mode,
    Scenario,
    TimeGrid,
    load_scenario,
    validate,
)

REPO = Path(__file__).resolve().parents[1]
BASELINE_CFG = REPO / "scenarios" / "baseline_team.cfg"

# Small two-follower-dimension scenario used where solve time matters more
# than realism: short horizon, few followers, every coupling term nonzero.
FAST_CFG_TEXT = """\
mode = "team"

[dims]
n = 1
m = 1
N = 5

[leader]
A = 0.05
B = 0.5
f = 0.3
D = 0.4

[follower]
A = -0.1
B = 0.6
f = 0.2
D = 0.5

[cost.leader]
Q = 1.0
R = 1.0
Gamma = 0.7
eta = 0.5

[cost.follower]
Q = 1.0
R = 0.5
Gamma = 0.4
Gamma1 = 0.8
eta = 0.1

[init]
leader = "gaussian(1.0, 0.25)"
follower = "uniform(-1, 3)"

[grid]
T = 2.0
steps = 200
"""


@pytest.fixture(scope="session")
def baseline_text() -> str:
    return BASELINE_CFG.read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def team_scenario(baseline_text) -> Scenario:
    return load_scenario(baseline_text)


@pytest.fixture(scope="session")
def game_scenario(baseline_text) -> Scenario:
    return load_scenario(baseline_text.replace('mode = "team"', 'mode = "game"'))


def solve_both(s: Scenario):
    """Coupled follower solve plus leader solve; the standard pipeline."""
    fg = solve_follower_gains(s)
    lg = solve_leader_gains(s, fg)
    return s, fg, lg


@pytest.fixture(scope="session")
def team_gains(team_scenario):
    return solve_both(team_scenario)


@pytest.fixture(scope="session")
def game_gains(game_scenario):
    return solve_both(game_scenario)


@pytest.fixture(scope="session")
def fast_scenario() -> Scenario:
    return load_scenario(FAST_CFG_TEXT)


@pytest.fixture(scope="session")
def fast_gains(fast_scenario):
    return solve_both(fast_scenario)


@pytest.fixture(scope="session")
def fast_game_gains():
    return solve_both(load_scenario(FAST_CFG_TEXT.replace('mode = "team"', 'mode = "game"')))


def _spd(rng: np.random.Generator, k: int, floor: float = 0.0, scale: float = 1.0) -> np.ndarray:
    L = rng.uniform(-1.0, 1.0, (k, k))
    M = scale * (L @ L.T) / k + floor * np.eye(k)
    return 0.5 * (M + M.T)


def random_scenario(seed: int, *, mode: str | None = None, gamma_zero: bool = False,
                    n: int | None = None, m: int | None = None, N: int | None = None,
                    steps: int = 160, horizon: float = 1.5) -> Scenario:
    """One well-posed random instance; deterministic in `seed`.

    Draws until the hard validation checks pass and both solver stages
    integrate without blow-up, so every returned scenario is usable directly.
    """
    rng = np.random.default_rng(seed)
    for _ in range(64):
        nn = n if n is not None else int(rng.integers(1, 3))
        mm = m if m is not None else int(rng.integers(1, 3))
        NN = N if N is not None else int(rng.integers(2, 9))
        md = Mode(mode) if mode is not None else (Mode.GAME if rng.integers(2) else Mode.TEAM)
        grid = TimeGrid(horizon, steps)

        def mat(lo, hi, shape=(None, None)):
            r, c = (nn if shape[0] is None else shape[0]), (nn if shape[1] is None else shape[1])
            return rng.uniform(lo, hi, (r, c))

        gamma = np.zeros((nn, nn)) if gamma_zero else mat(-0.4, 0.4)
        s = Scenario(
            dims=Dims(nn, mm, NN),
            leader_dyn=LeaderDynamics(
                A=mat(-0.6, 0.6), B=mat(-1.0, 1.0, (None, mm)),
                f=rng.uniform(-0.5, 0.5, nn), D=rng.uniform(0.1, 0.8, nn),
            ),
            follower_dyn=FollowerDynamics(
                A=mat(-0.6, 0.6), B=mat(-1.0, 1.0, (None, mm)),
                f=rng.uniform(-0.5, 0.5, nn), D=rng.uniform(0.1, 0.8, nn),
            ),
            leader_cost=LeaderCost(
                Q=_spd(rng, nn), R=_spd(rng, mm, floor=0.4),
                Gamma=mat(-0.5, 0.5), eta=rng.uniform(-1.0, 1.0, nn),
            ),
            follower_cost=FollowerCost(
                Q=_spd(rng, nn), R=_spd(rng, mm, floor=0.4),
                Gamma=gamma, Gamma1=mat(-0.6, 0.6), eta=rng.uniform(-1.0, 1.0, nn),
            ),
            init=InitialLaw(
                leader=Distribution("gaussian", rng.uniform(-1, 1, nn), rng.uniform(0.0, 0.5, nn)),
                follower=Distribution("uniform", rng.uniform(-1, 0, nn), rng.uniform(0.5, 2.0, nn)),
            ),
            grid=grid,
            mode=md,
        )
        if not validate(s).hard_ok:
            continue
        try:
            solve_both(s)
        except (BlowUpError, SingularFlowError):
            continue
        return s
    raise RuntimeError(f"no well-posed scenario found for seed {seed}")


@pytest.fixture(scope="session")
def make_random_scenario():
    return random_scenario


@pytest.fixture(scope="session")
def random_battery():
    """Twenty solved random instances shared by the identity/symmetry tests."""
    return [solve_both(random_scenario(1000 + i)) for i in range(20)]


def replace_mode(s: Scenario, mode: Mode) -> Scenario:
    return dataclasses.replace(s, mode=mode)
