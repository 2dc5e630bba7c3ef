"""Scenario schema: parsing, serialization round-trip, validation, sampling."""
from __future__ import annotations

import numpy as np
import pytest

from stackmf.model import (
    Distribution,
    Mode,
    ScenarioError,
    TimeGrid,
    load_scenario,
    require_valid,
    scenario_to_text,
    time_sampled,
    validate,
)

MATRIX_CFG = """\
mode = "game"

[dims]
n = 2
m = 2
N = 4

[leader]
A = [[0.1, -0.2], [0.0, 0.3]]
B = [[1.0, 0.0], [0.5, 1.0]]
f = [0.25, -0.5]
D = [0.3, 0.4]

[follower]
A = [[-0.1, 0.2], [0.1, -0.3]]
B = [[0.8, 0.1], [0.0, 0.9]]
f = [0.0, 0.125]
D = [0.2, 0.1]

[cost.leader]
Q = [[2.0, 0.5], [0.5, 1.0]]
R = [[1.0, 0.0], [0.0, 2.0]]
Gamma = [[0.5, 0.0], [0.1, 0.5]]
eta = [1.0, -1.0]

[cost.follower]
Q = [[1.0, 0.25], [0.25, 1.5]]
R = [[0.5, 0.1], [0.1, 0.5]]
Gamma = [[0.2, 0.0], [0.0, 0.2]]
Gamma1 = [[0.7, 0.0], [0.0, 0.7]]
eta = [0.5, 0.25]

[init]
leader = "constant(1.5)"
follower = "gaussian(2.0, 0.5)"

[grid]
T = 1.0
steps = 100
"""


# ---------------------------------------------------------------------------
# Parsing and round-trip
# ---------------------------------------------------------------------------


def test_baseline_config_parses(team_scenario):
    s = team_scenario
    assert s.mode is Mode.TEAM
    assert (s.dims.n, s.dims.m, s.dims.N) == (1, 1, 30)
    assert s.grid.horizon == 10.0 and s.grid.steps == 1000
    assert s.leader_dyn.A[0, 0] == 0.05
    assert s.follower_cost.R[0, 0] == 0.1
    assert s.init.leader.kind == "uniform"
    assert s.leader_mean0[0] == 5.0
    assert s.follower_mean0[0] == 10.0


def test_matrix_config_parses():
    s = load_scenario(MATRIX_CFG)
    assert s.mode is Mode.GAME
    assert s.leader_dyn.A.shape == (2, 2)
    assert s.follower_dyn.B[0, 1] == 0.1
    assert s.init.follower.kind == "gaussian"
    assert np.array_equal(s.init.leader.mean, [1.5, 1.5])


@pytest.mark.parametrize("text_name", ["baseline", "matrix"])
def test_round_trip_is_bitwise(text_name, baseline_text):
    text = baseline_text if text_name == "baseline" else MATRIX_CFG
    s1 = load_scenario(text)
    s2 = load_scenario(scenario_to_text(s1))
    assert s1.mode is s2.mode and s1.dims == s2.dims
    assert s1.grid == s2.grid
    for grp in ("leader_dyn", "follower_dyn", "leader_cost", "follower_cost"):
        g1, g2 = getattr(s1, grp), getattr(s2, grp)
        for field in g1.__dataclass_fields__:
            assert np.array_equal(getattr(g1, field), getattr(g2, field)), (grp, field)
    for tier in ("leader", "follower"):
        d1, d2 = getattr(s1.init, tier), getattr(s2.init, tier)
        assert d1.kind == d2.kind
        assert np.array_equal(d1.a, d2.a) and np.array_equal(d1.b, d2.b)


def test_time_varying_forcing_parses(baseline_text):
    # A grid-sampled forcing: steps+1 rows, one per node.
    s0 = load_scenario(baseline_text)
    rows = ", ".join("[%g]" % v for v in np.linspace(0.0, 1.0, s0.grid.steps + 1))
    text = baseline_text.replace("f = 1.0", f"f = [{rows}]", 1)
    s = load_scenario(text)
    assert s.leader_dyn.f.shape == (s.grid.steps + 1, 1)
    sampled = time_sampled(s.leader_dyn.f, s.grid)
    assert sampled.shape == (s.grid.steps + 1, 1)
    assert sampled[0, 0] == 0.0 and sampled[-1, 0] == 1.0


def test_constant_forcing_tiles_over_grid(team_scenario):
    sampled = time_sampled(team_scenario.follower_dyn.f, team_scenario.grid)
    assert sampled.shape == (1001, 1)
    assert np.all(sampled == 1.0)


@pytest.mark.parametrize(
    "mutate,needle",
    [
        (lambda t: t.replace('mode = "team"\n', ""), "mode"),
        (lambda t: t.replace('mode = "team"', 'mode = "duel"'), "mode"),
        (lambda t: t.replace("[grid]", "[lattice]"), "lattice"),
        (lambda t: t.replace("steps = 1000", "steps = 1"), "steps"),
        (lambda t: t.replace("T = 10.0", "T = -1.0"), "horizon"),
        (lambda t: t.replace("N = 30", "N = 0"), "dims.N"),
        (lambda t: t.replace("R = 0.1", "R = [[0.1, 0.1]]"), "R"),
        (lambda t: t + "\nwhatever = 1\n", "whatever"),
        (lambda t: t.replace('leader = "uniform(0, 10)"', 'leader = "uniform(10, 0)"'), "a <= b"),
        (lambda t: t.replace('follower = "uniform(0, 20)"', 'follower = "poisson(3)"'), "poisson"),
    ],
)
def test_malformed_configs_are_rejected(baseline_text, mutate, needle):
    with pytest.raises(ScenarioError) as exc:
        load_scenario(mutate(baseline_text))
    assert needle.lower() in str(exc.value).lower()


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


def test_grid_nodes_and_dt():
    grid = TimeGrid(2.0, 8)
    assert grid.dt == 0.25
    assert grid.nodes.shape == (9,)
    assert grid.nodes[0] == 0.0 and grid.nodes[-1] == 2.0


def test_grid_rejects_bad_parameters():
    with pytest.raises(ScenarioError):
        TimeGrid(1.0, 1)
    with pytest.raises(ScenarioError):
        TimeGrid(0.0, 10)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def test_baseline_passes_all_checks(team_scenario):
    report = validate(team_scenario)
    assert report.hard_ok and report.all_ok
    assert not report.failures()
    require_valid(team_scenario)  # must not raise


def test_validate_is_pure(team_scenario):
    assert validate(team_scenario).checks == validate(team_scenario).checks


def test_zero_control_weight_fails_hard(baseline_text):
    s = load_scenario(baseline_text.replace("R = 0.1", "R = 0.0"))
    report = validate(s)
    assert not report.hard_ok
    assert any(c.name == "pd.R" for c in report.failures())
    with pytest.raises(ScenarioError):
        require_valid(s)


def test_asymmetric_weight_fails_hard():
    text = MATRIX_CFG.replace("Q = [[1.0, 0.25], [0.25, 1.5]]", "Q = [[1.0, 0.3], [0.25, 1.5]]")
    report = validate(load_scenario(text))
    assert not report.hard_ok
    assert any(c.name == "symmetry.Q" for c in report.failures())


def test_indefinite_state_weight_is_soft(baseline_text):
    # A negative state weight is flagged but does not block the solvers.
    s = load_scenario(baseline_text.replace("Q = 1.0\nR = 0.1", "Q = -1.0\nR = 0.1"))
    report = validate(s)
    assert report.hard_ok and not report.all_ok
    assert any(c.name == "psd.Q" for c in report.failures())
    require_valid(s)  # soft failures never raise


def test_validation_lines_render():
    lines = validate(load_scenario(MATRIX_CFG)).lines()
    assert len(lines) >= 8
    assert all(line.startswith(("pass", "FAIL", "warn")) for line in lines)


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


def test_distribution_means():
    assert Distribution("constant", np.array([2.0]), np.array([2.0])).mean[0] == 2.0
    assert Distribution("uniform", np.array([0.0]), np.array([10.0])).mean[0] == 5.0
    assert Distribution("gaussian", np.array([-1.0]), np.array([4.0])).mean[0] == -1.0


def test_distribution_rejects_bad_parameters():
    with pytest.raises(ScenarioError):
        Distribution("uniform", np.array([1.0]), np.array([0.0]))
    with pytest.raises(ScenarioError):
        Distribution("gaussian", np.array([0.0]), np.array([-1.0]))
    with pytest.raises(ScenarioError):
        Distribution("cauchy", np.array([0.0]), np.array([1.0]))


@pytest.mark.parametrize("kind,a,b", [("constant", 1.5, 1.5), ("uniform", 0.0, 10.0), ("gaussian", 2.0, 9.0)])
def test_sample_mean_matches_declared_mean(kind, a, b):
    # One million draws land within five standard errors of the declared mean.
    dist = Distribution(kind, np.array([a]), np.array([b]))
    rng = np.random.default_rng(42)
    draws = dist.sample(rng, 1_000_000)[:, 0]
    se = draws.std(ddof=1) / np.sqrt(draws.size)
    assert abs(draws.mean() - dist.mean[0]) <= 5.0 * se + 1e-12


def test_constant_distribution_samples_exactly():
    dist = Distribution("constant", np.array([3.0, -1.0]), np.array([3.0, -1.0]))
    draws = dist.sample(np.random.default_rng(0), 7)
    assert draws.shape == (7, 2)
    assert np.all(draws == [3.0, -1.0])
