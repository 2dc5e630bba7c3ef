"""Monte Carlo engine: determinism, exchangeability, exact identities."""
from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import scipy.stats

from stackmf.leader import assemble_extended
from stackmf.model import TimeGrid, load_scenario
from stackmf.simulation import (
    GridMismatchError,
    NoiseModel,
    default_chunk_size,
    estimate_costs,
    simulate,
    solve_mean_state,
)
from conftest import FAST_CFG_TEXT, solve_both


# ---------------------------------------------------------------------------
# Reproducibility
# ---------------------------------------------------------------------------


def ensembles_equal(a, b) -> None:
    assert a.leader_cost == b.leader_cost
    assert a.social_cost == b.social_cost
    assert np.array_equal(a.follower_costs, b.follower_costs)
    assert np.array_equal(a.leader_cost_paths, b.leader_cost_paths)
    assert np.array_equal(a.social_cost_paths, b.social_cost_paths)
    assert np.array_equal(a.follower_cost_paths, b.follower_cost_paths)
    assert np.array_equal(a.lln_gap.values, b.lln_gap.values)
    for key in a.node_summary:
        assert np.array_equal(a.node_summary[key], b.node_summary[key]), key
    assert len(a.paths) == len(b.paths)
    for pa, pb in zip(a.paths, b.paths):
        assert np.array_equal(pa.x0, pb.x0)
        assert np.array_equal(pa.followers, pb.followers)
        assert np.array_equal(pa.u0, pb.u0)
        assert np.array_equal(pa.controls, pb.controls)


def test_worker_count_does_not_change_results(fast_gains):
    s, fg, lg = fast_gains
    base = simulate(s, fg, lg, 24, seed=7, workers=1)
    multi = simulate(s, fg, lg, 24, seed=7, workers=3)
    ensembles_equal(base, multi)


def test_chunk_size_changes_nothing_per_path(fast_gains):
    # Per-path quantities are computed row-wise and must be bitwise stable
    # under re-chunking; cross-path reductions may reassociate by one ulp.
    s, fg, lg = fast_gains
    base = simulate(s, fg, lg, 24, seed=7)
    odd = simulate(s, fg, lg, 24, seed=7, chunk_size=7)
    assert np.array_equal(base.leader_cost_paths, odd.leader_cost_paths)
    assert np.array_equal(base.social_cost_paths, odd.social_cost_paths)
    assert np.array_equal(base.follower_cost_paths, odd.follower_cost_paths)
    for pa, pb in zip(base.paths, odd.paths):
        assert np.array_equal(pa.x0, pb.x0)
        assert np.array_equal(pa.followers, pb.followers)
    assert np.allclose(base.lln_gap.values, odd.lln_gap.values, rtol=1e-12, atol=1e-14)
    for key in base.node_summary:
        assert np.allclose(
            base.node_summary[key], odd.node_summary[key], rtol=1e-12, atol=1e-14
        ), key


def test_noise_streams_are_counter_based(fast_gains):
    # Path 17 is the same stream whether or not paths 0..16 were simulated.
    s, fg, lg = fast_gains
    big = simulate(s, fg, lg, 18, seed=3, store_paths=18)
    lone = simulate(s, fg, lg, 1, seed=3, store_paths=1, chunk_size=1)
    assert np.array_equal(big.paths[0].followers, lone.paths[0].followers)


# ---------------------------------------------------------------------------
# Exchangeability
# ---------------------------------------------------------------------------


def test_relabeling_streams_permutes_costs(fast_gains):
    s, fg, lg = fast_gains
    base = simulate(s, fg, lg, 16, seed=11, store_paths=0)
    perm = np.arange(s.dims.N, 0, -1)
    permuted = simulate(s, fg, lg, 16, seed=11, store_paths=0, agent_permutation=perm)
    relabeled = base.follower_cost_paths[:, perm - 1]
    gap = np.max(np.abs(permuted.follower_cost_paths - relabeled))
    assert gap <= 1e-8 * (1.0 + np.max(np.abs(relabeled)))


def test_reseeded_cost_samples_are_indistinguishable(fast_gains):
    # Two-sample test on the social cost across disjoint seeds.
    s, fg, lg = fast_gains
    a = simulate(s, fg, lg, 192, seed=100, store_paths=0)
    b = simulate(s, fg, lg, 192, seed=2_000_000, store_paths=0)
    stat = scipy.stats.ks_2samp(a.social_cost_paths, b.social_cost_paths)
    assert stat.pvalue >= 0.01


def test_bad_permutation_rejected(fast_gains):
    s, fg, lg = fast_gains
    with pytest.raises(ValueError):
        simulate(s, fg, lg, 2, seed=0, agent_permutation=np.ones(s.dims.N, dtype=int))


# ---------------------------------------------------------------------------
# Exact per-path identities
# ---------------------------------------------------------------------------


def test_population_average_is_exact_mean(fast_gains):
    s, fg, lg = fast_gains
    er = simulate(s, fg, lg, 4, seed=5, store_paths=4)
    for path in er.paths:
        gap = np.max(np.abs(path.xbar - path.followers.mean(axis=0)))
        assert gap <= 1e-13


def test_offset_is_deterministic_across_paths(fast_gains):
    s, fg, lg = fast_gains
    er = simulate(s, fg, lg, 6, seed=9, store_paths=6)
    scale = 1.0 + np.max(np.abs(er.offset.values))
    assert er.phi_spread <= 1e-9 * scale
    for path in er.paths:
        gap = np.max(np.abs(path.phi - er.offset.values))
        assert gap <= er.phi_spread + 1e-15


def test_leader_control_recomposes_gain_tables(fast_gains):
    s, fg, lg = fast_gains
    er = simulate(s, fg, lg, 3, seed=13, store_paths=3)
    mean = er.mean_state.values
    for path in er.paths:
        costate = (
            np.einsum("kij,kj->ki", lg.P.values, path.X)
            + np.einsum("kij,kj->ki", lg.K.values, mean)
            + lg.V.values
        )
        expected = -costate @ lg.control_map.T
        assert np.max(np.abs(path.u0 - expected)) <= 1e-12


def test_social_cost_is_average_of_follower_costs(fast_gains):
    s, fg, lg = fast_gains
    er = simulate(s, fg, lg, 32, seed=17, store_paths=0)
    gap = np.max(np.abs(er.social_cost_paths - er.follower_cost_paths.mean(axis=1)))
    assert gap <= 1e-12 * (1.0 + np.max(np.abs(er.social_cost_paths)))


def test_costs_nonnegative_without_targets():
    text = FAST_CFG_TEXT.replace("eta = 0.5", "eta = 0.0").replace("eta = 0.1", "eta = 0.0")
    text = text.replace("f = 0.3", "f = 0.0").replace("f = 0.2", "f = 0.0")
    s, fg, lg = solve_both(load_scenario(text))
    er = simulate(s, fg, lg, 64, seed=23, store_paths=0)
    assert np.min(er.leader_cost_paths) >= -1e-12
    assert np.min(er.follower_cost_paths) >= -1e-12


def test_estimate_costs_table(fast_gains):
    s, fg, lg = fast_gains
    er = simulate(s, fg, lg, 8, seed=1, store_paths=0)
    rows = estimate_costs(er)
    names = [r[0] for r in rows]
    assert names[:2] == ["J0", "Jsoc"]
    assert names[2:] == [f"J{i}" for i in range(1, s.dims.N + 1)]
    assert rows[0][1] == er.leader_cost.mean and rows[0][2] == er.leader_cost.se


# ---------------------------------------------------------------------------
# Degenerate noise and forced controls
# ---------------------------------------------------------------------------


DETERMINISTIC_CFG = (
    FAST_CFG_TEXT
    .replace("D = 0.4", "D = 0.0")
    .replace("D = 0.5", "D = 0.0")
    .replace('leader = "gaussian(1.0, 0.25)"', 'leader = "constant(1.0)"')
    .replace('follower = "uniform(-1, 3)"', 'follower = "constant(2.0)"')
)


def test_noise_free_runs_are_seed_independent():
    # Power-of-two path count keeps the pairwise mean reductions exact, so
    # the zero-variance assertions below hold bitwise.
    s, fg, lg = solve_both(load_scenario(DETERMINISTIC_CFG))
    a = simulate(s, fg, lg, 4, seed=1, store_paths=1)
    b = simulate(s, fg, lg, 4, seed=999, store_paths=1)
    assert a.leader_cost.mean == b.leader_cost.mean
    assert a.leader_cost.se == 0.0
    assert np.array_equal(a.paths[0].x0, b.paths[0].x0)
    assert np.max(a.node_summary["x0_std"]) == 0.0


def test_forced_leader_control_costs_pure_energy():
    # With no leader tracking weight, a forced constant control costs exactly
    # (1/2) c' R0 c T regardless of the follower field.
    text = FAST_CFG_TEXT.replace("Q = 1.0\nR = 1.0", "Q = 0.0\nR = 1.0")
    text = text.replace("eta = 0.5", "eta = 0.0")
    s, fg, lg = solve_both(load_scenario(text))
    c = 0.7
    er = simulate(s, fg, lg, 4, seed=2, store_paths=2, u0_override=np.array([c]))
    exact = 0.5 * c * c * s.grid.horizon
    assert er.leader_cost.mean == pytest.approx(exact, abs=1e-12)
    assert er.leader_cost.se == 0.0
    for path in er.paths:
        assert np.all(path.u0 == c)


def test_override_shape_is_validated(fast_gains):
    s, fg, lg = fast_gains
    with pytest.raises(ValueError):
        simulate(s, fg, lg, 1, seed=0, u0_override=np.zeros((3, s.dims.m)))


# ---------------------------------------------------------------------------
# Noise model
# ---------------------------------------------------------------------------


def test_wiener_substeps_refine_the_same_path():
    nm = NoiseModel(seed=5)
    fine = nm.wiener(path=3, agent=2, steps=10, dt=0.1, substeps=1)
    coarse = nm.wiener(path=3, agent=2, steps=5, dt=0.2, substeps=2)
    assert np.allclose(coarse, fine[0::2] + fine[1::2], rtol=0.0, atol=1e-16)


def test_streams_differ_by_purpose_and_agent():
    nm = NoiseModel(seed=5)
    w1 = nm.wiener(path=0, agent=1, steps=8, dt=0.1)
    w2 = nm.wiener(path=0, agent=2, steps=8, dt=0.1)
    w3 = nm.wiener(path=1, agent=1, steps=8, dt=0.1)
    assert not np.array_equal(w1, w2)
    assert not np.array_equal(w1, w3)
    with pytest.raises(ValueError):
        nm.key(path=-1, agent=0, purpose=0)
    with pytest.raises(ValueError):
        nm.key(path=0, agent=1 << 30, purpose=0)


def test_refined_grid_with_shared_noise_converges(fast_gains):
    # Halving the step count while drawing noise at the fine resolution keeps
    # each path on the same Brownian trajectory, so the coarse run tracks the
    # fine one path-by-path (first-order in dt).
    s, fg, lg = fast_gains
    fine = simulate(s, fg, lg, 4, seed=31, store_paths=4)
    coarse_s = dataclasses.replace(s, grid=TimeGrid(s.grid.horizon, s.grid.steps // 2))
    cs, cfg, clg = solve_both(coarse_s)
    coarse = simulate(cs, cfg, clg, 4, seed=31, store_paths=4, substeps=2)
    for pf, pc in zip(fine.paths, coarse.paths):
        gap = np.max(np.abs(pf.x0[0::2] - pc.x0))
        scale = 1.0 + np.max(np.abs(pf.x0))
        assert gap <= 0.05 * scale
    assert abs(fine.social_cost.mean - coarse.social_cost.mean) <= 0.05 * (
        1.0 + abs(fine.social_cost.mean)
    )


# ---------------------------------------------------------------------------
# Guards and bookkeeping
# ---------------------------------------------------------------------------


def test_grid_mismatch_is_rejected(fast_gains):
    s, fg, lg = fast_gains
    other = dataclasses.replace(s, grid=TimeGrid(s.grid.horizon, s.grid.steps // 2))
    _, fg2, lg2 = solve_both(other)
    with pytest.raises(GridMismatchError):
        simulate(s, fg2, lg2, 1, seed=0)


def test_path_count_validation(fast_gains):
    s, fg, lg = fast_gains
    with pytest.raises(ValueError):
        simulate(s, fg, lg, 0, seed=0)


def test_store_paths_is_clamped(fast_gains):
    s, fg, lg = fast_gains
    er = simulate(s, fg, lg, 3, seed=0, store_paths=64)
    assert len(er.paths) == 3
    none = simulate(s, fg, lg, 3, seed=0, store_paths=0)
    assert none.paths == ()


def test_default_chunk_size_positive():
    assert default_chunk_size(30, 1000, 10_000) >= 1
    assert default_chunk_size(1, 2, 1) >= 1


def test_mean_state_starts_at_declared_means(fast_gains):
    s, fg, lg = fast_gains
    es = assemble_extended(s, fg)
    mean = solve_mean_state(s, es, lg)
    n = s.dims.n
    assert np.array_equal(mean.values[0, :n], s.leader_mean0)
    assert np.array_equal(mean.values[0, n:2 * n], s.follower_mean0)
    assert np.array_equal(mean.values[0, 2 * n:], np.zeros(n))
