"""Optimality verification for the solved feedback laws.

Three independent lines of evidence, none of which reuse the solver route
they are checking:

* **Deviation tests** -- Monte Carlo first-order conditions.  One agent's
  realized control is perturbed open-loop by ``eps * v(t)`` with common
  random numbers across the epsilon grid; in a linear system the perturbed
  trajectories are exact affine shifts of the baseline, so the cost change
  of every path is an exact quadratic in eps.  At an optimum the fitted
  linear coefficient is statistically zero and the curvature positive.
  A leader deviation shifts the mean leader path, so the follower reaction
  (offset and mean response) is recomputed for the shifted mean and the
  follower population shifts accordingly; a follower deviation leaves every
  other agent untouched but moves the population average by 1/N.
* **Stationarity residuals** -- along simulated paths the follower control
  must satisfy R u + B' (P x + K m + phi) = 0 at machine precision.
* **Dynamic-programming oracle** -- an exact one-step discretization of the
  follower's best-response problem solved by backward recursion, converging
  at O(dt) to the Riccati-based gains.  It shares no code with the
  continuous-time solvers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .follower import (
    FollowerGains,
    mean_weight,
    offset_source,
    solve_follower_gains,
    solve_phi,
    state_weight,
)
from .integrators import GridFunction, expm, integrate_forward
from .leader import LeaderGains, assemble_extended, solve_leader_gains
from .model import Mode, Scenario, TimeGrid, time_sampled
from .simulation import (
    NoiseModel,
    _build_tables,
    _quad,
    default_chunk_size,
    simulate,
)

__all__ = [
    "DeviationResult",
    "DpOracleResult",
    "CheckRow",
    "VerificationReport",
    "direction_library",
    "follower_deviation_test",
    "leader_deviation_test",
    "stationarity_residuals",
    "dp_gain_oracle",
    "run_verification",
]

PASS_FLOOR = 1e-9


@dataclass(frozen=True)
class DeviationResult:
    """Outcome of one first-order-condition test."""

    label: str
    target: str             # "leader" or "follower"
    vacuous: bool
    epsilons: tuple         # nonzero deviation magnitudes
    delta_mean: tuple       # mean cost change per epsilon
    delta_se: tuple
    c1: float               # fitted linear coefficient (should be ~0)
    c1_se: float
    c2: float               # fitted curvature (should be > 0)
    c2_se: float
    fit_residual: float     # worst gap between mean deltas and the fit
    passed: bool


def direction_library(grid: TimeGrid, m: int, count: int, seed: int) -> list:
    """Deterministic perturbation directions: (label, (steps+1, m)) pairs."""
    t = grid.nodes
    T = grid.horizon
    base = [
        ("const", np.ones_like(t)),
        ("halfsine", np.sin(np.pi * t / T)),
        ("cosine", np.cos(np.pi * t / T)),
        ("ramp", t / T - 0.5),
    ]
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        if i < len(base):
            label, prof = base[i]
        else:
            c = rng.standard_normal(3)
            prof = sum(c[j] * np.sin((j + 1) * np.pi * t / T) for j in range(3))
            label = f"mix{i - len(base) + 1}"
        out.append((label, np.tile(prof[:, None], (1, m))))
    return out


def _normalize_direction(direction, grid: TimeGrid, m: int) -> np.ndarray:
    v = np.asarray(direction, dtype=float)
    if v.ndim == 1:
        v = np.tile(v, (grid.steps + 1, 1))
    if v.shape != (grid.steps + 1, m):
        raise ValueError(f"direction must have shape ({grid.steps + 1}, {m})")
    return v


def _fit_quadratic(J: np.ndarray, epsilons: np.ndarray, label: str, target: str, base_mean: float) -> DeviationResult:
    """Per-path quadratic fit of cost changes over the epsilon grid."""
    if len(epsilons) < 3:
        raise ValueError("need at least two nonzero epsilons to fit a quadratic")
    n_paths = J.shape[0]
    delta = J[:, 1:] - J[:, :1]           # slot 0 is the baseline
    eps = epsilons[1:]
    design = np.stack([eps, eps * eps], axis=1)
    coef = delta @ np.linalg.pinv(design).T     # (n_paths, 2)
    a, b = coef[:, 0], coef[:, 1]

    def mean_se(x):
        mu = float(x.mean())
        se = float(x.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        return mu, se

    c1, c1_se = mean_se(a)
    c2, c2_se = mean_se(b)
    dm = delta.mean(axis=0)
    ds = delta.std(axis=0, ddof=1) / math.sqrt(n_paths) if n_paths > 1 else np.zeros_like(dm)
    fit = float(np.max(np.abs(dm - (c1 * eps + c2 * eps * eps))))
    floor = PASS_FLOOR * (1.0 + abs(base_mean))
    passed = abs(c1) <= 3.0 * c1_se + floor and c2 > 0.0
    return DeviationResult(
        label=label,
        target=target,
        vacuous=False,
        epsilons=tuple(float(e) for e in eps),
        delta_mean=tuple(float(x) for x in dm),
        delta_se=tuple(float(x) for x in ds),
        c1=c1,
        c1_se=c1_se,
        c2=c2,
        c2_se=c2_se,
        fit_residual=fit,
        passed=passed,
    )


def _vacuous(label: str, target: str, epsilons) -> DeviationResult:
    eps = tuple(float(e) for e in epsilons if e != 0.0)
    zeros = tuple(0.0 for _ in eps)
    return DeviationResult(
        label=label, target=target, vacuous=True, epsilons=eps,
        delta_mean=zeros, delta_se=zeros, c1=0.0, c1_se=0.0, c2=0.0, c2_se=0.0,
        fit_residual=0.0, passed=True,
    )


def _control_shift(tab, v: np.ndarray, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euler-Maruyama response of a single state to a unit control deviation."""
    K = tab.steps
    chi = np.zeros((K + 1, A.shape[0]))
    for k in range(K):
        chi[k + 1] = chi[k] + tab.dt * (A @ chi[k] + B @ v[k])
    return chi


def _chunks(n_paths: int, N: int, steps: int, chunk_size=None):
    chunk = chunk_size or default_chunk_size(N, steps, n_paths)
    return [(i, min(i + chunk, n_paths)) for i in range(0, n_paths, chunk)]


def _run_chunks(fn, argses, workers: int):
    if workers > 1 and len(argses) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, argses))
    return [fn(a) for a in argses]


# ---------------------------------------------------------------------------
# Follower deviation
# ---------------------------------------------------------------------------


def _follower_dev_chunk(args) -> np.ndarray:
    (tab, dists, seed, start, stop, substeps, eps, v, chi, team) = args
    nm = NoiseModel(seed)
    c = stop - start
    K, n, m, N = tab.steps, tab.n, tab.m, tab.N
    dt = tab.dt

    xi0 = np.empty((c, n))
    xi = np.empty((c, N, n))
    dW = np.empty((c, N + 1, K))
    for i, p in enumerate(range(start, stop)):
        xi0[i] = nm.initial(p, 0, dists[0])
        dW[i, 0] = nm.wiener(p, 0, K, dt, substeps)
        for j in range(N):
            xi[i, j] = nm.initial(p, j + 1, dists[1])
            dW[i, j + 1] = nm.wiener(p, j + 1, K, dt, substeps)

    X = np.zeros((c, 3 * n))
    X[:, :n] = xi0
    X[:, n:2 * n] = tab.xi_bar
    x = xi

    E = len(eps)
    J = np.zeros((c, E))
    Q, R = tab.Q, tab.R
    for k in range(K + 1):
        x0 = X[:, :n]
        phi_p = tab.offset[k] + X @ tab.e3P[k].T
        xbar = x.mean(axis=1)
        u_all = -(x @ tab.F_x[k].T + tab.F_mean[k][None, None, :] + (phi_p @ tab.RinvBt.T)[:, None, :])

        x1 = x[:, 0]
        u1 = u_all[:, 0]
        rest_x = x[:, 1:]
        T1 = _quad(rest_x, Q).sum(axis=1)
        Tx = rest_x.sum(axis=1)
        Tu = _quad(u_all[:, 1:], R).sum(axis=1)
        x0G1 = x0 @ tab.Gamma1.T

        for e in range(E):
            x1e = x1 + eps[e] * chi[k]
            u1e = u1 + eps[e] * v[k]
            Sx = Tx + x1e
            z = (Sx / N) @ tab.Gamma.T + x0G1 + tab.eta[k]
            if team:
                S1 = T1 + _quad(x1e, Q)
                cross = np.einsum("pi,ij,pj->p", z, Q, Sx)
                integ = 0.5 * (S1 - 2.0 * cross + N * _quad(z, Q) + Tu + _quad(u1e, R)) / N
            else:
                y1 = x1e - z
                integ = 0.5 * (_quad(y1, Q) + _quad(u1e, R))
            J[:, e] += tab.weights[k] * integ

        if k < K:
            X = X + dt * (X @ tab.X_drift[k].T + tab.X_const[k]) + dW[:, 0, k][:, None] * tab.noise_vec
            x = x + dt * (x @ tab.A_f.T + u_all @ tab.B_f.T + tab.f_f[k]) + dW[:, 1:, k][:, :, None] * tab.D_f
    return J


def follower_deviation_test(
    s: Scenario,
    fg: FollowerGains,
    lg: LeaderGains,
    direction,
    epsilons,
    n_paths: int,
    seed: int,
    *,
    workers: int = 1,
    label: str = "follower",
) -> DeviationResult:
    """First-order condition for one follower's control.

    The deviating slot is follower 1 (exchangeability makes the choice
    irrelevant).  In game mode the follower's own cost must be stationary;
    in team mode the social cost must be.  Everyone else keeps the solved
    feedback, so only the 1/N population-average shift feeds back.
    """
    v = _normalize_direction(direction, s.grid, s.dims.m)
    if not np.any(v):
        return _vacuous(label, "follower", epsilons)
    es = assemble_extended(s, fg)
    tab = _build_tables(s, fg, lg, es)
    eps = np.concatenate(([0.0], np.asarray([e for e in epsilons if e != 0.0], dtype=float)))
    chi = _control_shift(tab, v, tab.A_f, tab.B_f)
    dists = (s.init.leader, s.init.follower)
    team = s.mode is Mode.TEAM
    argses = [
        (tab, dists, seed, a, b, 1, eps, v, chi, team)
        for a, b in _chunks(n_paths, s.dims.N, s.grid.steps)
    ]
    J = np.concatenate(_run_chunks(_follower_dev_chunk, argses, workers))
    return _fit_quadratic(J, eps, label, "follower", float(J[:, 0].mean()))


# ---------------------------------------------------------------------------
# Leader deviation
# ---------------------------------------------------------------------------


def _mean_follower_response(s: Scenario, fg: FollowerGains, dphi: GridFunction) -> np.ndarray:
    """Deterministic shift of the mean follower state caused by an offset shift."""
    G = s.follower_dyn.B @ fg.control_map
    A = s.follower_dyn.A
    Pi = fg.Pi

    def rhs(t, E):
        return (A - G @ Pi.eval(t)) @ E - G @ dphi.eval(t)

    return integrate_forward(rhs, np.zeros(s.dims.n), s.grid).values


def _leader_dev_chunk(args) -> np.ndarray:
    (tab, dists, seed, start, stop, substeps, eps, v, chi0, xi_shift) = args
    nm = NoiseModel(seed)
    c = stop - start
    K, n, m, N = tab.steps, tab.n, tab.m, tab.N
    dt = tab.dt

    xi0 = np.empty((c, n))
    xi = np.empty((c, N, n))
    dW = np.empty((c, N + 1, K))
    for i, p in enumerate(range(start, stop)):
        xi0[i] = nm.initial(p, 0, dists[0])
        dW[i, 0] = nm.wiener(p, 0, K, dt, substeps)
        for j in range(N):
            xi[i, j] = nm.initial(p, j + 1, dists[1])
            dW[i, j + 1] = nm.wiener(p, j + 1, K, dt, substeps)

    X = np.zeros((c, 3 * n))
    X[:, :n] = xi0
    X[:, n:2 * n] = tab.xi_bar
    x = xi

    E = len(eps)
    J = np.zeros((c, E))
    for k in range(K + 1):
        x0 = X[:, :n]
        phi_p = tab.offset[k] + X @ tab.e3P[k].T
        u0 = tab.u0_const[k] - X @ tab.u0_P[k].T
        xbar = x.mean(axis=1)
        u_all = -(x @ tab.F_x[k].T + tab.F_mean[k][None, None, :] + (phi_p @ tab.RinvBt.T)[:, None, :])

        for e in range(E):
            x0e = x0 + eps[e] * chi0[k]
            xbare = xbar + eps[e] * xi_shift[k]
            u0e = u0 + eps[e] * v[k]
            y0 = x0e - xbare @ tab.Gamma0.T - tab.eta0[k]
            J[:, e] += tab.weights[k] * 0.5 * (_quad(y0, tab.Q0) + _quad(u0e, tab.R0))

        if k < K:
            X = X + dt * (X @ tab.X_drift[k].T + tab.X_const[k]) + dW[:, 0, k][:, None] * tab.noise_vec
            x = x + dt * (x @ tab.A_f.T + u_all @ tab.B_f.T + tab.f_f[k]) + dW[:, 1:, k][:, :, None] * tab.D_f
    return J


def leader_deviation_test(
    s: Scenario,
    fg: FollowerGains,
    lg: LeaderGains,
    direction,
    epsilons,
    n_paths: int,
    seed: int,
    *,
    workers: int = 1,
    label: str = "leader",
) -> DeviationResult:
    """First-order condition for the leader's control.

    The leader's realized control is perturbed open-loop.  The follower
    population reacts to the shifted mean leader path: the offset shift is
    re-solved through the follower backward equation and the mean response
    through the forward mean equation, and every follower trajectory shifts
    deterministically by the resulting amount.
    """
    v = _normalize_direction(direction, s.grid, s.dims.m)
    if not np.any(v):
        return _vacuous(label, "leader", epsilons)
    es = assemble_extended(s, fg)
    tab = _build_tables(s, fg, lg, es)
    eps = np.concatenate(([0.0], np.asarray([e for e in epsilons if e != 0.0], dtype=float)))

    chi0 = _control_shift(tab, v, tab.A0, tab.B0)
    mean0 = tab.mean_state[:, :tab.n]
    phi_a = solve_phi(s, fg.Pi, mean0)
    phi_b = solve_phi(s, fg.Pi, mean0 + chi0)
    dphi = GridFunction(s.grid, phi_b.values - phi_a.values)
    dEbar = _mean_follower_response(s, fg, dphi)

    # Follower-state shift under the perturbed mean field, marched with the
    # same one-step scheme the paths use.
    K = tab.steps
    xi_shift = np.zeros((K + 1, tab.n))
    for k in range(K):
        du = -tab.RinvBt @ (
            fg.P.values[k] @ xi_shift[k] + fg.K.values[k] @ dEbar[k] + dphi.values[k]
        )
        xi_shift[k + 1] = xi_shift[k] + tab.dt * (tab.A_f @ xi_shift[k] + tab.B_f @ du)

    dists = (s.init.leader, s.init.follower)
    argses = [
        (tab, dists, seed, a, b, 1, eps, v, chi0, xi_shift)
        for a, b in _chunks(n_paths, s.dims.N, s.grid.steps)
    ]
    J = np.concatenate(_run_chunks(_leader_dev_chunk, argses, workers))
    return _fit_quadratic(J, eps, label, "leader", float(J[:, 0].mean()))


# ---------------------------------------------------------------------------
# Stationarity residuals
# ---------------------------------------------------------------------------


def stationarity_residuals(s: Scenario, er, fg: FollowerGains, *, control_offset: float = 0.0) -> float:
    """Worst pointwise optimality residual R u + B'(P x + K m + phi) over stored paths."""
    if not er.paths:
        raise ValueError("ensemble holds no stored paths; rerun with store_paths >= 1")
    B, R = s.follower_dyn.B, s.follower_cost.R
    P, Kv = fg.P.values, fg.K.values
    mean_term = np.einsum("kij,kj->ki", Kv, er.mean_follower.values)
    worst = 0.0
    for path in er.paths:
        p = np.einsum("kij,akj->aki", P, path.followers) + mean_term + path.phi
        r = p @ B + (path.controls + control_offset) @ R.T
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


# ---------------------------------------------------------------------------
# Dynamic-programming oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpOracleResult:
    """Discrete-time backward recursion compared against the ODE route."""

    P: np.ndarray        # (steps+1, n, n) DP value-function curvature
    offset: np.ndarray   # (steps+1, n) DP value-function slope at x = 0
    delta_P: float       # max node gap to the Riccati solution
    delta_offset: float  # max node gap to K m + phi from the ODE route


def _exact_discretization(A: np.ndarray, B: np.ndarray, dt: float):
    """One-step transition (Ad, Bd) for constant (A, B) via an augmented exponential."""
    n, m = B.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = A
    M[:n, n:] = B
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:]


def dp_gain_oracle(s: Scenario, mean_leader: np.ndarray | None = None) -> DpOracleResult:
    """Independent finite-horizon check of the follower gain equations.

    Discretizes the follower's best-response problem exactly over each step
    (transition via matrix exponentials, stage cost via the rectangle rule)
    and solves it by backward dynamic programming.  The recursion touches
    none of the continuous-time solver code; its value-function curvature
    and slope converge at O(dt) to the Riccati solution and to K m + phi
    along the equilibrium mean path.
    """
    grid = s.grid
    Ksteps, dt, n = grid.steps, grid.dt, s.dims.n
    A, B = s.follower_dyn.A, s.follower_dyn.B
    R = s.follower_cost.R
    f = time_sampled(s.follower_dyn.f, grid)

    if mean_leader is None:
        A0, f0 = s.leader_dyn.A, s.leader_dyn.f
        f0s = time_sampled(f0, grid)
        f0g = GridFunction(grid, f0s)
        mean_leader = integrate_forward(
            lambda t, e: A0 @ e + f0g.eval(t), s.leader_mean0, grid
        ).values
    else:
        mean_leader = np.asarray(mean_leader, dtype=float)

    S = state_weight(s)
    S1 = mean_weight(s)
    g = offset_source(s, mean_leader)

    # ODE-route quantities the oracle is compared against.
    fg = solve_follower_gains(s, mean_leader=mean_leader)
    Pi = fg.Pi
    phi = fg.phi.values
    G = s.follower_dyn.B @ fg.control_map
    f_grid = GridFunction(grid, f)
    mean = integrate_forward(
        lambda t, e: (A - G @ Pi.eval(t)) @ e - G @ fg.phi.eval(t) + f_grid.eval(t),
        s.init.follower.mean,
        grid,
    ).values
    ode_offset = np.einsum("kij,kj->ki", fg.K.values, mean) + phi

    Ad, Bd = _exact_discretization(A, B, dt)
    Rd = dt * R

    Pdp = np.zeros((Ksteps + 1, n, n))
    h = np.zeros((Ksteps + 1, n))
    for k in range(Ksteps - 1, -1, -1):
        Pn = Pdp[k + 1]
        hn = h[k + 1]
        fd_k = _exact_discretization(A, f[k][:, None], dt)[1][:, 0]
        PB = Pn @ Bd
        gain_den = Rd + Bd.T @ PB
        closed = Ad - Bd @ np.linalg.solve(gain_den, PB.T @ Ad)
        Pdp[k] = dt * S + Ad.T @ Pn @ closed
        Pdp[k] = 0.5 * (Pdp[k] + Pdp[k].T)
        w = Pn @ fd_k + hn
        h[k] = -dt * (S1 @ mean[k] + g[k]) + Ad.T @ (
            w - PB @ np.linalg.solve(gain_den, Bd.T @ w)
        )

    delta_P = float(np.max(np.abs(Pdp - fg.P.values)))
    delta_offset = float(np.max(np.abs(h - ode_offset)))
    return DpOracleResult(P=Pdp, offset=h, delta_P=delta_P, delta_offset=delta_offset)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckRow:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class VerificationReport:
    mode: Mode
    n_paths: int
    seed: int
    checks: tuple
    deviations: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and all(d.passed for d in self.deviations)

    def summary_lines(self) -> list:
        lines = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            lines.append(f"[{tag}] {c.name}: value={c.value:.3e} threshold={c.threshold:.3e} {c.detail}".rstrip())
        for d in self.deviations:
            tag = "PASS" if d.passed else "FAIL"
            if d.vacuous:
                lines.append(f"[{tag}] deviation {d.target}/{d.label}: vacuous (zero direction)")
            else:
                lines.append(
                    f"[{tag}] deviation {d.target}/{d.label}: c1={d.c1:.3e} (se {d.c1_se:.3e}) "
                    f"c2={d.c2:.3e} fit_residual={d.fit_residual:.3e}"
                )
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"overall: {verdict}")
        return lines

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("kind,name,value,threshold,c1,c1_se,c2,c2_se,fit_residual,passed\n")
            for c in self.checks:
                fh.write(
                    f"check,{c.name},{c.value!r},{c.threshold!r},,,,,,{int(c.passed)}\n"
                )
            for d in self.deviations:
                fh.write(
                    f"deviation,{d.target}/{d.label},,,{d.c1!r},{d.c1_se!r},{d.c2!r},{d.c2_se!r},{d.fit_residual!r},{int(d.passed)}\n"
                )


def run_verification(
    s: Scenario,
    fg: FollowerGains | None = None,
    lg: LeaderGains | None = None,
    *,
    n_paths: int = 256,
    seed: int = 0,
    directions: int = 3,
    follower_epsilons=(-0.2, -0.1, -0.05, 0.05, 0.1, 0.2),
    leader_epsilons=(-0.2, -0.1, 0.1, 0.2),
    workers: int = 1,
) -> VerificationReport:
    """Full verification battery: solver invariants, oracles, deviation tests."""
    from .leader import solve_leader_M  # local import to avoid cycles at module load

    if fg is None:
        fg = solve_follower_gains(s)
    if lg is None:
        lg = solve_leader_gains(s, fg)

    checks = []

    def add(name, value, threshold, detail=""):
        checks.append(CheckRow(name, float(value), float(threshold), bool(value <= threshold), detail))

    sum_gap = float(np.max(np.abs(fg.P.values + fg.K.values - fg.Pi.values)))
    add("follower_sum_identity", sum_gap, 1e-8 * (1.0 + float(np.max(np.abs(fg.Pi.values)))))
    add("follower_symmetry_drift", fg.sym_drift, 1e-9)

    M_direct = solve_leader_M(assemble_extended(s, fg))
    leader_gap = float(np.max(np.abs(lg.P.values + lg.K.values - M_direct.values)))
    add(
        "leader_sum_identity",
        leader_gap,
        1e-6 * (1.0 + float(np.max(np.abs(M_direct.values)))),
        "independently solved combined equation",
    )

    er = simulate(s, fg, lg, n_paths, seed, workers=workers, store_paths=min(4, n_paths))

    mean0 = er.mean_state.values[:, : s.dims.n]
    phi_follower = solve_phi(s, fg.Pi, mean0).values
    phi_gap = float(np.max(np.abs(phi_follower - er.offset.values)))
    add(
        "offset_consistency",
        phi_gap,
        1e-6 * (1.0 + float(np.max(np.abs(er.offset.values)))),
        "follower-route offset vs leader-route offset",
    )

    add("offset_path_spread", er.phi_spread, 1e-10 * (1.0 + float(np.max(np.abs(er.offset.values)))))

    u_scale = float(np.max(np.abs(er.node_summary["u0_mean"]))) + 1.0
    add("stationarity_residual", stationarity_residuals(s, er, fg), 1e-9 * u_scale)

    n_small = min(n_paths, 64)
    perm = np.arange(s.dims.N, 0, -1)
    er_perm = simulate(s, fg, lg, n_small, seed, store_paths=0, agent_permutation=perm)
    relabeled = er.follower_cost_paths[:n_small][:, perm - 1]
    exch_gap = float(np.max(np.abs(er_perm.follower_cost_paths - relabeled)))
    add(
        "exchangeability",
        exch_gap,
        1e-8 * (1.0 + float(np.max(np.abs(relabeled)))),
        "stream relabeling permutes costs path-by-path",
    )

    dp = dp_gain_oracle(s, mean_leader=mean0)
    scale_P = 1.0 + float(np.max(np.abs(fg.P.values)))
    scale_h = 1.0 + float(np.max(np.abs(dp.offset)))
    add("dp_oracle_curvature", dp.delta_P, 200.0 * s.grid.dt * scale_P, "O(dt) discrete-time recursion")
    add("dp_oracle_offset", dp.delta_offset, 200.0 * s.grid.dt * scale_h)

    devs = []
    for label, v in direction_library(s.grid, s.dims.m, directions, seed + 17):
        devs.append(
            follower_deviation_test(
                s, fg, lg, v, follower_epsilons, n_paths, seed, workers=workers, label=label
            )
        )
    for label, v in direction_library(s.grid, s.dims.m, directions, seed + 29):
        devs.append(
            leader_deviation_test(
                s, fg, lg, v, leader_epsilons, n_paths, seed, workers=workers, label=label
            )
        )

    return VerificationReport(
        mode=s.mode,
        n_paths=n_paths,
        seed=seed,
        checks=tuple(checks),
        deviations=tuple(devs),
    )
