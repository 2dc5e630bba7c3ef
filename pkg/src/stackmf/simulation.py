"""Euler-Maruyama ensemble simulation of the closed-loop leader/follower system.

The deterministic layer (the mean of the extended leader state, and the
follower offset reconstructed from it) is integrated once per run with RK4
and shared across paths.  Each path then marches the extended leader state
and all N followers with Euler-Maruyama on the same grid, evaluates both
feedback laws node by node, and accumulates the quadratic costs with the
trapezoid rule.

Noise streams are counter-derived: the generator for (path p, agent j) is a
Philox keyed purely by (seed, p, j, purpose), so results are bit-identical
for any worker count or chunking, and follower j's stream never depends on
how many paths run before it.  Agent 0 is the leader; the population average
is never sampled directly -- it is the exact arithmetic mean of the follower
states.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .follower import FollowerGains, solve_follower_gains
from .integrators import GridFunction, integrate_forward
from .leader import ExtendedSystem, LeaderGains, assemble_extended, solve_leader_gains
from .model import Distribution, Mode, Scenario, require_valid, time_sampled

__all__ = [
    "NoiseModel",
    "SimPath",
    "CostEstimate",
    "EnsembleResult",
    "GridMismatchError",
    "solve_mean_state",
    "simulate",
    "estimate_costs",
    "lln_diagnostic",
]

PURPOSE_INIT = 0
PURPOSE_NOISE = 1


class GridMismatchError(ValueError):
    """Gain tables and scenario grid disagree."""


@dataclass(frozen=True)
class NoiseModel:
    """Counter-derived noise streams per (path, agent).

    Streams are independent Philox generators keyed by a 128-bit packing of
    (seed, path, agent, purpose); nothing about one stream depends on any
    other stream having been consumed.
    """

    seed: int

    def key(self, path: int, agent: int, purpose: int) -> int:
        if path < 0 or path >= 1 << 32:
            raise ValueError("path index out of the 32-bit stream range")
        if agent < 0 or agent >= 1 << 30:
            raise ValueError("agent index out of the 30-bit stream range")
        return (
            ((self.seed & 0xFFFFFFFFFFFFFFFF) << 64)
            | (path << 32)
            | (agent << 2)
            | (purpose & 0x3)
        )

    def generator(self, path: int, agent: int, purpose: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key(path, agent, purpose)))

    def initial(self, path: int, agent: int, dist: Distribution) -> np.ndarray:
        """The initial-state draw for one agent on one path."""
        return dist.sample(self.generator(path, agent, PURPOSE_INIT), 1)[0]

    def wiener(self, path: int, agent: int, steps: int, dt: float, substeps: int = 1) -> np.ndarray:
        """Brownian increments over each grid step.

        With substeps > 1 the stream is drawn at resolution dt/substeps and
        aggregated, so runs at different step counts that share the same fine
        resolution consume the same underlying Brownian path.
        """
        gen = self.generator(path, agent, PURPOSE_NOISE)
        raw = gen.standard_normal(steps * substeps)
        fine = raw * math.sqrt(dt / substeps)
        if substeps == 1:
            return fine
        return fine.reshape(steps, substeps).sum(axis=1)


@dataclass(frozen=True)
class SimPath:
    """Full trajectories of one stored path."""

    index: int
    x0: np.ndarray           # (K+1, n)
    followers: np.ndarray    # (N, K+1, n)
    xbar: np.ndarray         # (K+1, n) exact arithmetic follower mean
    u0: np.ndarray           # (K+1, m)
    controls: np.ndarray     # (N, K+1, m)
    X: np.ndarray | None     # (K+1, 3n) extended leader state; None in open-loop runs
    phi: np.ndarray          # (K+1, n) offset used by the follower feedback


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    se: float


@dataclass(frozen=True)
class EnsembleResult:
    n_paths: int
    seed: int
    mode: Mode
    leader_cost: CostEstimate
    social_cost: CostEstimate
    follower_costs: np.ndarray        # (N,) per-slot means
    follower_costs_se: np.ndarray     # (N,)
    leader_cost_paths: np.ndarray     # (n_paths,)
    social_cost_paths: np.ndarray     # (n_paths,)
    follower_cost_paths: np.ndarray   # (n_paths, N)
    lln_gap: GridFunction             # scalar per node: E || xbar - E[x_i] ||
    mean_state: GridFunction          # (K+1, 3n) deterministic extended mean
    mean_follower: GridFunction       # (K+1, n) block 2 of the extended mean
    offset: GridFunction              # (K+1, n) deterministic follower offset
    phi_spread: float                 # max cross-path deviation of the offset
    node_summary: dict
    paths: tuple


@dataclass(frozen=True)
class _Tables:
    """Per-node precomputations shared by every path."""

    n: int
    m: int
    N: int
    steps: int
    dt: float
    weights: np.ndarray       # trapezoid weights, (K+1,)
    xi_bar: np.ndarray        # follower initial mean
    mean_state: np.ndarray    # (K+1, 3n)
    mean_follower: np.ndarray  # (K+1, n)
    offset: np.ndarray        # (K+1, n) deterministic part of phi
    X_drift: np.ndarray       # (K+1, 3n, 3n)  A + B P
    X_const: np.ndarray       # (K+1, 3n)      B (K meanX + V) + f_state
    e3P: np.ndarray           # (K+1, n, 3n)
    u0_P: np.ndarray          # (K+1, m, 3n)
    u0_const: np.ndarray      # (K+1, m)
    F_x: np.ndarray           # (K+1, m, n)
    F_mean: np.ndarray        # (K+1, m)
    RinvBt: np.ndarray        # (m, n)
    noise_vec: np.ndarray     # (3n,)
    A0: np.ndarray
    B0: np.ndarray
    f0: np.ndarray            # (K+1, n)
    D0: np.ndarray
    A_f: np.ndarray
    B_f: np.ndarray
    f_f: np.ndarray           # (K+1, n)
    D_f: np.ndarray
    Q0: np.ndarray
    R0: np.ndarray
    Gamma0: np.ndarray
    eta0: np.ndarray          # (K+1, n)
    Q: np.ndarray
    R: np.ndarray
    Gamma: np.ndarray
    Gamma1: np.ndarray
    eta: np.ndarray           # (K+1, n)


def solve_mean_state(s: Scenario, es: ExtendedSystem, lg: LeaderGains) -> GridFunction:
    """Forward RK4 for the deterministic mean of the extended leader state."""
    n = s.dims.n
    init = np.zeros(3 * n)
    init[:n] = s.leader_mean0
    init[n:2 * n] = s.follower_mean0

    def rhs(t, E):
        return (es.A.eval(t) + es.B @ lg.M.eval(t)) @ E + es.B @ lg.V.eval(t) + es.f_state.eval(t)

    return integrate_forward(rhs, init, s.grid)


def _check_grids(s: Scenario, fg: FollowerGains, lg: LeaderGains) -> None:
    if fg.grid != s.grid or lg.grid != s.grid:
        raise GridMismatchError("gain tables were solved on a different grid than the scenario")


def _build_tables(s: Scenario, fg: FollowerGains, lg: LeaderGains, es: ExtendedSystem) -> _Tables:
    K = s.grid.steps
    dt = s.grid.dt
    n, m, N = s.dims.n, s.dims.m, s.dims.N
    mean_state = solve_mean_state(s, es, lg)
    mX = mean_state.values
    P, Kg, V = lg.P.values, lg.K.values, lg.V.values

    KmV = np.einsum("kij,kj->ki", Kg, mX) + V          # K meanX + V per node
    offset = np.einsum("ij,kj->ki", es.e3, KmV)
    X_drift = es.A.values + np.einsum("ij,kjl->kil", es.B, P)
    X_const = KmV @ es.B.T + es.f_state.values
    e3P = np.einsum("ij,kjl->kil", es.e3, P)
    u0_P = np.einsum("ij,kjl->kil", lg.control_map, P)
    u0_const = -np.einsum("ij,kj->ki", lg.control_map, KmV)

    F_x = np.einsum("ij,kjl->kil", fg.control_map, fg.P.values)
    mean_follower = mX[:, n:2 * n]
    F_mean = np.einsum("ij,kjl,kl->ki", fg.control_map, fg.K.values, mean_follower)

    weights = np.full(K + 1, dt)
    weights[0] = weights[K] = 0.5 * dt

    return _Tables(
        n=n,
        m=m,
        N=N,
        steps=K,
        dt=dt,
        weights=weights,
        xi_bar=s.follower_mean0,
        mean_state=mX,
        mean_follower=mean_follower,
        offset=offset,
        X_drift=X_drift,
        X_const=X_const,
        e3P=e3P,
        u0_P=u0_P,
        u0_const=u0_const,
        F_x=F_x,
        F_mean=F_mean,
        RinvBt=fg.control_map,
        noise_vec=es.noise,
        A0=s.leader_dyn.A,
        B0=s.leader_dyn.B,
        f0=time_sampled(s.leader_dyn.f, s.grid),
        D0=s.leader_dyn.D,
        A_f=s.follower_dyn.A,
        B_f=s.follower_dyn.B,
        f_f=time_sampled(s.follower_dyn.f, s.grid),
        D_f=s.follower_dyn.D,
        Q0=s.leader_cost.Q,
        R0=s.leader_cost.R,
        Gamma0=s.leader_cost.Gamma,
        eta0=time_sampled(s.leader_cost.eta, s.grid),
        Q=s.follower_cost.Q,
        R=s.follower_cost.R,
        Gamma=s.follower_cost.Gamma,
        Gamma1=s.follower_cost.Gamma1,
        eta=time_sampled(s.follower_cost.eta, s.grid),
    )


def default_chunk_size(N: int, steps: int, n_paths: int) -> int:
    """Paths per chunk, capped so one chunk's increments stay around 64 MB.

    Depends only on (N, steps, n_paths) -- never on the worker count -- so
    reductions happen in the same order for any parallelism degree.
    """
    budget = int(8e6 // ((N + 1) * steps)) or 1
    return max(1, min(n_paths, min(budget, 1024)))


def draw_initials(nm: NoiseModel, dist: Distribution, paths: range, agents: np.ndarray) -> np.ndarray:
    """(len(paths), len(agents), n) initial draws from per-(path, agent) streams."""
    out = np.empty((len(paths), len(agents), dist.a.shape[0]))
    for i, p in enumerate(paths):
        for j, a in enumerate(agents):
            out[i, j] = nm.initial(p, int(a))
    return out


def draw_increments(
    nm: NoiseModel, paths: range, agents: np.ndarray, steps: int, dt: float, substeps: int
) -> np.ndarray:
    """(len(paths), len(agents), steps) Brownian increments."""
    out = np.empty((len(paths), len(agents), steps))
    for i, p in enumerate(paths):
        for j, a in enumerate(agents):
            out[i, j] = nm.wiener(p, int(a), steps, dt, substeps)
    return out


def _quad(y: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Quadratic form along the last axis: y' M y."""
    return np.einsum("...i,ij,...j->...", y, M, y)


def _simulate_chunk(args) -> dict:
    (tab, seed, start, stop, substeps, perm, u0_override, store_upto) = args
    nm = NoiseModel(seed)
    c = stop - start
    K, n, m, N = tab.steps, tab.n, tab.m, tab.N
    dt = tab.dt
    paths = range(start, stop)
    agents = np.concatenate(([0], perm))

    # Initial draws: leader from agent stream 0, follower slot j from stream perm[j].
    xi0 = np.empty((c, n))
    xi = np.empty((c, N, n))
    for i, p in enumerate(paths):
        xi0[i] = nm.initial(p, 0, tab_dist_leader)
        for j in range(N):
            xi[i, j] = nm.initial(p, int(perm[j]), tab_dist_follower)

    dW = draw_increments(nm, paths, agents, K, dt, substeps)
    dW0 = dW[:, 0, :]
    dWf = dW[:, 1:, :]

    open_loop = u0_override is not None

    X = np.zeros((c, 3 * n))
    X[:, :n] = xi0
    X[:, n:2 * n] = tab.xi_bar
    x0_open = xi0.copy() if open_loop else None
    x = xi.copy()

    J0 = np.zeros(c)
    Ji = np.zeros((c, N))
    x0_sum = np.zeros((K + 1, n))
    x0_sq = np.zeros((K + 1, n))
    xbar_sum = np.zeros((K + 1, n))
    xbar_sq = np.zeros((K + 1, n))
    u0_sum = np.zeros((K + 1, m))
    u0_sq = np.zeros((K + 1, m))
    gap_sum = np.zeros(K + 1)
    phi_spread = 0.0

    n_store = max(0, min(store_upto, stop) - start)
    store = None
    if n_store > 0:
        store = {
            "x0": np.empty((n_store, K + 1, n)),
            "followers": np.empty((n_store, N, K + 1, n)),
            "xbar": np.empty((n_store, K + 1, n)),
            "u0": np.empty((n_store, K + 1, m)),
            "controls": np.empty((n_store, N, K + 1, m)),
            "X": None if open_loop else np.empty((n_store, K + 1, 3 * n)),
            "phi": np.empty((n_store, K + 1, n)),
        }

    for k in range(K + 1):
        if open_loop:
            x0 = x0_open
            phi_p = np.broadcast_to(tab.offset[k], (c, n))
            u0 = np.broadcast_to(u0_override[k], (c, m))
        else:
            x0 = X[:, :n]
            phi_p = tab.offset[k] + X @ tab.e3P[k].T
            u0 = tab.u0_const[k] - X @ tab.u0_P[k].T

        xbar = x.mean(axis=1)
        u = -(x @ tab.F_x[k].T + tab.F_mean[k][None, None, :] + (phi_p @ tab.RinvBt.T)[:, None, :])

        y0 = x0 - xbar @ tab.Gamma0.T - tab.eta0[k]
        J0 += tab.weights[k] * 0.5 * (_quad(y0, tab.Q0) + _quad(u0, tab.R0))
        y = x - (xbar @ tab.Gamma.T)[:, None, :] - (x0 @ tab.Gamma1.T)[:, None, :] - tab.eta[k]
        Ji += tab.weights[k] * 0.5 * (_quad(y, tab.Q) + _quad(u, tab.R))

        x0_sum[k] += x0.sum(axis=0)
        x0_sq[k] += (x0 * x0).sum(axis=0)
        xbar_sum[k] += xbar.sum(axis=0)
        xbar_sq[k] += (xbar * xbar).sum(axis=0)
        u0_sum[k] += u0.sum(axis=0)
        u0_sq[k] += (u0 * u0).sum(axis=0)
        gap_sum[k] += float(np.linalg.norm(xbar - tab.mean_follower[k], axis=1).sum())
        spread = float(np.max(np.abs(phi_p - tab.offset[k]))) if c else 0.0
        if spread > phi_spread:
            phi_spread = spread

        if store is not None:
            sl = slice(0, n_store)
            store["x0"][:, k] = x0[sl]
            store["followers"][:, :, k] = x[sl]
            store["xbar"][:, k] = xbar[sl]
            store["u0"][:, k] = u0[sl]
            store["controls"][:, :, k] = u[sl]
            if store["X"] is not None:
                store["X"][:, k] = X[sl]
            store["phi"][:, k] = phi_p[sl]

        if k < K:
            if open_loop:
                drift0 = x0_open @ tab.A0.T + u0 @ tab.B0.T + tab.f0[k]
                x0_open = x0_open + dt * drift0 + dW0[:, k][:, None] * tab.D0
            else:
                X = X + dt * (X @ tab.X_drift[k].T + tab.X_const[k]) + dW0[:, k][:, None] * tab.noise_vec
            drift = x @ tab.A_f.T + u @ tab.B_f.T + tab.f_f[k]
            x = x + dt * drift + dWf[:, :, k][:, :, None] * tab.D_f

    return {
        "start": start,
        "J0": J0,
        "Ji": Ji,
        "x0_sum": x0_sum,
        "x0_sq": x0_sq,
        "xbar_sum": xbar_sum,
        "xbar_sq": xbar_sq,
        "u0_sum": u0_sum,
        "u0_sq": u0_sq,
        "gap_sum": gap_sum,
        "phi_spread": phi_spread,
        "store": store,
    }


# Module-level slots so chunk workers can reach the distributions without
# re-pickling them per call (set right before the chunk loop runs).
tab_dist_leader: Distribution | None = None
tab_dist_follower: Distribution | None = None


def _chunk_worker(payload):
    global tab_dist_leader, tab_dist_follower
    tab_dist_leader, tab_dist_follower, args = payload
    return _simulate_chunk(args)


def simulate(
    s: Scenario,
    fg: FollowerGains,
    lg: LeaderGains,
    n_paths: int,
    seed: int,
    *,
    workers: int = 1,
    store_paths: int = 2,
    substeps: int = 1,
    agent_permutation=None,
    u0_override=None,
    chunk_size: int | None = None,
) -> EnsembleResult:
    """Simulate the closed-loop ensemble and estimate all costs.

    Identical (scenario, seed, n_paths) produce bit-identical results for any
    `workers`.  `agent_permutation` relabels follower slots onto noise
    streams (exchangeability checks).  `u0_override` forces an open-loop
    leader control -- a (m,) constant or (steps+1, m) table; the follower
    layer still runs the solved feedback against the deterministic offset.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    require_valid(s)
    _check_grids(s, fg, lg)
    es = assemble_extended(s, fg)
    tab = _build_tables(s, fg, lg, es)
    K, n, m, N = tab.steps, tab.n, tab.m, tab.N

    perm = np.arange(1, N + 1) if agent_permutation is None else np.asarray(agent_permutation, dtype=int)
    if sorted(perm.tolist()) != list(range(1, N + 1)):
        raise ValueError("agent_permutation must permute 1..N")

    if u0_override is not None:
        u0_override = np.asarray(u0_override, dtype=float)
        if u0_override.ndim == 1:
            u0_override = np.tile(u0_override, (K + 1, 1))
        if u0_override.shape != (K + 1, m):
            raise ValueError(f"u0_override must have shape ({K + 1}, {m})")

    store_paths = max(0, min(store_paths, n_paths))
    chunk = chunk_size or default_chunk_size(N, K, n_paths)
    spans = [(i, min(i + chunk, n_paths)) for i in range(0, n_paths, chunk)]
    argses = [
        (tab, seed, start, stop, substeps, perm, u0_override, store_paths)
        for start, stop in spans
    ]

    global tab_dist_leader, tab_dist_follower
    tab_dist_leader = s.init.leader
    tab_dist_follower = s.init.follower
    if workers > 1 and len(argses) > 1:
        payloads = [(s.init.leader, s.init.follower, a) for a in argses]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(_chunk_worker, payloads))
    else:
        partials = [_simulate_chunk(a) for a in argses]

    J0 = np.concatenate([p["J0"] for p in partials])
    Ji = np.concatenate([p["Ji"] for p in partials])

    def total(key):
        acc = partials[0][key].copy()
        for p in partials[1:]:
            acc += p[key]
        return acc

    x0_mean = total("x0_sum") / n_paths
    xbar_mean = total("xbar_sum") / n_paths
    u0_mean = total("u0_sum") / n_paths

    def std(sq_key, mean):
        second = total(sq_key) / n_paths
        return np.sqrt(np.maximum(second - mean * mean, 0.0))

    node_summary = {
        "x0_mean": x0_mean,
        "x0_std": std("x0_sq", x0_mean),
        "xbar_mean": xbar_mean,
        "xbar_std": std("xbar_sq", xbar_mean),
        "u0_mean": u0_mean,
        "u0_std": std("u0_sq", u0_mean),
    }

    gap = total("gap_sum") / n_paths
    phi_spread = max(p["phi_spread"] for p in partials)

    paths = []
    offset_vals = tab.offset
    for p in partials:
        st = p["store"]
        if st is None:
            continue
        count = st["x0"].shape[0]
        for i in range(count):
            paths.append(
                SimPath(
                    index=p["start"] + i,
                    x0=st["x0"][i],
                    followers=st["followers"][i],
                    xbar=st["xbar"][i],
                    u0=st["u0"][i],
                    controls=st["controls"][i],
                    X=None if st["X"] is None else st["X"][i],
                    phi=st["phi"][i],
                )
            )

    def estimate(samples: np.ndarray) -> CostEstimate:
        mean = float(samples.mean())
        se = float(samples.std(ddof=1) / math.sqrt(len(samples))) if len(samples) > 1 else 0.0
        return CostEstimate(mean, se)

    Jsoc_paths = Ji.mean(axis=1)
    grid = s.grid
    return EnsembleResult(
        n_paths=n_paths,
        seed=seed,
        mode=s.mode,
        leader_cost=estimate(J0),
        social_cost=estimate(Jsoc_paths),
        follower_costs=Ji.mean(axis=0),
        follower_costs_se=Ji.std(axis=0, ddof=1) / math.sqrt(n_paths) if n_paths > 1 else np.zeros(N),
        leader_cost_paths=J0,
        social_cost_paths=Jsoc_paths,
        follower_cost_paths=Ji,
        lln_gap=GridFunction(grid, gap),
        mean_state=GridFunction(grid, tab.mean_state),
        mean_follower=GridFunction(grid, tab.mean_follower),
        offset=GridFunction(grid, offset_vals),
        phi_spread=phi_spread,
        node_summary=node_summary,
        paths=tuple(paths),
    )


def estimate_costs(er: EnsembleResult) -> list[tuple[str, float, float]]:
    """Cost table rows: (name, mean, standard error)."""
    rows = [
        ("J0", er.leader_cost.mean, er.leader_cost.se),
        ("Jsoc", er.social_cost.mean, er.social_cost.se),
    ]
    for i in range(er.follower_costs.shape[0]):
        rows.append((f"J{i + 1}", float(er.follower_costs[i]), float(er.follower_costs_se[i])))
    return rows


def lln_diagnostic(
    s: Scenario, N_list, n_paths: int, seed: int, *, workers: int = 1
) -> tuple[list[tuple[int, float]], float]:
    """Mean gap between the population average and its limit at t = T/2.

    Gains are re-solved for every follower count (the sources carry 1/N
    factors).  Returns ((N, gap) rows, fitted log-log slope); the gap decays
    like N^-1/2 when the de-aggregation is wired correctly.
    """
    rows = []
    mid = s.grid.steps // 2
    for N in N_list:
        sN = replace(s, dims=replace(s.dims, N=int(N)))
        fg = solve_follower_gains(sN)
        lg = solve_leader_gains(sN, fg)
        er = simulate(sN, fg, lg, n_paths, seed, workers=workers, store_paths=0)
        rows.append((int(N), float(er.lln_gap.values[mid])))
    logs = np.log([r[0] for r in rows])
    gaps = np.log([r[1] for r in rows])
    slope = float(np.polyfit(logs, gaps, 1)[0])
    return rows, slope
