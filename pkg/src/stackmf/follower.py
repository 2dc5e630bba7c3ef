"""Follower-stage gain equations and the decentralized follower feedback law.

Each follower's best response (game mode) or the social optimum (team mode)
is characterized by one symmetric Riccati equation for the own-state gain P,
a linear matrix equation for the mean-coupling gain K, an independent
symmetric Riccati equation for the aggregate gain Pi (which must equal
P + K), and an offset vector phi driven by the leader's mean path:

    P'  + A'P + PA - P G P + S            = 0,   P(T)  = 0
    K'  + A'K + KA - P G K - K G (P + K) - S1 = 0,   K(T)  = 0
    Pi' + A'Pi + Pi A - Pi G Pi + S2      = 0,   Pi(T) = 0
    phi' + (A' - Pi G) phi + Pi f - g     = 0,   phi(T) = 0

with G = B R^-1 B'.  The sources S, S1, S2, g are the only mode-dependent
pieces: game mode carries the (I - Gamma/N) influence factors of a single
agent on the population average, team mode the social re-weightings of the
per-capita cost.  The feedback law for agent i is

    u_i = -R^-1 B' (P x_i + K E[x_i] + phi).

Gains are identical across agents; there is deliberately no per-agent entry
point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .integrators import BlowUpError, GridFunction, integrate_backward
from .model import Mode, Scenario, require_valid, time_sampled

__all__ = [
    "TeamWeights",
    "FollowerGains",
    "team_weights",
    "state_weight",
    "mean_weight",
    "aggregate_weight",
    "offset_source",
    "solve_P",
    "solve_K",
    "solve_Pi",
    "solve_phi",
    "solve_follower_gains",
    "follower_feedback",
]

# Per-step symmetrization drift beyond this means the integrator itself is
# producing asymmetric output, not just roundoff.
_SYM_DRIFT_LIMIT = 1e-10


@dataclass(frozen=True)
class TeamWeights:
    """Social re-weightings of the per-capita team cost.

    coupling  = Gamma'Q + Q Gamma - Gamma'Q Gamma   (population average)
    leader    = Q Gamma1 - Gamma'Q Gamma1           (leader state)
    target(k) = Q eta_k - Gamma'Q eta_k             (tracking offset, per node)
    """

    coupling: np.ndarray
    leader: np.ndarray
    target: np.ndarray  # (steps + 1, n)


def team_weights(s: Scenario) -> TeamWeights:
    Q = s.follower_cost.Q
    G = s.follower_cost.Gamma
    G1 = s.follower_cost.Gamma1
    eta = time_sampled(s.follower_cost.eta, s.grid)
    coupling = G.T @ Q + Q @ G - G.T @ Q @ G
    leader = Q @ G1 - G.T @ (Q @ G1)
    target = eta @ Q.T - (eta @ Q.T) @ G
    return TeamWeights(coupling, leader, target)


def _influence(s: Scenario) -> np.ndarray:
    """I - Gamma/N: one agent's marginal effect on its own tracking error."""
    return np.eye(s.dims.n) - s.follower_cost.Gamma / s.dims.N


def state_weight(s: Scenario) -> np.ndarray:
    """Source S of the own-state Riccati equation."""
    Q = s.follower_cost.Q
    if s.mode is Mode.GAME:
        J = _influence(s)
        return J.T @ Q @ J
    return Q - team_weights(s).coupling / s.dims.N


def mean_weight(s: Scenario) -> np.ndarray:
    """Source S1 of the mean-coupling equation."""
    Q = s.follower_cost.Q
    frac = (s.dims.N - 1) / s.dims.N
    if s.mode is Mode.GAME:
        J = _influence(s)
        return J.T @ Q @ (frac * s.follower_cost.Gamma)
    return frac * team_weights(s).coupling


def aggregate_weight(s: Scenario) -> np.ndarray:
    """Source S2 of the aggregate Riccati equation (solved independently of P, K)."""
    Q = s.follower_cost.Q
    if s.mode is Mode.GAME:
        J = _influence(s)
        return J.T @ Q @ (np.eye(s.dims.n) - s.follower_cost.Gamma)
    return Q - team_weights(s).coupling


def offset_source(s: Scenario, mean_leader: np.ndarray) -> np.ndarray:
    """Drive g of the offset equation, per node; mean_leader is (steps + 1, n)."""
    Q = s.follower_cost.Q
    G1 = s.follower_cost.Gamma1
    eta = time_sampled(s.follower_cost.eta, s.grid)
    if s.mode is Mode.GAME:
        J = _influence(s)
        return (mean_leader @ G1.T + eta) @ (J.T @ Q).T
    tw = team_weights(s)
    return mean_leader @ tw.leader.T + tw.target


def _gain_matrix(s: Scenario) -> np.ndarray:
    """G = B R^-1 B' of the follower dynamics."""
    B = s.follower_dyn.B
    return B @ np.linalg.solve(s.follower_cost.R, B.T)


class _Symmetrizer:
    """Post-step hook keeping Riccati iterates symmetric; records the drift.

    Call i of a backward integration produces grid node steps - 1 - i, so
    `worst_call` locates where the largest drift occurred.
    """

    def __init__(self):
        self.max_drift = 0.0
        self.calls = 0
        self.worst_call = 0

    def __call__(self, M: np.ndarray) -> np.ndarray:
        drift = 0.5 * float(np.max(np.abs(M - M.T)))
        if drift > self.max_drift:
            self.max_drift = drift
            self.worst_call = self.calls
        self.calls += 1
        return 0.5 * (M + M.T)


def _check_drift(sym: _Symmetrizer, s: Scenario) -> None:
    """Reject the solve when symmetrization drift says accuracy collapsed.

    Drift this large means the Riccati solution is growing too fast for the
    grid — the same pathology as a norm escape, caught earlier — so it is
    reported through the same failure channel, located at the worst node.
    """
    if sym.max_drift > _SYM_DRIFT_LIMIT:
        t_bad = float(s.grid.nodes[s.grid.steps - 1 - sym.worst_call])
        raise BlowUpError(
            t_bad,
            sym.max_drift,
            f"Riccati symmetrization drift {sym.max_drift:.3e} at t={t_bad:.6g} "
            f"exceeds limit {_SYM_DRIFT_LIMIT:g}: step size too coarse for the "
            f"solution's growth",
        )


def _solve_riccati(s: Scenario, source: np.ndarray) -> tuple[GridFunction, float]:
    A = s.follower_dyn.A
    G = _gain_matrix(s)

    def rhs(t, P):
        return -(A.T @ P + P @ A - P @ G @ P + source)

    sym = _Symmetrizer()
    out = integrate_backward(rhs, np.zeros_like(A), s.grid, post_step=sym)
    _check_drift(sym, s)
    return out, sym.max_drift


def solve_P(s: Scenario) -> GridFunction:
    """Own-state Riccati gain, zero terminal value."""
    require_valid(s)
    return _solve_riccati(s, state_weight(s))[0]


def solve_Pi(s: Scenario) -> GridFunction:
    """Aggregate gain; same Riccati family with source S2, solved on its own."""
    require_valid(s)
    return _solve_riccati(s, aggregate_weight(s))[0]


def solve_K(s: Scenario, P: GridFunction) -> GridFunction:
    """Mean-coupling gain; linear matrix ODE fed by the own-state gain."""
    A = s.follower_dyn.A
    G = _gain_matrix(s)
    S1 = mean_weight(s)

    def rhs(t, K):
        Pt = P.eval(t)
        return -(A.T @ K + K @ A - Pt @ G @ K - K @ G @ (Pt + K) - S1)

    return integrate_backward(rhs, np.zeros_like(A), s.grid)


def solve_phi(s: Scenario, Pi: GridFunction, mean_leader) -> GridFunction:
    """Offset vector given the aggregate gain and the leader's mean path.

    mean_leader: GridFunction or (steps + 1, n) array, E[x0] on the grid.
    Exposed for follower-stage-only workflows; in the full pipeline the same
    quantity is reconstructed from the leader layer, and the two must agree.
    """
    lead = mean_leader.values if isinstance(mean_leader, GridFunction) else np.asarray(mean_leader)
    g = GridFunction(s.grid, offset_source(s, lead))
    f = GridFunction(s.grid, time_sampled(s.follower_dyn.f, s.grid))
    A = s.follower_dyn.A
    G = _gain_matrix(s)

    def rhs(t, phi):
        Pit = Pi.eval(t)
        return -((A.T - Pit @ G) @ phi + Pit @ f.eval(t) - g.eval(t))

    return integrate_backward(rhs, np.zeros(s.dims.n), s.grid)


@dataclass(frozen=True)
class FollowerGains:
    """Follower-stage gain tables on the scenario grid.

    P, K, Pi are (steps+1, n, n); phi is (steps+1, n) or None when no leader
    mean path was supplied; noise_loading[k] = P[k] @ D is the reconstructed
    own-noise loading of the costate; control_map = R^-1 B'.
    """

    mode: Mode
    P: GridFunction
    K: GridFunction
    Pi: GridFunction
    phi: GridFunction | None
    noise_loading: GridFunction
    control_map: np.ndarray
    sym_drift: float

    @property
    def grid(self):
        return self.P.grid


def _solve_coupled(s: Scenario, mean_leader=None):
    """Backward-integrate (P, K[, phi]) as one system.

    Solving the pair jointly lets every Runge-Kutta stage see the exact
    current P instead of an interpolated table, so the P + K = Pi identity
    holds to rounding rather than to interpolation accuracy.  The offset,
    when requested, rides along and sees Pi = P + K at stage values.
    """
    n = s.dims.n
    n2 = n * n
    A = s.follower_dyn.A
    G = _gain_matrix(s)
    S = state_weight(s)
    S1 = mean_weight(s)
    with_phi = mean_leader is not None
    if with_phi:
        lead = mean_leader.values if isinstance(mean_leader, GridFunction) else np.asarray(mean_leader)
        g = GridFunction(s.grid, offset_source(s, lead))
        f = GridFunction(s.grid, time_sampled(s.follower_dyn.f, s.grid))

    def rhs(t, y):
        P = y[:n2].reshape(n, n)
        K = y[n2:2 * n2].reshape(n, n)
        dP = -(A.T @ P + P @ A - P @ G @ P + S)
        dK = -(A.T @ K + K @ A - P @ G @ K - K @ G @ (P + K) - S1)
        parts = [dP.ravel(), dK.ravel()]
        if with_phi:
            phi = y[2 * n2:]
            Pi = P + K
            dphi = -((A.T - Pi @ G) @ phi + Pi @ f.eval(t) - g.eval(t))
            parts.append(dphi)
        return np.concatenate(parts)

    sym = _Symmetrizer()

    def post(y):
        out = y.copy()
        out[:n2] = sym(y[:n2].reshape(n, n)).ravel()
        return out

    size = 2 * n2 + (n if with_phi else 0)
    sol = integrate_backward(rhs, np.zeros(size), s.grid, post_step=post)
    _check_drift(sym, s)
    vals = sol.values
    P = GridFunction(s.grid, vals[:, :n2].reshape(-1, n, n))
    K = GridFunction(s.grid, vals[:, n2:2 * n2].reshape(-1, n, n))
    phi = GridFunction(s.grid, vals[:, 2 * n2:]) if with_phi else None
    return P, K, phi, sym.max_drift


def solve_follower_gains(s: Scenario, mean_leader=None) -> FollowerGains:
    """Solve P, K, Pi (and phi when the leader mean path is supplied)."""
    require_valid(s)
    P, K, phi, drift_p = _solve_coupled(s, mean_leader)
    Pi, drift_pi = _solve_riccati(s, aggregate_weight(s))
    D = s.follower_dyn.D
    noise_loading = GridFunction(s.grid, P.values @ D)
    control_map = np.linalg.solve(s.follower_cost.R, s.follower_dyn.B.T)
    return FollowerGains(
        mode=s.mode,
        P=P,
        K=K,
        Pi=Pi,
        phi=phi,
        noise_loading=noise_loading,
        control_map=control_map,
        sym_drift=max(drift_p, drift_pi),
    )


def follower_feedback(gains: FollowerGains, k: int, x, mean_x, phi_k) -> np.ndarray:
    """Control of one follower at node k: -R^-1 B'(P x + K E[x] + phi)."""
    costate = gains.P.values[k] @ x + gains.K.values[k] @ mean_x + phi_k
    return -(gains.control_map @ costate)
