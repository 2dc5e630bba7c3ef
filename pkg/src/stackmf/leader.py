"""Leader-stage solvers on the dimension-expanded forward/backward system.

After the follower stage is absorbed, the leader faces a linear system in a
stacked state X = (x0, mean follower state, mean sensitivity) and costate
Y = (leader costate mean, population costate mean, follower offset), each of
size 3n:

    dX = [A(t) X + B Y + f_state] dt + noise dW0
    dY = [A1 X + B1(t) Y + A2 E[X] + B2(t) E[Y] + f_costate] dt + Z dW0

The affine ansatz Y = P X + K E[X] + V closes the system into one
nonsymmetric matrix Riccati equation for P, a coupled linear equation for K,
an independent equation for the sum M (which must equal P + K), and an
offset equation for V:

    P' + P A + P B P - A1 - B1 P                            = 0,  P(T) = 0
    K' + P B K + K A + K B (P + K) - B1 K - A2 - B2 (P + K) = 0,  K(T) = 0
    M' + M A + M B M - B1 M - B2 M - A1 - A2                = 0,  M(T) = 0
    V' + M B V + M f_state - B1 V - B2 V - f_costate        = 0,  V(T) = 0

    (Matching the Ito expansion of d(P X + K E[X] + V) against the costate
    drift fixes every sign; each equation is also pinned numerically by an
    independent discrete-adjoint oracle in the tests.)

No symmetrization is applied: these solutions are not symmetric.  The
leader's control reads the first block of the reconstructed costate:

    u0 = -R0^-1 B0' e1 (P X + K E[X] + V).

For constant coefficients, P also has a flow representation
P(t) = V(t) U(t)^-1 with (U, V) propagated by the exponential of the stacked
Hamiltonian-like matrix [[A, B], [A1, B1]]; `flow_oracle_P` implements it as
an independent cross-check (a variant with B2 in the lower-right slot is kept
behind a flag for comparison; it does not reproduce the P equation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .follower import FollowerGains, team_weights
from .integrators import GridFunction, expm, integrate_backward
from .model import Mode, Scenario, require_valid, time_sampled

__all__ = [
    "ExtendedSystem",
    "LeaderGains",
    "SingularFlowError",
    "assemble_extended",
    "solve_leader_P",
    "solve_leader_K",
    "solve_leader_M",
    "solve_leader_V",
    "flow_oracle_P",
    "solve_leader_gains",
    "leader_feedback",
]


class SingularFlowError(RuntimeError):
    """The flow factor U(t) is numerically singular: no Riccati solution there."""

    def __init__(self, time: float):
        super().__init__(f"flow factor singular at t={time:.6g}")
        self.time = float(time)


@dataclass(frozen=True)
class ExtendedSystem:
    """Block coefficients of the leader-stage system; each block is n x n.

    A, B1, B2, f_state, f_costate vary in time through the follower gains and
    the offsets; B, A1, A2 and the noise loading are constant.
    """

    n: int
    grid: object
    A: GridFunction           # (3n, 3n) state drift
    B: np.ndarray             # (3n, 3n) costate feedback into the state drift
    A1: np.ndarray            # (3n, 3n) state source of the costate drift
    B1: GridFunction          # (3n, 3n) costate drift
    A2: np.ndarray            # (3n, 3n) mean-state source of the costate drift
    B2: GridFunction          # (3n, 3n) mean-costate source of the costate drift
    f_state: GridFunction     # (3n,)
    f_costate: GridFunction   # (3n,)
    noise: np.ndarray         # (3n,)
    e1: np.ndarray            # (n, 3n) selector of block 1
    e3: np.ndarray            # (n, 3n) selector of block 3


def _block(n: int, entries: dict[tuple[int, int], np.ndarray]) -> np.ndarray:
    out = np.zeros((3 * n, 3 * n))
    for (i, j), M in entries.items():
        out[i * n:(i + 1) * n, j * n:(j + 1) * n] = M
    return out


def _assert_structure(name: str, M: np.ndarray, n: int, nonzero: set[tuple[int, int]]) -> None:
    for i in range(3):
        for j in range(3):
            if (i, j) not in nonzero:
                block = M[i * n:(i + 1) * n, j * n:(j + 1) * n]
                if np.any(block != 0.0):
                    raise AssertionError(f"{name}: block ({i},{j}) expected structurally zero")


def assemble_extended(s: Scenario, fg: FollowerGains) -> ExtendedSystem:
    """Build the block coefficients from the scenario and the follower gains."""
    require_valid(s)
    if fg.grid != s.grid:
        raise ValueError("follower gains were solved on a different grid")
    n = s.dims.n
    K = s.grid.steps
    A0, B0 = s.leader_dyn.A, s.leader_dyn.B
    A, B = s.follower_dyn.A, s.follower_dyn.B
    Q0, R0, Gamma0 = s.leader_cost.Q, s.leader_cost.R, s.leader_cost.Gamma
    Q, Gamma, Gamma1 = s.follower_cost.Q, s.follower_cost.Gamma, s.follower_cost.Gamma1

    G = B @ np.linalg.solve(s.follower_cost.R, B.T)
    G0 = B0 @ np.linalg.solve(R0, B0.T)

    P = fg.P.values          # (K+1, n, n)
    Pi = fg.Pi.values

    f0 = time_sampled(s.leader_dyn.f, s.grid)
    f = time_sampled(s.follower_dyn.f, s.grid)
    eta0 = time_sampled(s.leader_cost.eta, s.grid)
    eta = time_sampled(s.follower_cost.eta, s.grid)

    A_blocks = np.zeros((K + 1, 3 * n, 3 * n))
    B1_blocks = np.zeros((K + 1, 3 * n, 3 * n))
    B2_blocks = np.zeros((K + 1, 3 * n, 3 * n))
    closed = A - Pi @ G                      # (K+1, n, n) follower closed-loop drift
    A_blocks[:, :n, :n] = A0
    A_blocks[:, n:2 * n, n:2 * n] = closed
    A_blocks[:, 2 * n:, 2 * n:] = closed
    B1_blocks[:, :n, :n] = -A0.T
    B1_blocks[:, n:2 * n, n:2 * n] = -A.T + P @ G
    B1_blocks[:, 2 * n:, 2 * n:] = -A.T + Pi @ G
    B2_blocks[:, n:2 * n, n:2 * n] = (Pi - P) @ G

    B_blk = _block(n, {(0, 0): -G0, (1, 2): -G, (2, 1): G})
    A1_blk = _block(
        n,
        {
            (0, 0): -Q0,
            (0, 1): Q0 @ Gamma0,
            (1, 0): Gamma0.T @ Q0,
            (1, 1): -(Gamma0.T @ Q0 @ Gamma0),
        },
    )

    if s.mode is Mode.GAME:
        J = np.eye(n) - Gamma / s.dims.N
        A2_blk = _block(n, {(0, 2): -(Gamma1.T @ Q @ J), (2, 0): J.T @ Q @ Gamma1})
        offset_weight = (J.T @ Q)            # applied to eta
    else:
        tw = team_weights(s)
        A2_blk = _block(n, {(0, 2): -tw.leader.T, (2, 0): tw.leader})
        offset_weight = None

    f_state = np.zeros((K + 1, 3 * n))
    f_state[:, :n] = f0
    f_state[:, n:2 * n] = f

    f_costate = np.zeros((K + 1, 3 * n))
    f_costate[:, :n] = eta0 @ Q0.T
    f_costate[:, n:2 * n] = -(eta0 @ Q0.T) @ Gamma0
    pi_f = np.einsum("kij,kj->ki", Pi, f)
    if s.mode is Mode.GAME:
        f_costate[:, 2 * n:] = eta @ offset_weight.T - pi_f
    else:
        f_costate[:, 2 * n:] = team_weights(s).target - pi_f

    noise = np.zeros(3 * n)
    noise[:n] = s.leader_dyn.D

    e1 = np.zeros((n, 3 * n))
    e1[:, :n] = np.eye(n)
    e3 = np.zeros((n, 3 * n))
    e3[:, 2 * n:] = np.eye(n)

    # Structural sparsity guards: the zero blocks must be exactly zero.
    _assert_structure("B", B_blk, n, {(0, 0), (1, 2), (2, 1)})
    _assert_structure("A1", A1_blk, n, {(0, 0), (0, 1), (1, 0), (1, 1)})
    _assert_structure("A2", A2_blk, n, {(0, 2), (2, 0)})
    for k in (0, K):
        _assert_structure("A", A_blocks[k], n, {(0, 0), (1, 1), (2, 2)})
        _assert_structure("B1", B1_blocks[k], n, {(0, 0), (1, 1), (2, 2)})
        _assert_structure("B2", B2_blocks[k], n, {(1, 1)})
    if np.any(noise[n:] != 0.0):
        raise AssertionError("noise loading: blocks 2 and 3 must be zero")

    grid = s.grid
    return ExtendedSystem(
        n=n,
        grid=grid,
        A=GridFunction(grid, A_blocks),
        B=B_blk,
        A1=A1_blk,
        B1=GridFunction(grid, B1_blocks),
        A2=A2_blk,
        B2=GridFunction(grid, B2_blocks),
        f_state=GridFunction(grid, f_state),
        f_costate=GridFunction(grid, f_costate),
        noise=noise,
        e1=e1,
        e3=e3,
    )


def solve_leader_P(es: ExtendedSystem) -> GridFunction:
    """Nonsymmetric Riccati equation for the per-path costate gain."""
    zero = np.zeros((3 * es.n, 3 * es.n))

    def rhs(t, P):
        At = es.A.eval(t)
        B1t = es.B1.eval(t)
        return -(P @ At + P @ es.B @ P - es.A1 - B1t @ P)

    return integrate_backward(rhs, zero, es.grid)


def solve_leader_M(es: ExtendedSystem) -> GridFunction:
    """Equation for the mean costate gain M; independent of P and K."""
    zero = np.zeros((3 * es.n, 3 * es.n))

    def rhs(t, M):
        At = es.A.eval(t)
        B1t = es.B1.eval(t)
        B2t = es.B2.eval(t)
        return -(M @ At + M @ es.B @ M - B1t @ M - B2t @ M - es.A1 - es.A2)

    return integrate_backward(rhs, zero, es.grid)


def solve_leader_K(es: ExtendedSystem, P: GridFunction) -> GridFunction:
    """Mean-coupling gain K, fed by P; its source is the one consistent with
    M = P + K (the same constant A2 in both modes)."""
    zero = np.zeros((3 * es.n, 3 * es.n))

    def rhs(t, K):
        At = es.A.eval(t)
        B1t = es.B1.eval(t)
        B2t = es.B2.eval(t)
        Pt = P.eval(t)
        return -(Pt @ es.B @ K + K @ At + K @ es.B @ (Pt + K) - B1t @ K - es.A2 - B2t @ (Pt + K))

    return integrate_backward(rhs, zero, es.grid)


def solve_leader_V(es: ExtendedSystem, M: GridFunction) -> GridFunction:
    """Offset vector of the costate reconstruction."""

    def rhs(t, V):
        B1t = es.B1.eval(t)
        B2t = es.B2.eval(t)
        Mt = M.eval(t)
        return -(Mt @ es.B @ V + Mt @ es.f_state.eval(t) - B1t @ V - B2t @ V - es.f_costate.eval(t))

    return integrate_backward(rhs, np.zeros(3 * es.n), es.grid)


_CONST_TOL = 1e-12


def _constant_block(gf: GridFunction, name: str) -> np.ndarray:
    ref = gf.values[0]
    dev = float(np.max(np.abs(gf.values - ref)))
    if dev > _CONST_TOL * (1.0 + float(np.max(np.abs(ref)))):
        raise ValueError(f"flow oracle needs constant coefficients; {name} varies by {dev:.3e}")
    return ref


def flow_oracle_P(es: ExtendedSystem, lower_right: str = "B1") -> GridFunction:
    """Flow-map route to P: the stacked linear flow, inverted node-wise.

    Propagates (U, V)(t) = Phi(t, T) (I, 0) for the linear system with
    generator H(t) = [[A, B], [A1, L]], L = B1 (default; differentiating
    V U^-1 reproduces the P equation) or L = B2 (variant kept only for
    comparison), and returns P(t) = V(t) U(t)^-1.

    Constant blocks use one exact matrix exponential per node.  Blocks that
    vary in time (through the follower gains) are frozen at each step
    midpoint and the per-step exponentials chained -- second-order accurate,
    good enough for a cross-check of the production RK4 route.

    A conjugate point (U singular somewhere, so no P exists there) raises
    SingularFlowError.  Detection scans from the terminal side and fires on
    a collapsed condition number at a node or on a determinant sign change
    between nodes; a regular instance keeps det U away from zero on the
    whole horizon, so neither trigger can fire spuriously.
    """
    if lower_right not in ("B1", "B2"):
        raise ValueError("lower_right must be 'B1' or 'B2'")
    d = 3 * es.n
    lower_gf = es.B1 if lower_right == "B1" else es.B2

    def generator(A: np.ndarray, lower: np.ndarray) -> np.ndarray:
        H = np.zeros((2 * d, 2 * d))
        H[:d, :d] = A
        H[:d, d:] = es.B
        H[d:, :d] = es.A1
        H[d:, d:] = lower
        return H

    K = es.grid.steps
    T = es.grid.horizon
    nodes = es.grid.nodes
    W = np.zeros((K + 1, 2 * d, d))
    try:
        H = generator(_constant_block(es.A, "A"), _constant_block(lower_gf, lower_right))
    except ValueError:
        H = None
    if H is not None:
        for k in range(K + 1):
            W[k] = expm(H * (nodes[k] - T))[:, :d]
    else:
        dt = es.grid.dt
        W[K, :d] = np.eye(d)
        for k in range(K - 1, -1, -1):
            tm = 0.5 * (nodes[k] + nodes[k + 1])
            W[k] = expm(-dt * generator(es.A.eval(tm), lower_gf.eval(tm))) @ W[k + 1]

    out = np.empty((K + 1, d, d))
    prev_sign = 0.0
    for k in range(K, -1, -1):
        U = W[k, :d]
        V = W[k, d:]
        sign = np.linalg.slogdet(U)[0]
        sv = np.linalg.svd(U, compute_uv=False)
        # U(T) = I, so a regular flow keeps sigma_min well above roundoff on
        # both the identity scale and the current flow scale.
        if sign == 0.0 or sv[-1] <= 1e-12 * max(1.0, sv[0]) or (prev_sign != 0.0 and sign != prev_sign):
            raise SingularFlowError(nodes[k])
        prev_sign = sign
        out[k] = np.linalg.solve(U.T, V.T).T
    return GridFunction(es.grid, out)


@dataclass(frozen=True)
class LeaderGains:
    """Leader-stage gain tables: Y = P X + K E[X] + V, M = P + K.

    noise_loading[k] = P[k] @ noise is the costate diffusion loading;
    control_map = R0^-1 B0' e1 turns a reconstructed costate into -u0.
    """

    P: GridFunction
    K: GridFunction
    M: GridFunction
    V: GridFunction
    noise_loading: GridFunction
    control_map: np.ndarray

    @property
    def grid(self):
        return self.P.grid


def _solve_leader_coupled(es: ExtendedSystem):
    """Backward-integrate (P, K, V) as one system.

    Joint integration lets each Runge-Kutta stage combine the exact current
    P and K (and M = P + K inside the offset equation) instead of values
    interpolated from a previously solved table, so M - (P + K) is rounding-
    level when M is re-solved on its own.
    """
    d = 3 * es.n
    d2 = d * d

    def rhs(t, y):
        P = y[:d2].reshape(d, d)
        K = y[d2:2 * d2].reshape(d, d)
        V = y[2 * d2:]
        At = es.A.eval(t)
        B1t = es.B1.eval(t)
        B2t = es.B2.eval(t)
        M = P + K
        dP = -(P @ At + P @ es.B @ P - es.A1 - B1t @ P)
        dK = -(P @ es.B @ K + K @ At + K @ es.B @ M - B1t @ K - es.A2 - B2t @ M)
        dV = -(M @ es.B @ V + M @ es.f_state.eval(t) - B1t @ V - B2t @ V - es.f_costate.eval(t))
        return np.concatenate([dP.ravel(), dK.ravel(), dV])

    sol = integrate_backward(rhs, np.zeros(2 * d2 + d), es.grid)
    vals = sol.values
    P = GridFunction(es.grid, vals[:, :d2].reshape(-1, d, d))
    K = GridFunction(es.grid, vals[:, d2:2 * d2].reshape(-1, d, d))
    V = GridFunction(es.grid, vals[:, 2 * d2:])
    return P, K, V


def solve_leader_gains(s: Scenario, fg: FollowerGains) -> LeaderGains:
    """Solve the leader-stage equations on the scenario grid."""
    es = assemble_extended(s, fg)
    P, K, V = _solve_leader_coupled(es)
    M = GridFunction(es.grid, P.values + K.values)
    noise_loading = GridFunction(s.grid, P.values @ es.noise)
    control_map = np.linalg.solve(s.leader_cost.R, s.leader_dyn.B.T) @ es.e1
    return LeaderGains(
        P=P, K=K, M=M, V=V, noise_loading=noise_loading, control_map=control_map
    )


def leader_feedback(lg: LeaderGains, k: int, X, mean_X) -> np.ndarray:
    """Leader control at node k: -R0^-1 B0' e1 (P X + K E[X] + V)."""
    costate = lg.P.values[k] @ X + lg.K.values[k] @ mean_X + lg.V.values[k]
    return -(lg.control_map @ costate)
