"""Fixed-step integrators and grid-sampled functions shared by every solver.

All gain equations are terminal-value matrix ODEs integrated backward with
classical RK4; the mean-field layer runs forward on the same grid, so every
produced table lines up node for node.  Adaptive steppers are deliberately
not used: a shared fixed grid keeps cross-module identities exact to the
scheme's order instead of to interpolation error.

Also provides a scaling-and-squaring matrix exponential (degree-13 rational
core) backing the constant-coefficient flow oracle of the leader stage.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import TimeGrid

__all__ = [
    "BlowUpError",
    "GridFunction",
    "integrate_backward",
    "integrate_forward",
    "expm",
    "read_grid_csv",
]

# Escape threshold relative to the terminal/initial data; beyond this the
# equation is declared to have no solution on the horizon.
BLOWUP_FACTOR = 1e12


class BlowUpError(RuntimeError):
    """Integration failed numerically; `time` reports where, `norm` how badly.

    The default message describes an escape to infinity; callers detecting a
    different integration failure (e.g. accuracy collapse) pass their own.
    """

    def __init__(self, time: float, norm: float, message: str | None = None):
        super().__init__(message or f"integration blew up at t={time:.6g} (norm {norm:.3e})")
        self.time = float(time)
        self.norm = float(norm)


@dataclass(frozen=True)
class GridFunction:
    """A vector- or matrix-valued function sampled on every node of a TimeGrid.

    values[k] is the value at t_k = k * dt; the array is frozen after
    construction and must be finite everywhere (a NaN/Inf poisons the whole
    function and is rejected).
    """

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[0] != self.grid.steps + 1:
            raise ValueError(
                f"grid function needs {self.grid.steps + 1} node values, got {vals.shape[0]}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid function is poisoned: non-finite entries")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def item_shape(self) -> tuple:
        return self.values.shape[1:]

    def at(self, k: int) -> np.ndarray:
        return self.values[k]

    def eval(self, t: float) -> np.ndarray:
        """Linear interpolation between nodes; clamps outside [0, T]."""
        pos = t / self.grid.dt
        if pos <= 0.0:
            return self.values[0]
        if pos >= self.grid.steps:
            return self.values[self.grid.steps]
        i0 = int(pos)
        w = pos - i0
        if w == 0.0:
            return self.values[i0]
        return (1.0 - w) * self.values[i0] + w * self.values[i0 + 1]

    def to_csv(self, path, prefix: str = "v") -> None:
        """Write one row per node: t, then the entries in row-major order."""
        shape = self.item_shape
        if len(shape) == 1:
            header = [f"{prefix}_{i}" for i in range(shape[0])]
        elif len(shape) == 2:
            header = [f"{prefix}_{i}_{j}" for i in range(shape[0]) for j in range(shape[1])]
        else:
            header = [f"{prefix}_{i}" for i in range(int(np.prod(shape)) or 1)]
        flat = self.values.reshape(self.grid.steps + 1, -1)
        nodes = self.grid.nodes
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + header)
            for k in range(self.grid.steps + 1):
                writer.writerow([repr(float(nodes[k]))] + [repr(float(x)) for x in flat[k]])


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a GridFunction CSV back as (t, flat_values); exact for repr-formatted floats."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["t"]:
        raise ValueError(f"{path}: not a grid CSV (missing 't' header)")
    data = np.array([[float(x) for x in row] for row in rows[1:]], dtype=float)
    return data[:, 0], data[:, 1:]


def _frob(y: np.ndarray) -> float:
    return float(np.sqrt(np.sum(y * y)))


def _run_rk4(rhs, start_value, grid: TimeGrid, forward: bool, post_step):
    y = np.array(start_value, dtype=float)
    K = grid.steps
    out = np.empty((K + 1,) + y.shape)
    nodes = grid.nodes
    h = grid.dt if forward else -grid.dt
    threshold = BLOWUP_FACTOR * (1.0 + _frob(y))
    ks = range(K) if forward else range(K, 0, -1)
    out[0 if forward else K] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for k in ks:
            t = nodes[k]
            k1 = rhs(t, y)
            k2 = rhs(t + 0.5 * h, y + (0.5 * h) * k1)
            k3 = rhs(t + 0.5 * h, y + (0.5 * h) * k2)
            k4 = rhs(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if post_step is not None:
                y = post_step(y)
            target = k + 1 if forward else k - 1
            norm = _frob(y)
            if not np.isfinite(norm) or norm > threshold:
                raise BlowUpError(nodes[target], norm)
            out[target] = y
    return GridFunction(grid, out)


def integrate_backward(rhs, terminal, grid: TimeGrid, post_step=None) -> GridFunction:
    """Integrate dy/dt = rhs(t, y) from t = T down to 0 with classical RK4.

    `terminal` is stored exactly at node `steps`. `post_step`, when given,
    maps each freshly computed node value (e.g. re-symmetrization).  Raises
    BlowUpError when the solution escapes BLOWUP_FACTOR * (1 + |terminal|).
    """
    return _run_rk4(rhs, terminal, grid, forward=False, post_step=post_step)


def integrate_forward(rhs, initial, grid: TimeGrid, post_step=None) -> GridFunction:
    """Forward RK4 mirror of integrate_backward; `initial` stored at node 0."""
    return _run_rk4(rhs, initial, grid, forward=True, post_step=post_step)


# --------------------------------------------------------------------------
# matrix exponential: degree-13 diagonal rational approximant with scaling
# and squaring (squarings chosen from the 1-norm).

_B13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def expm(M: np.ndarray) -> np.ndarray:
    """Matrix exponential of a square matrix; rejects non-finite input."""
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expm needs a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("expm: non-finite entries in input")
    norm = float(np.linalg.norm(A, 1))
    squarings = 0
    if norm > _THETA13:
        squarings = int(np.ceil(np.log2(norm / _THETA13)))
        A = A / (2.0 ** squarings)

    n = A.shape[0]
    ident = np.eye(n)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A2 @ A4
    b = _B13
    U = A @ (
        A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
        + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * ident
    )
    V = (
        A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
        + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * ident
    )
    R = np.linalg.solve(V - U, V + U)
    for _ in range(squarings):
        R = R @ R
    return R
