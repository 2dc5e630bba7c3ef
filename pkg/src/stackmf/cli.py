"""Command-line front end: solve, simulate, verify, and sweep workflows.

Every command ingests a scenario config, writes CSV artifacts plus a
`manifest.json` into the output directory, and exits with a stable code:

    0   success
    1   I/O failure (unreadable config, missing gains files, unwritable out)
    2   validation hard-failure or malformed config
    3   gain equation blew up (failure time reported)
    4   gains directory is not grid-compatible with the config
    5   verification found a violated invariant
    64  usage error (bad flags, empty value lists, zero paths)

Manifests record the config hash, grid, seed-level inputs, package versions,
and a content hash per output file — and deliberately nothing that is allowed
to vary without changing the outputs (worker counts, timestamps, host names),
so equal manifests certify byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .equilibrium import run_verification
from .follower import FollowerGains, solve_follower_gains
from .integrators import BlowUpError, GridFunction, read_grid_csv
from .leader import LeaderGains, solve_leader_gains, assemble_extended
from .model import (
    Mode,
    Scenario,
    ScenarioError,
    TimeGrid,
    load_scenario_file,
    require_valid,
    validate,
)
from .simulation import (
    GridMismatchError,
    estimate_costs,
    lln_diagnostic,
    simulate,
    solve_mean_state,
)

__all__ = ["main"]

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_BLOWUP = 3
EXIT_GRID = 4
EXIT_VERIFY = 5
EXIT_USAGE = 64

_FOLLOWER_TABLES = ("P", "K", "Pi", "phi")
_LEADER_TABLES = ("leaderP", "leaderK", "leaderM", "leaderV")


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code pinned to 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# shared plumbing


def _fail(code: int, message: str) -> int:
    print(message, file=sys.stderr)
    return code


def _load_config(path_str: str) -> tuple[Scenario, bytes]:
    raw = Path(path_str).read_bytes()
    return load_scenario_file(path_str), raw


def _sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _sha256_file(path: Path) -> str:
    return _sha256_bytes(path.read_bytes())


def _write_manifest(
    out: Path, command: str, s: Scenario, config_bytes: bytes, inputs: dict, outputs: list[Path]
) -> Path:
    manifest = {
        "command": command,
        "config_sha256": _sha256_bytes(config_bytes),
        "mode": s.mode.value,
        "grid": {"horizon": s.grid.horizon, "steps": s.grid.steps},
        "dims": {"n": s.dims.n, "m": s.dims.m, "N": s.dims.N},
        "inputs": inputs,
        "versions": {"numpy": np.__version__, "stackmf": __version__},
        "outputs": {p.name: _sha256_file(p) for p in outputs},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(x) for x in row) + "\n")


def _cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# gains round trip


def _equilibrium_offset(s: Scenario, fg: FollowerGains, lg: LeaderGains) -> GridFunction:
    """Deterministic follower offset along the closed-loop mean path."""
    es = assemble_extended(s, fg)
    mean = solve_mean_state(s, es, lg)
    costate_mean = np.einsum("kij,kj->ki", lg.K.values, mean.values) + lg.V.values
    return GridFunction(s.grid, np.einsum("ij,kj->ki", es.e3, costate_mean))


def _write_gains(out: Path, s: Scenario, fg: FollowerGains, lg: LeaderGains) -> list[Path]:
    offset = _equilibrium_offset(s, fg, lg)
    tables = {
        "P": fg.P,
        "K": fg.K,
        "Pi": fg.Pi,
        "phi": offset,
        "leaderP": lg.P,
        "leaderK": lg.K,
        "leaderM": lg.M,
        "leaderV": lg.V,
    }
    written = []
    for name, gf in tables.items():
        path = out / f"{name}.csv"
        gf.to_csv(path, prefix=name)
        written.append(path)
    return written


def _read_table(s: Scenario, gains_dir: Path, name: str, item_shape: tuple) -> GridFunction:
    path = gains_dir / f"{name}.csv"
    if not path.is_file():
        raise FileNotFoundError(f"missing gains table: {path}")
    t, flat = read_grid_csv(path)
    if t.shape[0] != s.grid.steps + 1 or not np.array_equal(t, s.grid.nodes):
        raise GridMismatchError(
            f"{path}: time grid does not match config "
            f"({t.shape[0] - 1} steps vs {s.grid.steps})"
        )
    want = int(np.prod(item_shape))
    if flat.shape[1] != want:
        raise GridMismatchError(
            f"{path}: expected {want} value columns for shape {item_shape}, got {flat.shape[1]}"
        )
    return GridFunction(s.grid, flat.reshape((s.grid.steps + 1,) + item_shape))


def _load_gains(s: Scenario, gains_dir: Path) -> tuple[FollowerGains, LeaderGains]:
    """Rebuild the gain objects from a solve output directory."""
    n = s.dims.n
    d = 3 * n
    P = _read_table(s, gains_dir, "P", (n, n))
    K = _read_table(s, gains_dir, "K", (n, n))
    Pi = _read_table(s, gains_dir, "Pi", (n, n))
    phi = _read_table(s, gains_dir, "phi", (n,))
    lP = _read_table(s, gains_dir, "leaderP", (d, d))
    lK = _read_table(s, gains_dir, "leaderK", (d, d))
    lM = _read_table(s, gains_dir, "leaderM", (d, d))
    lV = _read_table(s, gains_dir, "leaderV", (d,))

    sym_drift = float(np.max(np.abs(P.values - np.swapaxes(P.values, 1, 2))))
    fg = FollowerGains(
        mode=s.mode,
        P=P,
        K=K,
        Pi=Pi,
        phi=phi,
        noise_loading=GridFunction(s.grid, np.einsum("kij,j->ki", P.values, s.follower_dyn.D)),
        control_map=np.linalg.solve(s.follower_cost.R, s.follower_dyn.B.T),
        sym_drift=sym_drift,
    )

    noise = np.zeros(d)
    noise[:n] = s.leader_dyn.D
    e1 = np.zeros((n, d))
    e1[:, :n] = np.eye(n)
    lg = LeaderGains(
        P=lP,
        K=lK,
        M=lM,
        V=lV,
        noise_loading=GridFunction(s.grid, lP.values @ noise),
        control_map=np.linalg.solve(s.leader_cost.R, s.leader_dyn.B.T) @ e1,
    )
    return fg, lg


# --------------------------------------------------------------------------
# solve


def _cmd_solve(args) -> int:
    s, config_bytes = _load_config(args.config)
    out = _out_dir(args)
    outputs: list[Path] = []

    report = validate(s)
    validation_path = out / "validation.txt"
    validation_path.write_text("\n".join(report.lines()) + "\n", encoding="utf-8")
    outputs.append(validation_path)
    inputs = {"config": str(args.config)}

    if not report.hard_ok:
        failed = ", ".join(c.name for c in report.failures() if c.severity == "hard")
        _write_manifest(out, "solve", s, config_bytes, inputs, outputs)
        return _fail(EXIT_VALIDATION, f"validation hard-failure: {failed} (see {validation_path})")

    report_path = out / "solve_report.txt"
    stage = "follower"
    try:
        fg = solve_follower_gains(s)
        stage = "leader"
        lg = solve_leader_gains(s, fg)
    except BlowUpError as e:
        report_path.write_text(
            f"status = blowup\nstage = {stage}\nfailure_time = {e.time!r}\nmessage = {e}\n",
            encoding="utf-8",
        )
        outputs.append(report_path)
        _write_manifest(out, "solve", s, config_bytes, inputs, outputs)
        return _fail(EXIT_BLOWUP, f"{stage} gain equation blew up at t={e.time:.6g}")

    outputs.extend(_write_gains(out, s, fg, lg))
    lines = ["status = ok"]
    for name, gf in (("P", fg.P), ("K", fg.K), ("Pi", fg.Pi), ("leaderP", lg.P),
                     ("leaderK", lg.K), ("leaderM", lg.M), ("leaderV", lg.V)):
        lines.append(f"max_abs.{name} = {float(np.max(np.abs(gf.values)))!r}")
    lines.append(f"symmetry_drift = {fg.sym_drift!r}")
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(report_path)

    _write_manifest(out, "solve", s, config_bytes, inputs, outputs)
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate


def _cmd_simulate(args) -> int:
    if args.paths < 1:
        return _fail(EXIT_USAGE, "simulate: --paths must be a positive integer")
    s, config_bytes = _load_config(args.config)
    require_valid(s)
    gains_dir = Path(args.gains)
    fg, lg = _load_gains(s, gains_dir)
    out = _out_dir(args)

    store = min(args.store, args.paths)
    er = simulate(
        s, fg, lg, n_paths=args.paths, seed=args.seed, workers=args.workers, store_paths=store
    )

    n, m = s.dims.n, s.dims.m
    K = s.grid.steps
    nodes = s.grid.nodes
    ns = er.node_summary

    header = ["t"]
    for label in ("x0_mean", "x0_std", "xbar_mean", "xbar_std", "offset"):
        header += [f"{label}_{i}" for i in range(n)]
    for label in ("u0_mean", "u0_std"):
        header += [f"{label}_{j}" for j in range(m)]
    header.append("gap")
    columns = np.column_stack(
        [
            nodes,
            ns["x0_mean"], ns["x0_std"], ns["xbar_mean"], ns["xbar_std"], er.offset.values,
            ns["u0_mean"], ns["u0_std"],
            er.lln_gap.values,
        ]
    )
    summary_path = out / "summary.csv"
    _write_rows(summary_path, header, ([float(x) for x in row] for row in columns))

    costs_path = out / "costs.csv"
    _write_rows(costs_path, ["name", "mean", "se"], estimate_costs(er))

    traj_path = out / "trajectories.csv"
    traj_header = ["path", "t"]
    traj_header += [f"leader_{c}" for c in range(n)]
    for i in range(s.dims.N):
        traj_header += [f"f{i + 1}_{c}" for c in range(n)]

    def traj_rows():
        for p in er.paths:
            for k in range(K + 1):
                row = [p.index, float(nodes[k])]
                row += [float(x) for x in p.x0[k]]
                for i in range(s.dims.N):
                    row += [float(x) for x in p.followers[i, k]]
                yield row

    _write_rows(traj_path, traj_header, traj_rows())

    inputs = {
        "config": str(args.config),
        "paths": args.paths,
        "seed": args.seed,
        "store": store,
        "gains_sha256": {
            f"{name}.csv": _sha256_file(gains_dir / f"{name}.csv")
            for name in _FOLLOWER_TABLES + _LEADER_TABLES
        },
    }
    _write_manifest(
        out, "simulate", s, config_bytes, inputs, [summary_path, costs_path, traj_path]
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def _corrupt(fg: FollowerGains) -> FollowerGains:
    """Deliberately damage the mean-coupling gain (fault-injection fixture)."""
    bump = 0.01 * (1.0 + float(np.max(np.abs(fg.K.values))))
    return dataclasses.replace(fg, K=GridFunction(fg.grid, fg.K.values + bump))


def _cmd_verify(args) -> int:
    if args.paths < 1:
        return _fail(EXIT_USAGE, "verify: --paths must be a positive integer")
    if args.directions < 1:
        return _fail(EXIT_USAGE, "verify: --directions must be a positive integer")
    s, config_bytes = _load_config(args.config)
    out = _out_dir(args)

    fg = solve_follower_gains(s)
    lg = solve_leader_gains(s, fg)
    if args.inject_fault:
        fg = _corrupt(fg)

    rep = run_verification(
        s,
        fg,
        lg,
        n_paths=args.paths,
        seed=args.seed,
        directions=args.directions,
        workers=args.workers,
    )
    for line in rep.summary_lines():
        print(line)

    report_path = out / "verification.csv"
    rep.to_csv(report_path)
    inputs = {
        "config": str(args.config),
        "paths": args.paths,
        "seed": args.seed,
        "directions": args.directions,
        "inject_fault": bool(args.inject_fault),
    }
    _write_manifest(out, "verify", s, config_bytes, inputs, [report_path])

    if not rep.passed:
        failing = [c.name for c in rep.checks if not c.passed]
        failing += [
            f"deviation:{d.target}/{d.label}" for d in rep.deviations if not d.passed
        ]
        return _fail(EXIT_VERIFY, "verification failed: " + ", ".join(failing))
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep


def _parse_values(parser: _Parser, vary: str, raw: str) -> list:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        parser.error("sweep: --values must be a nonempty comma-separated list")
    try:
        if vary in ("N", "steps"):
            values = [int(x) for x in items]
        else:
            values = [float(x) for x in items]
    except ValueError:
        parser.error(f"sweep: could not parse --values {raw!r} as numbers")
    if len(set(values)) != len(values):
        parser.error("sweep: --values entries must be distinct")
    if vary == "N" and any(v < 1 for v in values):
        parser.error("sweep: follower counts must be positive")
    if vary == "steps":
        if any(v < 2 for v in values):
            parser.error("sweep: steps values must be at least 2")
        finest = max(values)
        bad = [v for v in values if finest % v != 0]
        if bad:
            parser.error(
                f"sweep: each steps value must divide the largest one ({finest}) "
                f"so all rungs share the same noise paths; offending: {bad}"
            )
    return values


def _sweep_N(s: Scenario, values, args, out: Path):
    rows, slope = lln_diagnostic(s, values, n_paths=args.paths, seed=args.seed,
                                 workers=args.workers)
    agg = [["N", str(v), "gap", float(g)] for v, g in rows]
    if len(rows) > 1:
        agg.append(["N", "", "slope_loglog", float(slope)])
    for v, g in rows:
        _write_rows(out / f"run_N{v}.csv", ["N", "gap"], [[v, float(g)]])
    return agg, [out / f"run_N{v}.csv" for v, _ in rows]


def _sweep_steps(s: Scenario, values, args, out: Path):
    finest = max(values)
    results = {}
    files = []
    for v in sorted(values):
        sv = dataclasses.replace(s, grid=TimeGrid(s.grid.horizon, v))
        fg = solve_follower_gains(sv)
        lg = solve_leader_gains(sv, fg)
        er = simulate(
            sv, fg, lg, n_paths=args.paths, seed=args.seed, workers=args.workers,
            store_paths=0, substeps=finest // v,
        )
        results[v] = (er.leader_cost.mean, er.social_cost.mean)
        path = out / f"run_steps{v}.csv"
        _write_rows(path, ["name", "mean", "se"], estimate_costs(er))
        files.append(path)

    agg = []
    errs = []
    refJ0, refJsoc = results[finest]
    for v in sorted(values):
        J0, Jsoc = results[v]
        agg.append(["steps", str(v), "J0", float(J0)])
        agg.append(["steps", str(v), "Jsoc", float(Jsoc)])
        if v != finest:
            err = abs(J0 - refJ0) + abs(Jsoc - refJsoc)
            agg.append(["steps", str(v), "cost_error", float(err)])
            errs.append((s.grid.horizon / v, err))
    if len(errs) > 1 and all(e > 0.0 for _, e in errs):
        rate = float(np.polyfit(np.log([d for d, _ in errs]), np.log([e for _, e in errs]), 1)[0])
        agg.append(["steps", "", "rate", rate])
    return agg, files


def _sweep_Gamma(s: Scenario, values, args, out: Path):
    base = s.follower_cost.Gamma
    agg = []
    files = []
    for v in values:
        fc = dataclasses.replace(s.follower_cost, Gamma=v * base)
        gains = {}
        for mode in (Mode.GAME, Mode.TEAM):
            sv = dataclasses.replace(s, follower_cost=fc, mode=mode)
            fg = solve_follower_gains(sv)
            lg = solve_leader_gains(sv, fg)
            gains[mode] = (fg.P, fg.K, fg.Pi, lg.P, lg.K, lg.M, lg.V)
        gap = max(
            float(np.max(np.abs(a.values - b.values)))
            for a, b in zip(gains[Mode.GAME], gains[Mode.TEAM])
        )
        agg.append(["Gamma", repr(float(v)), "mode_gap", gap])
        path = out / f"run_Gamma{v!r}.csv"
        _write_rows(path, ["Gamma_scale", "mode_gap"], [[float(v), gap]])
        files.append(path)
    return agg, files


def _cmd_sweep(args) -> int:
    if args.paths < 1:
        return _fail(EXIT_USAGE, "sweep: --paths must be a positive integer")
    s, config_bytes = _load_config(args.config)
    out = _out_dir(args)

    runner = {"N": _sweep_N, "steps": _sweep_steps, "Gamma": _sweep_Gamma}[args.vary]
    agg, files = runner(s, args.values, args, out)

    agg_path = out / "aggregate.csv"
    _write_rows(agg_path, ["param", "value", "metric", "result"], agg)
    inputs = {
        "config": str(args.config),
        "vary": args.vary,
        "values": [float(v) for v in args.values],
        "paths": args.paths,
        "seed": args.seed,
    }
    _write_manifest(out, "sweep", s, config_bytes, inputs, files + [agg_path])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_common(sub: _Parser) -> None:
    sub.add_argument("--config", required=True, help="scenario config file")
    sub.add_argument("--out", required=True, help="output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="stackmf", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_solve = subs.add_parser("solve", help="solve the gain equations and export tables")
    _add_common(p_solve)
    p_solve.set_defaults(func=_cmd_solve)

    p_sim = subs.add_parser("simulate", help="Monte Carlo ensemble from exported gains")
    _add_common(p_sim)
    p_sim.add_argument("--gains", required=True, help="directory holding solve outputs")
    p_sim.add_argument("--paths", type=int, default=256)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--workers", type=int, default=1)
    p_sim.add_argument("--store", type=int, default=2,
                       help="number of paths dumped to trajectories.csv")
    p_sim.set_defaults(func=_cmd_simulate)

    p_ver = subs.add_parser("verify", help="equilibrium invariant and deviation battery")
    _add_common(p_ver)
    p_ver.add_argument("--paths", type=int, default=256)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--directions", type=int, default=3)
    p_ver.add_argument("--workers", type=int, default=1)
    p_ver.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p_ver.set_defaults(func=_cmd_verify)

    p_sweep = subs.add_parser("sweep", help="parameter sweeps with an aggregate table")
    _add_common(p_sweep)
    p_sweep.add_argument("--vary", required=True, choices=("N", "Gamma", "steps"))
    p_sweep.add_argument("--values", required=True, help="comma-separated list")
    p_sweep.add_argument("--paths", type=int, default=256)
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--workers", type=int, default=1)
    p_sweep.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "values", None) is not None:
        args.values = _parse_values(parser, args.vary, args.values)
    try:
        return args.func(args)
    except GridMismatchError as e:
        return _fail(EXIT_GRID, f"grid mismatch: {e}")
    except ScenarioError as e:
        return _fail(EXIT_VALIDATION, f"invalid scenario: {e}")
    except BlowUpError as e:
        return _fail(EXIT_BLOWUP, f"gain equation blew up at t={e.time:.6g}")
    except OSError as e:
        return _fail(EXIT_IO, f"I/O error: {e}")


if __name__ == "__main__":
    sys.exit(main())
