"""Command line entry point: ``sbmre <subcommand> --config cfg.json``.

Exit codes: 0 when every check passes, 1 on a failed check or runtime error,
2 on a configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .config import SUBCOMMANDS, ConfigError, ExperimentConfig, apply_overrides, build_phi, validate_config
from .duality import (Atoms, GridMeasure, ParticleSource, SpdeSource, dual_laplace_samples,
                      forward_laplace_samples, verdict)
from .ensemble import covariance_estimate, default_workers, estimate, variance_estimate
from .env import audit_assumption_a
from .particles import SimulationError, record_rows, run, snapshot_rows
from .spde import SpdeError, solve_forward
from .spde import snapshot_rows as spde_rows
from .trace import BRB, BRE, MB, ME, MS, C, trace_ensemble
from .walks import collision_functional_pair, pair_moment_mc_check

Z_LIMIT = 3.0


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def _z_check(name: str, est, target: float, limit: float = Z_LIMIT) -> Check:
    z = est.z(target)
    return Check(name, abs(z) <= limit, f"mean={est.mean:.6g} se={est.se:.3g} target={target:.6g} z={z:+.2f}")


def write_csv(path: Path, header: Iterable[str], rows: Iterable[tuple]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------

def cmd_simulate(cfg: ExperimentConfig, out: Path, workers: int) -> list[Check]:
    rc = cfg.run_config()
    trajs = run(rc, workers)
    if cfg.outputs["snapshots"]:
        rows = sorted(r for t in trajs for r in snapshot_rows(t))
        write_csv(out / "snapshots.csv", ("replica", "step", "site", "count"), rows)
    if cfg.outputs["steps"]:
        rows = sorted(r for t in trajs for r in record_rows(t))
        write_csv(out / "steps.csv", ("replica", "step", "site", "xi", "pl", "pr", "cl", "cr"), rows)
    b0 = sum(c for _, c in rc.initial)
    final = np.array([t.snapshots[-1].mass for t in trajs], dtype=np.float64)
    parity = all(f.parity_ok() for t in trajs for f in t.snapshots) if rc.parity_checked else True
    checks = [Check("parity", parity, "occupied sites have the parity of the step")]
    if b0 > 0 and rc.replicas > 1:
        est = estimate(final / b0)
        checks.append(_z_check("mass_martingale", est, 1.0))
        write_json(out / "summary.json", {"replicas": rc.replicas, "horizon": rc.horizon_steps,
                                          "mass_ratio_mean": est.mean, "mass_ratio_se": est.se})
    return checks


def cmd_moments(cfg: ExperimentConfig, out: Path, workers: int) -> list[Check]:
    e, r = cfg.data["env"], cfg.data["run"]
    rep = pair_moment_mc_check(e["beta"], e["N"], r["horizon"], r["replicas"], r["seed"], workers)
    lam = e["beta"] ** 2 / math.sqrt(e["N"])
    alt = collision_functional_pair(r["horizon"], lam)
    info = {"oracle": json.loads(rep.to_json()), "collisions_times_1_to_n": alt,
            "z_vs_times_1_to_n": (rep.mc_mean - alt) / rep.mc_se if rep.mc_se > 0 else 0.0}
    write_json(out / "oracle.json", info)
    print(f"INFO collision functional over times 1..n = {alt:.7g} (z={info['z_vs_times_1_to_n']:+.2f})")
    return [Check("pair_moment", rep.passed,
                  f"mc={rep.mc_mean:.6g} se={rep.mc_se:.3g} exact={rep.exact:.7g} z={rep.z:+.2f}")]


def cmd_identity(cfg: ExperimentConfig, out: Path, workers: int) -> list[Check]:
    rc = cfg.run_config()
    phis = cfg.phis()
    tr = trace_ensemble(rc, phis, ledger=True, workers=workers)
    checks = []
    for k, phi in enumerate(phis):
        res = float(tr.max_residual[:, k].max())
        checks.append(Check(f"decomposition[{phi.name}]", res <= 1e-9, f"max relative residual={res:.3g}"))
        if cfg.outputs["ledger"]:
            led = tr.ledger[:, k]
            rows = ((r, n, *led[r, n, [MB, ME, MS, C, BRB, BRE]].tolist(), float(tr.x_phi[r, k, n]))
                    for r in range(led.shape[0]) for n in range(led.shape[1]))
            write_csv(out / f"ledger_{k}.csv",
                      ("replica", "step", "Mb", "Me", "Ms", "C", "bracket_b", "bracket_e", "X_phi"), rows)
        if rc.replicas >= 100:
            led = tr.ledger[:, k, -1]
            for name, col, br in (("b", MB, BRB), ("e", ME, BRE)):
                v = variance_estimate(led[:, col])
                target = float(np.mean(led[:, br]))
                if v.mean == 0.0 and target == 0.0:
                    continue
                checks.append(_z_check(f"isometry_{name}[{phi.name}]", v, target))
            cov = covariance_estimate(led[:, MB], led[:, ME])
            if cov.se > 0:
                checks.append(_z_check(f"orthogonality[{phi.name}]", cov, 0.0))
    return checks


def cmd_audit(cfg: ExperimentConfig, out: Path, workers: int) -> list[Check]:
    a = cfg.data["audit"]
    laws = cfg.env_spec().custom_laws if "env" in cfg.data and cfg.data["env"]["law"] == "custom" else None
    rep = audit_assumption_a(a["betas"], a["Ns"], laws)
    print(rep.table())
    write_json(out / "audit.json", [asdict(r) for r in rep.rows])
    return [Check("assumption_a", rep.ok, f"{len(rep.rows)} rows")]


def _initial_measure(cfg: ExperimentConfig, grid):
    x0 = cfg.data["duality"]["x0"]
    if x0 == "dirac":
        return Atoms.dirac(), None
    vals = grid.sample(build_phi(x0))
    return GridMeasure(grid, vals), vals


def cmd_spde(cfg: ExperimentConfig, out: Path, workers: int) -> list[Check]:
    grid, params = cfg.spde_grid(), cfg.spde_params()
    s = cfg.data["spde"]
    u0 = grid.sample(build_phi(s["initial"]))
    u = solve_forward(grid, params, u0, s["replicas"], workers=workers)
    if cfg.outputs["snapshots"]:
        write_csv(out / "spde.csv", ("replica", "t", "x", "u"), spde_rows(grid, params.t_end, u))
    mass = grid.h * u.sum(axis=1)
    est = estimate(mass)
    m0 = grid.h * float(u0.sum())
    write_json(out / "summary.json", {"mass0": m0, "mass_mean": est.mean, "mass_se": est.se,
                                      "replicas": int(u.shape[0]), "scheme": params.scheme.value})
    print(f"INFO mass at t={params.t_end:g}: {est.mean:.6g} +- {est.se:.3g} (initial {m0:.6g})")
    ok = bool(np.all(np.isfinite(u)) and np.all(u >= 0))
    return [Check("nonnegative_finite", ok, f"{u.shape[0]} replicas x {grid.cells} cells")]


def cmd_duality(cfg: ExperimentConfig, out: Path, workers: int) -> list[Check]:
    d = cfg.data["duality"]
    grid = cfg.spde_grid()
    t = cfg.data["spde"]["t_end"] if d["t"] is None else d["t"]
    params = cfg.spde_params(t)
    phi = build_phi(d["phi"])
    x0, density = _initial_measure(cfg, grid)
    if d["source"] == "particle":
        if density is not None:
            raise ConfigError(["duality.x0: the particle source starts from its run.initial atoms"])
        rc = cfg.run_config()
        x0 = Atoms(tuple(s / math.sqrt(rc.env.scale_N) for s, _ in rc.initial),
                   tuple(c / rc.env.scale_N for _, c in rc.initial))
        source = ParticleSource(rc)
    else:
        if density is None:
            raise ConfigError(["duality.x0: the SPDE source needs a density initial condition"])
        source = SpdeSource(grid, params, density)
    start = time.perf_counter()
    lhs = forward_laplace_samples(source, phi, t, d["replicas"], workers)
    rhs = dual_laplace_samples(x0, phi, grid, params, t, d["replicas"], workers)
    rep = verdict(phi.name, estimate(lhs), estimate(rhs), d["budget"], time.perf_counter() - start)
    report = asdict(rep)
    report.pop("runtime")  # keep the file reproducible byte for byte
    write_json(out / "duality.json", report)
    if cfg.outputs["per_replica"]:
        write_csv(out / "duality_replicas.csv", ("replica", "lhs", "rhs"),
                  zip(range(lhs.size), lhs.tolist(), rhs.tolist()))
    print(f"INFO duality runtime {rep.runtime:.2f} s")
    return [Check("duality", rep.passed, f"lhs={rep.lhs_mean:.6g}+-{rep.lhs_se:.2g} "
                  f"rhs={rep.rhs_mean:.6g}+-{rep.rhs_se:.2g} z={rep.z:+.2f} budget={rep.discretization_budget:g}")]


COMMANDS: dict[str, Callable[[ExperimentConfig, Path, int], list[Check]]] = {
    "simulate": cmd_simulate,
    "moments": cmd_moments,
    "identity-check": cmd_identity,
    "audit-env": cmd_audit,
    "spde": cmd_spde,
    "duality": cmd_duality,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbmre", description="Branching random walk in random environment lab.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out-dir", default=".", help="directory for CSV/JSON outputs")
    p.add_argument("--workers", type=int, default=None, help="worker processes (default: SBMRE_WORKERS or 1)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, value parsed as JSON; repeatable")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = json.loads(Path(args.config).read_text())
        cfg = validate_config(apply_overrides(raw, args.override), args.subcommand)
        try:
            workers = args.workers if args.workers is not None else (
                cfg.workers if "workers" in raw else default_workers())
        except ValueError as exc:
            raise ConfigError([str(exc)]) from None
        if workers < 1:
            raise ConfigError(["--workers: must be >= 1"])
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo.json").write_text(cfg.dump())
    try:
        checks = COMMANDS[cfg.subcommand](cfg, out, workers)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except (SimulationError, SpdeError, ValueError, OverflowError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
