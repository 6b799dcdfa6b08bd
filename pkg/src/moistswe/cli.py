"""Command-line driver for simulations and parameter studies.

Subcommands: ``run`` (one simulation), ``convergence`` (steady-state
error study across mesh levels), ``sweep-beta1`` (mountain runs across
depth-feedback strengths plus a dry baseline), ``compare-physics``
(three-state versus one-way conversion on the mountain), and
``print-defaults``.

Settings come from a flat ``key = value`` config file plus flags, flags
winning; every run echoes its fully resolved configuration into the
output directory as a file that reproduces the run when passed back.
Exit codes: 0 success, 1 numerical failure, 2 configuration error.
MOISTSWE_WORKERS sets how many sweep members run as separate processes.
"""

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from moistswe.config import (
    KNOWN_KEYS,
    defaults_text,
    echo_text,
    resolve_config,
    with_resolved_dt,
)
from moistswe.diagnostics import (
    SeriesFile,
    checkpoint,
    potential_vorticity,
    restore,
    series_row,
    snapshot,
    totals,
    write_snapshot,
)
from moistswe.dynamics import (
    Discretisation,
    Framework,
    FrameworkConfig,
    coriolis_samples,
)
from moistswe.errors import (
    ConfigError,
    InstabilityError,
    MeshQualityError,
    ResourceLimitError,
    SolverError,
    StateValidityError,
)
from moistswe.femcore import l2_error, l2_norm
from moistswe.meshes import build_icosahedral_sphere
from moistswe.stepper import SolverConfig, Stepper
from moistswe.testcases import Case, initial_state

__all__ = ["main"]


def _add_common(parser):
    add = parser.add_argument
    add("--config", metavar="FILE", help="flat key = value config file")
    add("--test", help="steady-state | mountain | unstable-jet")
    add("--framework", help="moist-convective | moist-convective-thermal | "
        "moist-thermal | moist-convective-pseudo-thermal")
    add("--scheme", help="three-state | one-way")
    add("--preset", help="paper | desk")
    add("--level", type=int)
    add("--days", type=float)
    add("--dt", type=float, help="timestep in seconds; derived from "
        "--courant when absent")
    add("--courant", type=float)
    add("--beta1", type=float)
    add("--beta2", type=float)
    add("--q0", type=float)
    add("--H", type=float)
    add("--xi", type=float)
    add("--gamma-r", type=float)
    add("--q-precip", type=float)
    add("--tau-v", type=float)
    add("--tau-r", type=float)
    add("--u0", type=float)
    add("--mountain-h0", type=float)
    add("--mountain-radius", type=float)
    add("--mountain-lon", type=float)
    add("--mountain-lat", type=float)
    add("--jet-h-hat", type=float, help="jet perturbation amplitude in "
        "metres; 0 keeps the jet balanced")
    add("--coriolis", help="sin | cos")
    add("--physics", action=argparse.BooleanOptionalAction, default=None)
    add("--limiter", action=argparse.BooleanOptionalAction, default=None)
    add("--snapshot-days", type=float)
    add("--out")


def _resolve(ns, base=None):
    file_text = None
    if ns.config:
        try:
            file_text = Path(ns.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
    overrides = {key: getattr(ns, key) for key in KNOWN_KEYS
                 if getattr(ns, key, None) is not None}
    return resolve_config(file_text, overrides=overrides, base=base)


def _timestep(cfg, spec, disc):
    """Fixed timestep and step count covering the run length.

    An explicit dt is honoured as given; otherwise dt targets the
    advective Courant number and is then nudged so the steps tile the
    run length exactly.
    """
    total = spec.days * 86400.0
    if cfg.dt is not None:
        return cfg.dt, max(1, round(total / cfg.dt))
    dt0 = cfg.courant * float(disc.geo.min_edge.min()) / spec.advective_speed
    nsteps = max(1, round(total / dt0))
    return total / nsteps, nsteps


@dataclass
class RunResult:
    outdir: Path
    disc: Discretisation
    setup: object
    state: object
    dt: float
    nsteps: int


def _steady_errors(disc, state, ref):
    def rel(space, a, b):
        norm = l2_norm(space, b)
        return l2_error(space, a, b) / (norm if norm > 0.0 else 1.0)

    return {"u": rel(disc.V, state.u, ref.u),
            "D": rel(disc.Q, state.D, ref.D),
            "b": rel(disc.Q, state.b, ref.b),
            "qv": rel(disc.Q, state.qv, ref.qv)}


def _execute_run(cfg, quiet=False):
    """The body shared by every run-producing command."""
    spec = cfg.case_spec()
    fwcfg = cfg.framework_config()
    disc = Discretisation(build_icosahedral_sphere(spec.level))
    dt, nsteps = _timestep(cfg, spec, disc)

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(echo_text(with_resolved_dt(cfg, dt)))

    setup = initial_state(fwcfg, spec, disc)
    params = cfg.physics_params() if cfg.physics else None
    b_ref = setup.state.b.copy() if fwcfg.prognostic_buoyancy else None
    solver = SolverConfig(dt=dt, reference_depth=spec.H,
                          limiter=cfg.limiter, b_ref=b_ref)
    stepper = Stepper(disc, fwcfg, solver, B=setup.B, theta=setup.theta,
                      f_cell=setup.f_cell, physics=params)

    track_errors = spec.name is Case.STEADY_STATE
    snap_params = params if params is not None else spec.physics_params()
    B_sat = setup.B if setup.B is not None else 0.0
    cadence = cfg.snapshot_days if cfg.snapshot_days > 0 else math.inf
    next_snap = cadence
    state = setup.state.copy()
    with SeriesFile(outdir / "series.csv", with_errors=track_errors) as sf:
        for n in range(nsteps):
            state = stepper.step(state)
            t_days = (n + 1) * dt / 86400.0
            errors = (_steady_errors(disc, state, setup.state)
                      if track_errors else None)
            sf.append(series_row(disc, state, t_days, stepper.last_courant,
                                 errors))
            if t_days >= next_snap - 1e-9:
                snap = snapshot(disc, state, (n + 1) * dt, snap_params, fwcfg,
                                B=B_sat, theta=setup.theta,
                                f_cell=setup.f_cell)
                write_snapshot(outdir / f"snapshot_{n + 1:06d}.csv", snap)
                next_snap += cadence

    snap = snapshot(disc, state, nsteps * dt, snap_params, fwcfg, B=B_sat,
                    theta=setup.theta, f_cell=setup.f_cell)
    write_snapshot(outdir / "snapshot_final.csv", snap)
    checkpoint(outdir / "final.ckpt", disc, state, time=nsteps * dt,
               steps=nsteps, b_ref=b_ref, theta=setup.theta, B=setup.B)
    if not quiet:
        print(f"{outdir}: {nsteps} steps of {dt:.6g} s "
              f"(last Courant {stepper.last_courant:.3g})")
    return RunResult(outdir, disc, setup, state, dt, nsteps)


def _run_member(cfg):
    """Process-pool entry: run quietly, hand back the output directory."""
    _execute_run(cfg, quiet=True)
    return cfg.out


def _worker_count():
    raw = os.environ.get("MOISTSWE_WORKERS", "1").strip() or "1"
    try:
        workers = int(raw)
    except ValueError:
        workers = 0
    if workers < 1:
        raise ConfigError(
            f"MOISTSWE_WORKERS must be a positive integer, got {raw!r}")
    return workers


def _run_members(members):
    workers = _worker_count()
    if workers > 1 and len(members) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for out in pool.map(_run_member, members):
                print(f"{out}: done")
    else:
        for member in members:
            _execute_run(member)


def _cmd_run(ns):
    cfg = _resolve(ns)
    _execute_run(cfg)
    return 0


def _parse_numbers(text, kind, what):
    try:
        values = [kind(part) for part in str(text).split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list: {text!r}") from None
    return values


def _cmd_convergence(ns):
    levels = sorted(set(_parse_numbers(ns.levels, int, "level")))
    if len(levels) < 2:
        raise ConfigError("convergence needs at least two mesh levels")
    cfg = _resolve(ns, base={"test": "steady-state", "days": 0.25,
                             "courant": 0.02, "level": levels[0]})
    if cfg.test != Case.STEADY_STATE.value:
        raise ConfigError("convergence runs the steady-state test")
    fwcfg = cfg.framework_config()

    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.txt").write_text(
        echo_text(cfg) + f"# levels = {','.join(map(str, levels))}\n")

    fields = ["u", "D"]
    if fwcfg.prognostic_buoyancy:
        fields.append("b")
    fields += ["qv", "qc"]

    table = []   # (level, edge, field, error)
    for level in levels:
        member = replace(cfg, level=level, out=str(outdir / f"level{level}"))
        res = _execute_run(member, quiet=True)
        errs = _steady_errors(res.disc, res.state, res.setup.state)
        errs["qc"] = l2_norm(res.disc.Q, res.state.qc)  # exact solution is 0
        edge = float(res.disc.geo.edge_len.mean())
        for field in fields:
            table.append((level, edge, field, errs[field]))
        print(f"level {level}: " + "  ".join(
            f"{f}={errs[f]:.3e}" for f in fields))

    with open(outdir / "convergence.csv", "w", newline="") as fh:
        fh.write("level,edge,field,error\n")
        for level, edge, field, error in table:
            fh.write(f"{level},{edge!r},{field},{error!r}\n")

    by_field = {f: [(lvl, e, err) for lvl, e, fld, err in table if fld == f]
                for f in fields}
    with open(outdir / "orders.csv", "w", newline="") as fh:
        fh.write("field,coarse,fine,order\n")
        for field, rows in by_field.items():
            for (l1, h1, e1), (l2, h2, e2) in zip(rows, rows[1:]):
                if e1 > 0.0 and e2 > 0.0:
                    order = math.log(e1 / e2) / math.log(h1 / h2)
                    fh.write(f"{field},{l1},{l2},{order!r}\n")
                    print(f"order {field} {l1}->{l2}: {order:.2f}")
    return 0


def _cmd_sweep_beta1(ns):
    values = _parse_numbers(ns.beta1_values, float, "beta1")
    if not values:
        raise ConfigError("the beta1 sweep needs at least one value")
    cfg = _resolve(ns, base={"test": "mountain"})
    if cfg.test != Case.MOUNTAIN.value:
        raise ConfigError("the beta1 sweep runs the mountain test")
    try:
        FrameworkConfig(Framework(cfg.framework), beta1=max(values),
                        beta2=cfg.beta2)
    except ConfigError as exc:
        raise ConfigError(f"framework cannot sweep beta1: {exc}") from None

    outdir = Path(cfg.out)
    members = [replace(cfg, physics=False, beta1=0.0,
                       out=str(outdir / "dry"))]
    members += [replace(cfg, beta1=value, out=str(outdir / f"beta1_{value:g}"))
                for value in values]
    _run_members(members)

    disc = Discretisation(build_icosahedral_sphere(cfg.level))
    spec = cfg.case_spec()
    f_cell = coriolis_samples(disc, omega=spec.omega, variant=spec.coriolis)

    def final_pv(member_out):
        ck = restore(Path(member_out) / "final.ckpt", disc)
        return potential_vorticity(disc, ck.state, f_cell=f_cell)

    pv_dry = final_pv(members[0].out)
    with open(outdir / "sweep.csv", "w", newline="") as fh:
        fh.write("beta1,pv_diff_l2\n")
        for value, member in zip(values, members[1:]):
            diff = l2_error(disc.Q, final_pv(member.out), pv_dry)
            fh.write(f"{value!r},{diff!r}\n")
            print(f"beta1 = {value:g}: |pv - pv_dry| = {diff:.6e}")
    return 0


def _cmd_compare_physics(ns):
    cfg = _resolve(ns, base={"test": "mountain",
                             "framework": "moist-convective"})
    if cfg.test != Case.MOUNTAIN.value:
        raise ConfigError("the physics comparison runs the mountain test")
    if cfg.framework != Framework.MOIST_CONVECTIVE.value:
        raise ConfigError("the physics comparison uses the moist-convective "
                          "framework")
    outdir = Path(cfg.out)
    schemes = ("three-state", "one-way")
    members = [replace(cfg, scheme=s, out=str(outdir / s)) for s in schemes]
    _run_members(members)

    disc = Discretisation(build_icosahedral_sphere(cfg.level))
    with open(outdir / "compare.csv", "w", newline="") as fh:
        fh.write("scheme,total_rain\n")
        for member in members:
            ck = restore(Path(member.out) / "final.ckpt", disc)
            rain = totals(disc, ck.state)["rain"]
            fh.write(f"{member.scheme},{rain!r}\n")
            print(f"{member.scheme}: total rain {rain:.6e}")
    return 0


def _cmd_print_defaults(ns):
    print(defaults_text(), end="")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="moistswe",
        description="Moist shallow-water simulations on the sphere.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one simulation")
    _add_common(p)
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("convergence",
                       help="steady-state error study across mesh levels")
    _add_common(p)
    p.add_argument("--levels", default="3,4",
                   help="comma-separated mesh levels, at least two")
    p.set_defaults(handler=_cmd_convergence)

    p = sub.add_parser("sweep-beta1",
                       help="mountain runs across beta1 plus a dry baseline")
    _add_common(p)
    p.add_argument("--beta1-values", default="1.6,1600,8500,10000",
                   help="comma-separated beta1 values in metres")
    p.set_defaults(handler=_cmd_sweep_beta1)

    p = sub.add_parser("compare-physics",
                       help="three-state versus one-way moisture conversion")
    _add_common(p)
    p.set_defaults(handler=_cmd_compare_physics)

    p = sub.add_parser("print-defaults",
                       help="list physical constants and config defaults")
    p.set_defaults(handler=_cmd_print_defaults)

    return parser


def main(argv=None):
    parser = _build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.handler(ns)
    except ConfigError as exc:
        for line in str(exc).splitlines():
            print(f"config error: {line}", file=sys.stderr)
        return 2
    except ResourceLimitError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InstabilityError, SolverError, StateValidityError,
            MeshQualityError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
