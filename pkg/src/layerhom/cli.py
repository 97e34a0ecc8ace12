"""Command-line driver: cell solves, tensor files and macroscopic runs."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cell_diffusion import EffectiveDiffusionTensor, effective_diffusion
from .cell_flow import (
    EffectiveFlowTensors,
    assemble_effective_tensors,
    coercivity_margin,
    solve_all_cell_problems,
)
from .config import ConfigError, RunConfig, initial_fluid_field, load_config
from .geometry import GeometryError, ReferenceCell, build_cell, validate_cell
from .linalg import SolverError
from .macro_flow import (
    FlowState,
    InterfaceLaw,
    InterfaceMode,
    assemble_flow_system,
    darcy_field,
    kinetic_energy,
    max_divergence,
    step_flow,
)
from .macro_transport import CFLError, Regime, TransportConfig, TransportModel, TransportState
from .vtk import write_structured_points

logger = logging.getLogger("layerhom")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICS = 0, 2, 3
THREADS_ENV = "LAYERHOM_THREADS"


class NumericalFailure(RuntimeError):
    """Solver breakdown (CLI exit code 3)."""


# -- output helpers ----------------------------------------------------------


def _write_json(path: Path, doc: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # json writes floats via repr, which round-trips exactly and is deterministic
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


class _CsvLog:
    """CSV file whose first line is a ``# config_hash=`` comment."""

    def __init__(self, path: Path, header: list[str], config_hash: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.path = path
        self._fh = open(path, "w", newline="")
        self._fh.write(f"# config_hash={config_hash}\n")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(header)

    def row(self, values) -> None:
        self._w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in values])

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def _cell_centred(u, v, w):
    """Average MAC face values to voxel centres (x and y periodic)."""
    uc = 0.5 * (u + np.roll(u, -1, axis=0))
    vc = 0.5 * (v + np.roll(v, -1, axis=1))
    wc = 0.5 * (w[:, :, :-1] + w[:, :, 1:])
    return np.stack([uc, vc, wc], axis=-1)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer") from None
    return 1


def _build_cell(cfg: RunConfig) -> tuple[ReferenceCell, object]:
    cell = build_cell(cfg.geometry)
    report = validate_cell(cell, require_clearance=cfg.geometry.clearance_check)
    return cell, report


def _measures_dict(m) -> dict:
    return {k: float(v) for k, v in m._asdict().items()}


# -- subcommands --------------------------------------------------------------


def cmd_validate(cfg: RunConfig, args) -> int:
    cell, rep = _build_cell(cfg)
    m = rep.measures
    print(f"config_hash {cfg.hash}")
    print(f"resolution {cell.n} (grid {cell.shape[0]}x{cell.shape[1]}x{cell.shape[2]})")
    for key, val in _measures_dict(m).items():
        print(f"  |{key}| = {val!r}")
    print(f"fluid components (face-connected): {rep.fluid_components}")
    if m.zs > 0:
        print(f"solid components (face-connected): {rep.solid_components}")
    print(f"clearance from S^+/S^-: {'yes' if rep.clearance else 'no'}")
    if rep.corner_contacts:
        print("note: phases touch along voxel edges/corners only")
    for w in rep.warnings:
        print(f"warning: {w}")
    mode = rep.interface_mode
    if mode == "coupled":
        print("COUPLED eligible")
    elif mode == "impermeable":
        print("IMPERMEABLE mode (|S_s^±|>0)")
    else:
        print("MIXED contact: solid touches only one of S^+/S^- (unsupported)")
    for e in rep.errors:
        print(f"error: {e}", file=sys.stderr)
    if not rep.valid or mode == "mixed":
        return EXIT_CONFIG
    return EXIT_OK


def cmd_cell_flow(cfg: RunConfig, args) -> int:
    cell, rep = _build_cell(cfg)
    if not rep.valid:
        raise GeometryError("; ".join(rep.errors))
    tol = args.tol if args.tol is not None else cfg.numerics.cell_tol
    sols = solve_all_cell_problems(cell, tol=tol, threads=_threads(args))
    tensors = assemble_effective_tensors(sols, cell)
    margin = coercivity_margin(tensors)
    doc = tensors.to_json()
    doc["config_hash"] = cfg.hash
    doc["provenance"] = {
        "resolution": cell.n,
        "tolerance": tol,
        "measures": _measures_dict(cell.measures),
        "coercivity_margin": margin,
        "interface_mode": rep.interface_mode,
        "modes": {
            m.name: {
                "iterations": s.iterations,
                "momentum_residual": s.momentum_residual,
                "divergence_residual": s.divergence_residual,
                "max_divergence": s.max_divergence,
            }
            for m, s in sols.items()
        },
    }
    out = Path(args.out) if args.out else cfg.outputs.directory
    path = _write_json(out / "tensors.json", doc)
    if "vtk" in cfg.outputs.formats:
        h = cell.h
        spacing, origin = (h, h, h), (0.0, 0.0, -1.0)
        write_structured_points(out / "cell_phase.vtk", cell.shape, spacing, origin,
                                scalars={"phase": cell.phase.astype(float)}, title=f"config_hash={cfg.hash}")
        for m, s in sols.items():
            write_structured_points(
                out / f"cell_{m.name.lower()}.vtk", cell.shape, spacing, origin,
                scalars={"pressure": s.pressure}, vectors={"velocity": _cell_centred(s.u, s.v, s.w)},
                title=f"config_hash={cfg.hash} mode={m.name}",
            )
    print(f"wrote {path} (coercivity margin {margin:.6e})")
    return EXIT_OK


def cmd_cell_diffusion(cfg: RunConfig, args) -> int:
    cell, rep = _build_cell(cfg)
    # the corrector lives in Z_s only, so fluid connectivity is irrelevant here
    errors = [e for e in rep.errors if not e.startswith("fluid")]
    if errors:
        raise GeometryError("; ".join(errors))
    if cell.measures.zs == 0:
        raise GeometryError("solid phase is empty (|Z_s| = 0); no diffusion corrector exists")
    tol = args.tol if args.tol is not None else cfg.numerics.cell_tol
    d = effective_diffusion(cell, d_s=cfg.physics.D_s, tol=tol, threads=_threads(args))
    doc = d.to_json()
    doc["config_hash"] = cfg.hash
    doc["provenance"] = {"resolution": cell.n, "tolerance": tol, "measures": _measures_dict(cell.measures)}
    out = Path(args.out) if args.out else cfg.outputs.directory
    path = _write_json(out / "dstar.json", doc)
    print(f"wrote {path}")
    return EXIT_OK


def _load_json(path: Path, what: str) -> dict:
    if not path.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _interface_law(cfg: RunConfig, args, rep) -> tuple[InterfaceLaw, str | None]:
    requested = cfg.physics.interface_mode
    if requested == "auto":
        mode = rep.interface_mode
        if mode == "mixed":
            raise GeometryError("solid touches only one of S^+/S^-; no interface law applies")
    else:
        mode = requested
    if mode == "impermeable":
        return InterfaceLaw(InterfaceMode.IMPERMEABLE), None
    tpath = Path(args.tensors) if args.tensors else cfg.input_path("tensors")
    if tpath is None:
        raise ConfigError("COUPLED interface needs a tensor file (--tensors or inputs.tensors)")
    doc = _load_json(tpath, "tensor")
    try:
        tensors = EffectiveFlowTensors.from_json(doc)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{tpath}: invalid tensor file ({exc})") from None
    try:
        law = InterfaceLaw(InterfaceMode.COUPLED, tensors)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return law, doc.get("config_hash")


def _transport_config(cfg: RunConfig, args, cell: ReferenceCell) -> tuple[TransportConfig, str | None]:
    ph = cfg.physics
    m = cell.measures
    D_star, dhash = None, None
    if ph.regime is Regime.MINUS_ONE:
        dpath = Path(args.dstar) if args.dstar else cfg.input_path("dstar")
        if dpath is None:
            raise ConfigError("regime 'minus_one' needs a D* file (--dstar or inputs.dstar)")
        doc = _load_json(dpath, "D*")
        try:
            d = EffectiveDiffusionTensor.from_json(doc)
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"{dpath}: invalid D* file ({exc})") from None
        # D* is linear in D_s, so a file computed for another D_s is rescaled
        D_star = d.D_star * (ph.D_s / d.d_s)
        dhash = doc.get("config_hash")
    try:
        tc = TransportConfig(
            regime=ph.regime, D_f=ph.D_f, D_s=ph.D_s, kinetics=ph.kinetics, dt=cfg.numerics.dt,
            zs_measure=m.zs, gamma_measure=m.gamma, D_star=D_star,
            cell=cell if ph.regime is Regime.ONE else None,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return tc, dhash


def _snapshot(out: Path, name: str, cfg: RunConfig, flow: FlowState | None, ts: TransportState,
              model: TransportModel) -> None:
    g = model.grid
    title = f"config_hash={cfg.hash} t={ts.t!r}"
    vectors = {}
    if flow is not None:
        vectors["velocity"] = _cell_centred(flow.u, flow.v, flow.w)
    write_structured_points(out / f"{name}_fluid.vtk", g.cell_shape, (g.hx, g.hx, g.hz), (0.0, 0.0, -g.H),
                            scalars={"c_f": ts.c_f}, vectors=vectors, title=title)
    cs = ts.c_s
    if model.config.regime is Regime.ONE:
        # cell average of the microscopic solid field at each Sigma point
        cs = cs.mean(axis=1).reshape(g.n_sigma, g.n_sigma)
    write_structured_points(out / f"{name}_solid.vtk", (g.n_sigma, g.n_sigma, 1), (g.hx, g.hx, 1.0),
                            (0.0, 0.0, 0.0), scalars={"c_s": cs[:, :, None]}, title=title)


def cmd_macro_run(cfg: RunConfig, args) -> int:
    nu = cfg.numerics
    grid = nu.grid()
    cell = build_cell(cfg.geometry)
    rep = validate_cell(cell)
    flow_on = cfg.physics.flow
    if flow_on and not rep.valid:
        raise GeometryError("; ".join(rep.errors))

    law, thash = _interface_law(cfg, args, rep) if flow_on else (None, None)
    tc, dhash = _transport_config(cfg, args, cell)
    model = TransportModel(grid, tc)
    c_s0 = cfg.initial.get("c_s", 0.0)
    ts = model.initial_state(initial_fluid_field(cfg, grid), np.asarray(c_s0, dtype=float))
    fs = FlowState.zero(grid) if flow_on else None
    system = assemble_flow_system(grid, law, nu.dt, cfg.physics.forcing) if flow_on else None
    tol = args.tol if args.tol is not None else nu.macro_tol

    out = Path(args.out) if args.out else cfg.outputs.directory
    out.mkdir(parents=True, exist_ok=True)
    fmts = cfg.outputs.formats
    cadence = cfg.outputs.cadence
    flow_log = _CsvLog(out / "flow.csv", ["t", "energy", "darcy_1", "darcy_2", "darcy_3", "max_div"], cfg.hash) \
        if flow_on and "csv" in fmts else None
    mass_log = _CsvLog(out / "transport.csv",
                       ["t", "fluid_mass", "solid_mass", "total_mass", "c_f_min", "c_f_max", "c_s_min", "c_s_max"],
                       cfg.hash) if "csv" in fmts else None

    def record(fs_: FlowState | None, ts_: TransportState) -> None:
        if flow_log is not None:
            dm = darcy_field(law.tensors, fs_).mean(axis=(0, 1)) if law.tensors is not None else np.zeros(3)
            flow_log.row([fs_.t, kinetic_energy(fs_), *dm, max_divergence(fs_)])
        if mass_log is not None:
            mass_log.row([ts_.t, model.fluid_mass(ts_), model.solid_mass(ts_), model.total_mass(ts_),
                          ts_.c_f.min(), ts_.c_f.max(), ts_.c_s.min(), ts_.c_s.max()])

    nsteps = int(round(nu.T / nu.dt))
    mass0 = model.total_mass(ts)
    energies = [kinetic_energy(fs)] if flow_on else []
    record(fs, ts)
    if "vtk" in fmts:
        _snapshot(out, "snap_000000", cfg, fs, ts, model)
    max_defect = 0.0
    status = EXIT_OK
    try:
        for n in range(1, nsteps + 1):
            new_fs = step_flow(fs, system, tol) if flow_on else None
            new_ts, srep = model.coupled_step(ts, new_fs)
            max_defect = max(max_defect, abs(srep.exchange_defect))
            fs, ts = new_fs, new_ts
            if flow_on:
                energies.append(kinetic_energy(fs))
            if n % cadence == 0 or n == nsteps:
                record(fs, ts)
                if "vtk" in fmts:
                    _snapshot(out, f"snap_{n:06d}", cfg, fs, ts, model)
    except (SolverError, CFLError, FloatingPointError) as exc:
        print(f"error: step {n} failed at t={ts.t!r}: {exc}", file=sys.stderr)
        if (n - 1) % cadence != 0:
            record(fs, ts)
        _snapshot(out, "last_good", cfg, fs, ts, model)
        status = EXIT_NUMERICS
    finally:
        for log in (flow_log, mass_log):
            if log is not None:
                log.close()

    mass1 = model.total_mass(ts)
    drift = abs(mass1 - mass0) / max(abs(mass0), 1e-300) if mass0 != 0 else abs(mass1)
    if flow_on and len(energies) > 1:
        rises = np.diff(energies)
        worst = float(rises.max())
        trend = "nonincreasing" if worst <= 1e-14 * (1 + max(energies)) else f"increasing (max step rise {worst:.3e})"
    else:
        trend = "n/a (flow disabled)"
    summary = {
        "config_hash": cfg.hash,
        "tensor_config_hash": thash,
        "dstar_config_hash": dhash,
        "interface_mode": None if law is None else law.mode.value,
        "regime": tc.regime.value,
        "steps": nsteps,
        "t_final": ts.t,
        "mass_initial": mass0,
        "mass_final": mass1,
        "conservation_drift": drift,
        "max_exchange_defect": max_defect,
        "energy_initial": energies[0] if energies else None,
        "energy_final": energies[-1] if energies else None,
        "energy_trend": trend,
        "completed": status == EXIT_OK,
    }
    if "json" in fmts:
        _write_json(out / "summary.json", summary)
    print(f"summary: t={ts.t:.6g} steps={nsteps} conservation_drift={drift:.3e} energy_trend={trend}"
          + ("" if status == EXIT_OK else " (aborted)"))
    return status


# -- entry point ------------------------------------------------------------------

COMMANDS = {
    "validate": cmd_validate,
    "cell-flow": cmd_cell_flow,
    "cell-diffusion": cmd_cell_diffusion,
    "macro-run": cmd_macro_run,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerhom", description="Homogenized thin-membrane flow and transport.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides outputs.directory)")
        sp.add_argument("--tol", type=float, help="solver tolerance override")
        sp.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
        if name == "macro-run":
            sp.add_argument("--tensors", help="effective flow tensor JSON (overrides inputs.tensors)")
            sp.add_argument("--dstar", help="effective D* JSON (overrides inputs.dstar)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, require_inputs=args.command == "macro-run")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, CFLError, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
