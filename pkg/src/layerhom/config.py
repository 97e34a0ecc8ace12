"""JSON run configuration: schema validation, defaults and provenance hash."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .geometry import GeometryError, MicrostructureSpec, spec_from_dict
from .kinetics import KineticsSpec
from .macro_flow import BulkGrid, Forcing
from .macro_transport import Regime


class ConfigError(ValueError):
    """Invalid or unreadable configuration (CLI exit code 2)."""


def load_schema() -> dict:
    text = resources.files("layerhom").joinpath("data/config.schema.json").read_text()
    return json.loads(text)


def config_hash(doc: Any) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class Physics:
    D_f: float = 1.0
    D_s: float = 1.0
    regime: Regime = Regime.INTERMEDIATE
    kinetics: KineticsSpec = field(default_factory=KineticsSpec.zero)
    interface_mode: str = "auto"
    forcing: Forcing = field(default_factory=Forcing)
    flow: bool = True


@dataclass(frozen=True)
class Numerics:
    cell_tol: float = 1e-10
    macro_tol: float = 1e-10
    dt: float = 0.01
    T: float = 0.1
    n_sigma: int = 16
    nz: int = 8
    H: float = 1.0
    length: float = 1.0
    threads: int | None = None

    def grid(self) -> BulkGrid:
        return BulkGrid(self.n_sigma, self.nz, self.H, self.length)


@dataclass(frozen=True)
class Outputs:
    directory: Path
    cadence: int = 1
    formats: tuple = ("csv", "json")


@dataclass(frozen=True, eq=False)
class RunConfig:
    raw: dict
    base_dir: Path
    geometry: MicrostructureSpec
    physics: Physics
    numerics: Numerics
    initial: dict
    inputs: dict
    outputs: Outputs
    hash: str

    def input_path(self, key: str) -> Path | None:
        p = self.inputs.get(key)
        return None if p is None else Path(p)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(os.path.normpath(base / q))


def parse_config(doc: Any, base_dir: Path | str = ".", require_inputs: bool = True) -> RunConfig:
    """Validate ``doc`` and build typed settings.

    ``require_inputs`` checks that referenced input files exist; commands that
    produce those files (the cell solvers) turn it off.
    """
    base = Path(base_dir)
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    try:
        geometry = spec_from_dict(doc["geometry"])
    except GeometryError as exc:
        raise ConfigError(str(exc)) from None

    ph = doc.get("physics", {})
    fo = ph.get("forcing", {})
    physics = Physics(
        D_f=float(ph.get("D_f", 1.0)),
        D_s=float(ph.get("D_s", 1.0)),
        regime=Regime(ph.get("gamma_regime", "intermediate")),
        kinetics=KineticsSpec.from_dict(ph.get("kinetics", {"variant": "zero"})),
        interface_mode=ph.get("interface_mode", "auto"),
        forcing=Forcing(
            tuple(fo.get("f_plus", (0.0, 0.0, 0.0))),
            tuple(fo.get("f_minus", (0.0, 0.0, 0.0))),
            float(fo.get("ramp_time", 0.0)),
        ),
        flow=bool(ph.get("flow", True)),
    )
    nu = doc.get("numerics", {})
    numerics = Numerics(**{k: nu[k] for k in nu})
    if numerics.T > 0 and abs(round(numerics.T / numerics.dt) * numerics.dt - numerics.T) > 1e-9 * numerics.T:
        raise ConfigError(f"numerics.T={numerics.T} is not a multiple of dt={numerics.dt}")

    initial = dict(doc.get("initial", {}))
    cs = initial.get("c_s", 0.0)
    if isinstance(cs, list):
        if physics.regime is Regime.ONE:
            raise ConfigError("regime 'one' takes a scalar initial c_s (uniform over Sigma x Z_s)")
        arr = np.asarray(cs, dtype=float)
        if arr.shape != (numerics.n_sigma, numerics.n_sigma):
            raise ConfigError(f"initial.c_s has shape {arr.shape}, expected ({numerics.n_sigma}, {numerics.n_sigma})")

    inputs = {}
    for key, p in doc.get("inputs", {}).items():
        path = _resolve(base, p)
        if require_inputs and not path.is_file():
            raise ConfigError(f"inputs.{key}: file not found: {path}")
        inputs[key] = str(path)

    out = doc.get("outputs", {})
    outputs = Outputs(
        directory=_resolve(base, out.get("directory", "out")),
        cadence=int(out.get("cadence", 1)),
        formats=tuple(out.get("formats", ["csv", "json"])),
    )
    return RunConfig(doc, base, geometry, physics, numerics, initial, inputs, outputs, config_hash(doc))


def load_config(path, require_inputs: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(doc, path.parent, require_inputs)


def initial_fluid_field(cfg: RunConfig, grid: BulkGrid) -> np.ndarray:
    spec = cfg.initial.get("c_f", 0.0)
    if not isinstance(spec, dict):
        return np.full(grid.cell_shape, float(spec))
    n = grid.n_sigma
    x = (np.arange(n) + 0.5) * grid.hx
    z = grid.z_centers()
    X, Y, Z = np.meshgrid(x, x, z, indexing="ij")
    cx, cy, cz = spec.get("center", (0.5 * grid.length, 0.5 * grid.length, 0.0))
    width = spec.get("width", 0.1)
    # lateral distance taken on the periodic torus
    dx = (X - cx + 0.5 * grid.length) % grid.length - 0.5 * grid.length
    dy = (Y - cy + 0.5 * grid.length) % grid.length - 0.5 * grid.length
    r2 = dx**2 + dy**2 + (Z - cz) ** 2
    return spec.get("background", 0.0) + spec.get("amplitude", 1.0) * np.exp(-r2 / (2 * width**2))
