"""Legacy ASCII VTK (STRUCTURED_POINTS) writer with cell data."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np


def _fmt(a: np.ndarray) -> str:
    # repr of a Python float is the shortest round-trip form, so output is byte-stable
    return "\n".join(repr(float(x)) for x in a)


def write_structured_points(
    path,
    shape: tuple[int, int, int],
    spacing: tuple[float, float, float],
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
    scalars: Mapping[str, np.ndarray] | None = None,
    vectors: Mapping[str, np.ndarray] | None = None,
    title: str = "layerhom",
) -> Path:
    """Write cell-centred fields on an ``nx x ny x nz`` block of cells.

    Scalars have shape ``shape``; vectors ``shape + (3,)``.  VTK orders
    values with x varying fastest, hence the Fortran-order flattening.
    """
    path = Path(path)
    nx, ny, nz = shape
    ncell = nx * ny * nz
    title = " ".join(title.split())[:250]
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
        "ORIGIN " + " ".join(repr(float(o)) for o in origin),
        "SPACING " + " ".join(repr(float(s)) for s in spacing),
        f"CELL_DATA {ncell}",
    ]
    for name, arr in (scalars or {}).items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape != tuple(shape):
            raise ValueError(f"scalar {name!r} has shape {arr.shape}, expected {shape}")
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default", _fmt(arr.ravel(order="F"))]
    for name, arr in (vectors or {}).items():
        arr = np.asarray(arr, dtype=float)
        if arr.shape != tuple(shape) + (3,):
            raise ValueError(f"vector {name!r} has shape {arr.shape}, expected {tuple(shape) + (3,)}")
        flat = np.stack([arr[..., c].ravel(order="F") for c in range(3)], axis=1)
        lines.append(f"VECTORS {name} double")
        lines.append("\n".join(" ".join(repr(float(x)) for x in row) for row in flat))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_structured_points(path) -> dict:
    """Minimal reader for files produced by ``write_structured_points`` (used in tests)."""
    tokens = Path(path).read_text().split("\n")
    out: dict = {"scalars": {}, "vectors": {}}
    i = 0
    while i < len(tokens):
        line = tokens[i].strip()
        if line.startswith("DIMENSIONS"):
            out["dimensions"] = tuple(int(x) for x in line.split()[1:])
        elif line.startswith("SPACING"):
            out["spacing"] = tuple(float(x) for x in line.split()[1:])
        elif line.startswith("ORIGIN"):
            out["origin"] = tuple(float(x) for x in line.split()[1:])
        elif line.startswith("CELL_DATA"):
            out["ncell"] = int(line.split()[1])
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            n = out["ncell"]
            out["scalars"][name] = np.array([float(x) for x in tokens[i + 2 : i + 2 + n]])
            i += 1 + n
        elif line.startswith("VECTORS"):
            name = line.split()[1]
            n = out["ncell"]
            out["vectors"][name] = np.array([[float(x) for x in r.split()] for r in tokens[i + 1 : i + 1 + n]])
            i += n
        i += 1
    return out
