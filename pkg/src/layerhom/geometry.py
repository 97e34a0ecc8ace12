"""
Voxelized reference cell Z = Y x (-1, 1), Y = (0, 1)^2.

The cell is sampled on an N x N x 2N grid of cubic voxels of edge 1/N.  A
voxel is SOLID when its center lies in one of the (laterally wrapped)
primitives; centers exactly on a primitive boundary count as SOLID.  The first
two grid indices wrap periodically, the third does not.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

FLUID = 0
SOLID = 1

_TIE_TOL = 1e-12
_AXES = {"x": 0, "y": 1, "z": 2, 0: 0, 1: 1, 2: 2}


class GeometryError(ValueError):
    """Invalid microstructure or cell; ``primitive`` names the offender, if any."""

    def __init__(self, message: str, primitive: str | None = None):
        super().__init__(message)
        self.primitive = primitive


def _wrap(d: np.ndarray) -> np.ndarray:
    # minimal periodic displacement on the unit period
    return d - np.round(d)


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    name: str | None = None

    def z_range(self) -> tuple[float, float]:
        return float(self.lo[2]), float(self.hi[2])

    def contains(self, x, y, z):
        lo = np.asarray(self.lo, float)
        hi = np.asarray(self.hi, float)
        c = 0.5 * (lo + hi)
        r = 0.5 * (hi - lo) + _TIE_TOL
        inside = np.abs(z - c[2]) <= r[2]
        for coord, ax in ((x, 0), (y, 1)):
            if hi[ax] - lo[ax] >= 1.0:
                continue
            inside = inside & (np.abs(_wrap(coord - c[ax])) <= r[ax])
        return inside

    def sizes_ok(self) -> bool:
        return all(h > l for l, h in zip(self.lo, self.hi))


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    name: str | None = None

    def z_range(self) -> tuple[float, float]:
        return self.center[2] - self.radius, self.center[2] + self.radius

    def contains(self, x, y, z):
        cx, cy, cz = self.center
        d2 = _wrap(x - cx) ** 2 + _wrap(y - cy) ** 2 + (z - cz) ** 2
        return d2 <= self.radius**2 + _TIE_TOL

    def sizes_ok(self) -> bool:
        return self.radius > 0


@dataclass(frozen=True)
class Cylinder:
    """Circular cylinder of given radius and height; ``axis`` is 0, 1 or 2."""

    center: tuple[float, float, float]
    radius: float
    height: float
    axis: int = 2
    name: str | None = None

    def z_range(self) -> tuple[float, float]:
        if self.axis == 2:
            return self.center[2] - 0.5 * self.height, self.center[2] + 0.5 * self.height
        return self.center[2] - self.radius, self.center[2] + self.radius

    def contains(self, x, y, z):
        coords = (x, y, z)
        d = [coords[a] - self.center[a] for a in range(3)]
        d[0] = _wrap(d[0])
        d[1] = _wrap(d[1])
        a = self.axis
        others = [b for b in range(3) if b != a]
        r2 = d[others[0]] ** 2 + d[others[1]] ** 2
        along = np.abs(d[a])
        if a != 2 and self.height >= 1.0:
            along = np.zeros_like(along)
        return (r2 <= self.radius**2 + _TIE_TOL) & (along <= 0.5 * self.height + _TIE_TOL)

    def sizes_ok(self) -> bool:
        return self.radius > 0 and self.height > 0


Primitive = Union[Box, Sphere, Cylinder]


@dataclass(frozen=True)
class MicrostructureSpec:
    resolution: int
    solids: Sequence[Primitive] = ()
    clearance_check: bool = True


class CellMeasures(NamedTuple):
    zf: float
    zs: float
    gamma: float
    sf_plus: float
    sf_minus: float
    ss_plus: float
    ss_minus: float


@dataclass(frozen=True, eq=False)
class ReferenceCell:
    """Immutable voxel cell.  ``phase[i, j, k]`` is FLUID or SOLID.

    ``gamma_faces`` rows are ``(axis, i, j, k)``: the face between voxel
    ``(i, j, k)`` and its ``+axis`` neighbour (lateral neighbours wrap).
    ``s_plus_fluid`` etc. are ``(m, 2)`` arrays of lateral ``(i, j)`` indices
    of boundary faces on S^+ / S^- split by the phase of the adjacent voxel.
    """

    spec: MicrostructureSpec
    phase: np.ndarray
    gamma_faces: np.ndarray
    s_plus_fluid: np.ndarray
    s_plus_solid: np.ndarray
    s_minus_fluid: np.ndarray
    s_minus_solid: np.ndarray
    measures: CellMeasures = field(repr=False)

    @property
    def n(self) -> int:
        return self.phase.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.phase.shape

    @property
    def h(self) -> float:
        return 1.0 / self.phase.shape[0]

    @property
    def solid(self) -> np.ndarray:
        return self.phase == SOLID

    @property
    def fluid(self) -> np.ndarray:
        return self.phase == FLUID

    def voxel_centers(self):
        return _centers(self.n)


def _centers(n: int):
    h = 1.0 / n
    x = (np.arange(n) + 0.5) * h
    z = -1.0 + (np.arange(2 * n) + 0.5) * h
    return np.meshgrid(x, x, z, indexing="ij")


def _label(prim: Primitive, idx: int) -> str:
    kind = type(prim).__name__.lower()
    return prim.name or f"solids[{idx}] ({kind})"


def check_spec(spec: MicrostructureSpec) -> None:
    if int(spec.resolution) != spec.resolution or spec.resolution < 4:
        raise GeometryError(f"resolution must be an integer >= 4, got {spec.resolution!r}")
    for idx, prim in enumerate(spec.solids):
        label = _label(prim, idx)
        if not prim.sizes_ok():
            raise GeometryError(f"{label}: non-positive size", primitive=label)
        if isinstance(prim, Cylinder) and prim.axis not in (0, 1, 2):
            raise GeometryError(f"{label}: axis must be 0, 1 or 2", primitive=label)
        zlo, zhi = prim.z_range()
        if zlo < -1.0 - 1e-12 or zhi > 1.0 + 1e-12:
            raise GeometryError(
                f"{label}: extends outside the cell in y3 ({zlo:g}, {zhi:g}) not within [-1, 1]",
                primitive=label,
            )


def interface_faces(phase: np.ndarray) -> np.ndarray:
    """All FLUID/SOLID voxel faces as ``(axis, i, j, k)`` rows."""
    solid = phase == SOLID
    rows = []
    for axis in range(3):
        if axis < 2:
            nb = np.roll(solid, -1, axis=axis)
            mask = solid != nb
        else:
            mask = np.zeros_like(solid)
            mask[:, :, :-1] = solid[:, :, :-1] != solid[:, :, 1:]
        ijk = np.argwhere(mask)
        rows.append(np.column_stack([np.full(len(ijk), axis), ijk]))
    return np.concatenate(rows).astype(np.int64)


def build_cell(spec: MicrostructureSpec) -> ReferenceCell:
    check_spec(spec)
    n = int(spec.resolution)
    x, y, z = _centers(n)
    solid = np.zeros(x.shape, dtype=bool)
    for prim in spec.solids:
        solid |= prim.contains(x, y, z)
    phase = np.where(solid, SOLID, FLUID).astype(np.int8)
    phase.setflags(write=False)

    gamma = interface_faces(phase)
    top, bot = solid[:, :, -1], solid[:, :, 0]
    h = 1.0 / n
    nsolid = int(solid.sum())
    measures = CellMeasures(
        zf=(solid.size - nsolid) * h**3,
        zs=nsolid * h**3,
        gamma=len(gamma) * h**2,
        sf_plus=int((~top).sum()) * h**2,
        sf_minus=int((~bot).sum()) * h**2,
        ss_plus=int(top.sum()) * h**2,
        ss_minus=int(bot.sum()) * h**2,
    )
    cell = ReferenceCell(
        spec=spec,
        phase=phase,
        gamma_faces=gamma,
        s_plus_fluid=np.argwhere(~top),
        s_plus_solid=np.argwhere(top),
        s_minus_fluid=np.argwhere(~bot),
        s_minus_solid=np.argwhere(bot),
        measures=measures,
    )
    if spec.clearance_check and (measures.ss_plus > 0 or measures.ss_minus > 0):
        logger.info("clearance check requested but solid touches S^+/S^-")
    return cell


def cell_measures(cell: ReferenceCell) -> CellMeasures:
    return cell.measures


# ---------------------------------------------------------------------------
# connectivity


def _neighbour_offsets(connectivity: int):
    offs = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            for dk in (-1, 0, 1):
                order = abs(di) + abs(dj) + abs(dk)
                if order == 0:
                    continue
                if connectivity == 6 and order > 1:
                    continue
                # keep one of each +/- pair
                if (di, dj, dk) > (0, 0, 0):
                    offs.append((di, dj, dk))
    return offs


def phase_components(mask: np.ndarray, connectivity: int = 6) -> tuple[int, np.ndarray]:
    """Connected components of ``mask`` with lateral wrap.

    Returns ``(count, labels)``; labels is -1 outside the mask.
    """
    nx, ny, nz = mask.shape
    ids = np.arange(mask.size).reshape(mask.shape)
    rows, cols = [], []
    for di, dj, dk in _neighbour_offsets(connectivity):
        a = mask
        b = np.roll(np.roll(mask, -di, axis=0), -dj, axis=1)
        ib = np.roll(np.roll(ids, -di, axis=0), -dj, axis=1)
        if dk == 1:
            sel = np.zeros_like(mask)
            sel[:, :, :-1] = a[:, :, :-1] & b[:, :, 1:]
            nbr = np.zeros_like(ids)
            nbr[:, :, :-1] = ib[:, :, 1:]
        elif dk == -1:
            sel = np.zeros_like(mask)
            sel[:, :, 1:] = a[:, :, 1:] & b[:, :, :-1]
            nbr = np.zeros_like(ids)
            nbr[:, :, 1:] = ib[:, :, :-1]
        else:
            sel = a & b
            nbr = ib
        rows.append(ids[sel])
        cols.append(nbr[sel])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(mask.size, mask.size))
    _, labels = connected_components(graph, directed=False)
    labels = labels.reshape(mask.shape)
    inside = labels[mask]
    uniq, relabel = np.unique(inside, return_inverse=True)
    out = np.full(mask.shape, -1, dtype=np.int64)
    out[mask] = relabel
    return len(uniq), out


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    fluid_components: int
    solid_components: int
    clearance: bool
    corner_contacts: bool
    measures: CellMeasures
    errors: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def fluid_connected(self) -> bool:
        return self.fluid_components == 1

    @property
    def solid_connected(self) -> bool:
        return self.solid_components <= 1

    @property
    def interface_mode(self) -> str:
        """'coupled', 'impermeable' (solid touches both S^+ and S^-) or 'mixed'."""
        m = self.measures
        if m.ss_plus == 0 and m.ss_minus == 0:
            return "coupled"
        if m.ss_plus > 0 and m.ss_minus > 0:
            return "impermeable"
        return "mixed"


def validate_cell(cell: ReferenceCell, require_clearance: bool = False) -> ValidationReport:
    """Connectivity and clearance checks.

    Disconnected fluid is an error.  Disconnected solid only warns.  Phases
    that are 26-connected but not 6-connected are reported as corner contacts.
    """
    m = cell.measures
    errors: list[str] = []
    notes: list[str] = []

    nf6, _ = phase_components(cell.fluid, 6)
    if nf6 != 1:
        errors.append(f"fluid phase has {nf6} face-connected components (need exactly 1)")

    ns6 = 0
    corner = False
    if m.zs > 0:
        ns6, _ = phase_components(cell.solid, 6)
        ns26, _ = phase_components(cell.solid, 26)
        if ns6 > 1:
            msg = f"solid phase has {ns6} face-connected components"
            notes.append(msg)
            warnings.warn(msg, stacklevel=2)
        if ns26 < ns6:
            corner = True
            notes.append("solid components touch only along voxel edges/corners")
    if nf6 > 1:
        nf26, _ = phase_components(cell.fluid, 26)
        if nf26 < nf6:
            corner = True
            notes.append("fluid components touch only along voxel edges/corners")

    clearance = m.ss_plus == 0 and m.ss_minus == 0
    if require_clearance and not clearance:
        errors.append(f"solid touches S^+/S^- (|S_s^+|={m.ss_plus:g}, |S_s^-|={m.ss_minus:g})")

    return ValidationReport(
        valid=not errors,
        fluid_components=nf6,
        solid_components=ns6,
        clearance=clearance,
        corner_contacts=corner,
        measures=m,
        errors=tuple(errors),
        warnings=tuple(notes),
    )


def solid_face_pairs(cell: ReferenceCell):
    """SOLID-SOLID voxel faces.

    Returns ``(a, b, axis)`` with flat voxel indices into ``cell.phase``; the
    face normal points from ``a`` to ``b`` along ``axis``.
    """
    solid = cell.solid
    ids = np.arange(solid.size).reshape(solid.shape)
    a_all, b_all, ax_all = [], [], []
    for axis in range(3):
        if axis < 2:
            nb = np.roll(solid, -1, axis=axis)
            nid = np.roll(ids, -1, axis=axis)
            sel = solid & nb
            a, b = ids[sel], nid[sel]
        else:
            sel = solid[:, :, :-1] & solid[:, :, 1:]
            a, b = ids[:, :, :-1][sel], ids[:, :, 1:][sel]
        a_all.append(a)
        b_all.append(b)
        ax_all.append(np.full(len(a), axis))
    return np.concatenate(a_all), np.concatenate(b_all), np.concatenate(ax_all)


def gamma_solid_voxels(cell: ReferenceCell) -> np.ndarray:
    """Flat index of the SOLID voxel on each row of ``cell.gamma_faces``."""
    g = cell.gamma_faces
    axis, i, j, k = g[:, 0], g[:, 1], g[:, 2], g[:, 3]
    n0, n1, _ = cell.shape
    i2 = np.where(axis == 0, (i + 1) % n0, i)
    j2 = np.where(axis == 1, (j + 1) % n1, j)
    k2 = np.where(axis == 2, k + 1, k)
    first_solid = cell.phase[i, j, k] == SOLID
    si = np.where(first_solid, i, i2)
    sj = np.where(first_solid, j, j2)
    sk = np.where(first_solid, k, k2)
    return np.ravel_multi_index((si, sj, sk), cell.shape)


def primitive_from_dict(d: dict) -> Primitive:
    kind = d.get("type")
    name = d.get("name")
    if kind == "box":
        return Box(tuple(map(float, d["lo"])), tuple(map(float, d["hi"])), name=name)
    if kind == "sphere":
        return Sphere(tuple(map(float, d["center"])), float(d["radius"]), name=name)
    if kind == "cylinder":
        axis = d.get("axis", "z")
        if axis not in _AXES:
            raise GeometryError(f"unknown cylinder axis {axis!r}", primitive=name)
        return Cylinder(
            tuple(map(float, d["center"])),
            float(d["radius"]),
            float(d["height"]),
            axis=_AXES[axis],
            name=name,
        )
    raise GeometryError(f"unknown primitive type {kind!r}", primitive=name)


def spec_from_dict(d: dict) -> MicrostructureSpec:
    return MicrostructureSpec(
        resolution=int(d["resolution"]),
        solids=tuple(primitive_from_dict(p) for p in d.get("solids", [])),
        clearance_check=bool(d.get("clearance_check", True)),
    )
