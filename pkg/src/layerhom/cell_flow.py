"""
Stokes cell problems on the fluid part of the reference cell and the
effective interface tensors built from them.

Discretization: MAC grid, viscous term in energy form ``|E u|^2`` where the
rows of ``E`` are sqrt-weighted entries of the discrete symmetric gradient.
Diagonal strains live at cell centres, shear strains on cell edges with weight
proportional to the number of adjacent fluid cells.  The same ``E`` defines
the solve and the tensor integrals, so ``G`` is an exact Gram matrix.

Velocity faces are ``u[i, j, k]`` at ``x = i h``, ``v[i, j, k]`` at
``y = j h`` and ``w[i, j, k]`` at ``z = -1 + k h`` (``k = 0..2N``).
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg as sla
from scipy import sparse

from .geometry import GeometryError, ReferenceCell, validate_cell
from .linalg import SaddleSystem, uzawa_solve
from .mac import DATA, FREE, SOLID, WALL, FaceTable, RowBuilder, tangential_difference

logger = logging.getLogger(__name__)

CELL_VOLUME = 2.0
DEFAULT_CELL_TOL = 1e-10

# slots of the boundary-data vector: (u, v, w) on S^-, then (u, v, w) on S^+
N_DATA = 6


class CellBoundaryMode(enum.Enum):
    """The five distinct cell problems: q_1^+, q_2^+, q_1^-, q_2^-, q_3."""

    TANGENTIAL_PLUS_1 = ("+", 1)
    TANGENTIAL_PLUS_2 = ("+", 2)
    TANGENTIAL_MINUS_1 = ("-", 1)
    TANGENTIAL_MINUS_2 = ("-", 2)
    NORMAL = (None, 3)

    @property
    def side(self) -> str | None:
        return self.value[0]

    @property
    def component(self) -> int:
        return self.value[1]

    @classmethod
    def tangential(cls, side: str, i: int) -> "CellBoundaryMode":
        for m in cls:
            if m.value == (side, i):
                return m
        raise ValueError(f"no tangential mode ({side!r}, {i})")

    def boundary_data(self) -> np.ndarray:
        d = np.zeros(N_DATA)
        if self is CellBoundaryMode.NORMAL:
            d[2] = d[5] = 1.0
        else:
            d[(3 if self.side == "+" else 0) + self.component - 1] = 1.0
        return d


@dataclass(frozen=True, eq=False)
class CellAssembly:
    """Mode-independent discrete operators of one reference cell."""

    cell: ReferenceCell
    tables: tuple  # FaceTable for u, v, w
    nfree: int
    E_free: sparse.csr_matrix
    E_data: sparse.csr_matrix
    div_free: sparse.csr_matrix
    div_data: sparse.csr_matrix
    A: sparse.csr_matrix
    fluid_index: tuple

    @property
    def h(self) -> float:
        return self.cell.h


def _columns(status: np.ndarray, offset: int) -> np.ndarray:
    col = np.full(status.shape, -1, dtype=np.int64)
    m = status == FREE
    col[m] = offset + np.arange(int(m.sum()))
    return col


def assemble_cell_operators(cell: ReferenceCell) -> CellAssembly:
    n = cell.n
    nz = 2 * n
    h = cell.h
    fl = cell.fluid

    def lateral_status(axis):
        nb = np.roll(fl, 1, axis=axis)
        return np.where(fl & nb, FREE, np.where(fl | nb, WALL, SOLID))

    su = lateral_status(0)
    sv = lateral_status(1)
    sw = np.full((n, n, nz + 1), SOLID)
    both = fl[:, :, 1:] & fl[:, :, :-1]
    either = fl[:, :, 1:] | fl[:, :, :-1]
    sw[:, :, 1:nz] = np.where(both, FREE, np.where(either, WALL, SOLID))
    sw[:, :, 0] = np.where(fl[:, :, 0], DATA, WALL)
    sw[:, :, nz] = np.where(fl[:, :, -1], DATA, WALL)

    nu = int((su == FREE).sum())
    nv = int((sv == FREE).sum())
    nw = int((sw == FREE).sum())
    nfree = nu + nv + nw
    cu = _columns(su, 0)
    cv = _columns(sv, nu)
    cw = _columns(sw, nu + nv)
    cw[:, :, 0][sw[:, :, 0] == DATA] = nfree + 2
    cw[:, :, nz][sw[:, :, nz] == DATA] = nfree + 5
    U, V, W = FaceTable(su, cu), FaceTable(sv, cv), FaceTable(sw, cw)
    rb = RowBuilder(nfree + N_DATA)

    # diagonal strains at fluid cell centres, weight h^3
    I, J, K = np.nonzero(fl)
    s = math.sqrt(h**3) / h
    for tab, hi in ((U, ((I + 1) % n, J, K)), (V, (I, (J + 1) % n, K)), (W, (I, J, K + 1))):
        rows = rb.new_rows(len(I))
        rb.add(rows, tab.col[hi], s)
        rb.add(rows, tab.col[(I, J, K)], -s)

    # xy shear on vertical edges
    I, J, K = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), np.arange(nz), indexing="ij"))
    im, jm = (I - 1) % n, (J - 1) % n
    nfl = fl[im, jm, K].astype(int) + fl[I, jm, K] + fl[im, J, K] + fl[I, J, K]
    sel = nfl > 0
    I, J, K, im, jm, nfl = I[sel], J[sel], K[sel], im[sel], jm[sel], nfl[sel]
    rows = rb.new_rows(len(I))
    sc = np.sqrt(2 * h**3 * nfl / 4) * 0.5 / h
    tangential_difference(rb, rows, sc, U, (I, J, K), U, (I, jm, K))
    tangential_difference(rb, rows, sc, V, (I, J, K), V, (im, J, K))

    # xz and yz shear on horizontal edges, including the S^- and S^+ levels
    for comp, tab in ((0, U), (1, V)):
        I, J, K = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), np.arange(nz + 1), indexing="ij"))
        pi, pj = ((I - 1) % n, J) if comp == 0 else (I, (J - 1) % n)
        cnt = np.zeros(len(I), dtype=int)
        for kk in (K - 1, K):
            ok = (kk >= 0) & (kk < nz)
            kc = np.clip(kk, 0, nz - 1)
            cnt += (ok & fl[pi, pj, kc]).astype(int) + (ok & fl[I, J, kc]).astype(int)
        sel = cnt > 0
        I, J, K, pi, pj, cnt = I[sel], J[sel], K[sel], pi[sel], pj[sel], cnt[sel]
        sc = np.sqrt(2 * h**3 * cnt / 4) * 0.5 / h
        rows = rb.new_rows(len(I))
        mid = (K >= 1) & (K <= nz - 1)
        tangential_difference(rb, rows[mid], sc[mid], tab, (I[mid], J[mid], K[mid]), tab, (I[mid], J[mid], K[mid] - 1))
        # boundary levels: ghost = 2 * data - interior, so d/dz = 2 (data - interior) / h
        for level, inner, slot, sign in ((0, 0, comp, -1.0), (nz, nz - 1, 3 + comp, 1.0)):
            b = K == level
            st = tab.status[I[b], J[b], inner]
            free = st == FREE
            rb.add(rows[b], np.where(free, tab.col[I[b], J[b], inner], -1), -sign * 2 * sc[b])
            rb.add(rows[b], np.where(free, nfree + slot, -1), sign * 2 * sc[b])
        tangential_difference(rb, rows, sc, W, (I, J, K), W, (pi, pj, K))
    E = rb.tocsr()

    db = RowBuilder(nfree + N_DATA)
    I, J, K = np.nonzero(fl)
    rows = db.new_rows(len(I))
    for tab, hi in ((U, ((I + 1) % n, J, K)), (V, (I, (J + 1) % n, K)), (W, (I, J, K + 1))):
        db.add(rows, tab.col[hi], 1.0 / h)
        db.add(rows, tab.col[(I, J, K)], -1.0 / h)
    Dv = db.tocsr()

    E_free = E[:, :nfree].tocsr()
    return CellAssembly(
        cell=cell,
        tables=(U, V, W),
        nfree=nfree,
        E_free=E_free,
        E_data=E[:, nfree:].tocsr(),
        div_free=Dv[:, :nfree].tocsr(),
        div_data=Dv[:, nfree:].tocsr(),
        A=(E_free.T @ E_free).tocsr(),
        fluid_index=(I, J, K),
    )


@dataclass(frozen=True, eq=False)
class StokesCellSolution:
    mode: CellBoundaryMode
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    pressure: np.ndarray
    strain: np.ndarray = field(repr=False)
    momentum_residual: float
    divergence_residual: float
    max_divergence: float
    iterations: int
    resolution: int

    @property
    def velocity(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.u, self.v, self.w


def _scatter_faces(asm: CellAssembly, x_free: np.ndarray, d: np.ndarray) -> list[np.ndarray]:
    full = np.concatenate([x_free, d])
    out = []
    for tab in asm.tables:
        arr = np.zeros(tab.status.shape)
        m = tab.col >= 0
        arr[m] = full[tab.col[m]]
        out.append(arr)
    return out


def _check_fluid(cell: ReferenceCell) -> None:
    rep = validate_cell(cell, require_clearance=False)
    if not rep.fluid_connected:
        raise GeometryError(f"fluid phase is disconnected ({rep.fluid_components} components)")


def solve_cell_stokes(
    cell: ReferenceCell,
    mode: CellBoundaryMode,
    tol: float = DEFAULT_CELL_TOL,
    assembly: CellAssembly | None = None,
) -> StokesCellSolution:
    """Solve one cell problem; ``assembly`` may be shared between modes."""
    if assembly is None:
        _check_fluid(cell)
        assembly = assemble_cell_operators(cell)
    elif assembly.cell is not cell:
        raise ValueError("assembly belongs to a different cell")
    asm = assembly
    h = cell.h
    d = mode.boundary_data()
    g = h**3 * (asm.div_data @ d)
    if abs(math.fsum(g)) > 1e-12 * (1.0 + np.abs(g).sum()):
        raise ValueError(
            f"{mode.name}: boundary flux is not balanced (|S_f^+| != |S_f^-|), the cell problem has no solution"
        )
    f = -(asm.E_free.T @ (asm.E_data @ d))
    npres = asm.div_free.shape[0]
    system = SaddleSystem(
        A=asm.A,
        B=-h**3 * asm.div_free,
        f=f,
        g=g,
        mean_constraint=True,
        pressure_mass=np.full(npres, h**3),
    )
    res = uzawa_solve(system, tol=tol)
    u, v, w = _scatter_faces(asm, res.u, d)
    pressure = np.zeros(cell.shape)
    pressure[asm.fluid_index] = res.p
    strain = asm.E_free @ res.u + asm.E_data @ d
    div = asm.div_free @ res.u + asm.div_data @ d
    logger.info(
        "%s: %d Uzawa iterations, residuals %.2e / %.2e", mode.name, res.iterations,
        res.momentum_residual, res.divergence_residual,
    )
    return StokesCellSolution(
        mode=mode,
        u=u,
        v=v,
        w=w,
        pressure=pressure,
        strain=strain,
        momentum_residual=res.momentum_residual,
        divergence_residual=res.divergence_residual,
        max_divergence=float(np.abs(div).max(initial=0.0)),
        iterations=res.iterations,
        resolution=cell.n,
    )


def solve_all_cell_problems(
    cell: ReferenceCell, tol: float = DEFAULT_CELL_TOL, threads: int = 1
) -> dict[CellBoundaryMode, StokesCellSolution]:
    """All five cell problems on one shared assembly."""
    _check_fluid(cell)
    asm = assemble_cell_operators(cell)
    modes = list(CellBoundaryMode)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sols = list(pool.map(lambda m: solve_cell_stokes(cell, m, tol, asm), modes))
    else:
        sols = [solve_cell_stokes(cell, m, tol, asm) for m in modes]
    return dict(zip(modes, sols))


def _integrate(sol: StokesCellSolution, cell: ReferenceCell) -> np.ndarray:
    """Midpoint/trapezoid integral of each velocity component over Z_f."""
    h3 = cell.h**3
    w = sol.w.copy()
    w[:, :, 0] *= 0.5
    w[:, :, -1] *= 0.5
    return np.array([h3 * math.fsum(a.ravel()) for a in (sol.u, sol.v, w)])


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum(a * b)


@dataclass(frozen=True)
class EffectiveFlowTensors:
    G: Mapping[tuple, float]
    K_plus: np.ndarray
    K_minus: np.ndarray
    M: np.ndarray
    A_plus: np.ndarray
    A_minus: np.ndarray
    Q_plus: np.ndarray
    Q_minus: np.ndarray
    zf_measure: float
    resolution: int | None = None
    gamma_measure: float | None = None
    m_asymmetry: float = 0.0  # |G^{+-}_12 - G^{+-}_21|, diagnostic only

    def K(self, side: str) -> np.ndarray:
        return self.K_plus if side == "+" else self.K_minus

    def to_json(self) -> dict:
        def mat(a):
            return [[float(x) for x in row] for row in np.asarray(a)]

        return {
            "K_plus": mat(self.K_plus),
            "K_minus": mat(self.K_minus),
            "M": mat(self.M),
            "A_plus": mat(self.A_plus),
            "A_minus": mat(self.A_minus),
            "Q_plus": mat(self.Q_plus),
            "Q_minus": mat(self.Q_minus),
            "zf_measure": float(self.zf_measure),
            "gamma_measure": self.gamma_measure,
            "resolution": self.resolution,
            "M_asymmetry": float(self.m_asymmetry),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "EffectiveFlowTensors":
        """Rebuild from ``to_json`` output (``G`` is not stored and comes back empty)."""
        arr = {k: np.array(doc[k], dtype=float) for k in ("K_plus", "K_minus", "M", "A_plus", "A_minus", "Q_plus", "Q_minus")}
        for k, a in arr.items():
            if a.shape != (3, 3):
                raise ValueError(f"{k} must be 3x3, got shape {a.shape}")
        return cls(G={}, zf_measure=float(doc["zf_measure"]), resolution=doc.get("resolution"),
                   gamma_measure=doc.get("gamma_measure"), **arr)

    @classmethod
    def from_matrices(cls, K_plus, K_minus, M, zf_measure: float = CELL_VOLUME, A_plus=None, A_minus=None):
        """Tensors given directly (e.g. for macroscopic tests); ``A`` defaults to the plug-flow value."""
        e33 = np.zeros((3, 3))
        e33[2, 2] = 1.0
        A_plus = e33 / (2 * zf_measure) if A_plus is None else np.asarray(A_plus, float)
        A_minus = e33 / (2 * zf_measure) if A_minus is None else np.asarray(A_minus, float)
        return cls(
            G={}, K_plus=np.asarray(K_plus, float), K_minus=np.asarray(K_minus, float), M=np.asarray(M, float),
            A_plus=A_plus, A_minus=A_minus, Q_plus=A_plus - e33 / zf_measure, Q_minus=A_minus - e33 / zf_measure,
            zf_measure=zf_measure,
        )


def assemble_effective_tensors(
    solutions: Mapping[CellBoundaryMode, StokesCellSolution], cell: ReferenceCell
) -> EffectiveFlowTensors:
    missing = [m.name for m in CellBoundaryMode if m not in solutions]
    if missing:
        raise ValueError(f"missing cell solutions: {missing}")
    for sol in solutions.values():
        if sol.resolution != cell.n or sol.u.shape != cell.shape:
            raise ValueError("cell solutions were computed on a different grid")
    q = {(m.side, m.component): solutions[m].strain for m in CellBoundaryMode if m.side}
    s3 = solutions[CellBoundaryMode.NORMAL].strain
    sides = ("+", "-")

    G: dict[tuple, float] = {}
    for a in sides:
        for b in sides:
            for i in (1, 2):
                for j in (1, 2):
                    G[(a, b, i, j)] = _dot(q[(a, i)], q[(b, j)])
    for a in sides:
        for i in (1, 2):
            G[(a, a, i, 3)] = G[(a, a, 3, i)] = _dot(q[(a, i)], s3)
        G[(a, a, 3, 3)] = 0.5 * _dot(s3, s3)

    K = {a: np.array([[G[(a, a, i, j)] for j in (1, 2, 3)] for i in (1, 2, 3)]) for a in sides}
    # G^{+-} is symmetric in (i, j) only for symmetric microstructures; the
    # interface form sees just its symmetric part, which is what M stores
    M = np.zeros((3, 3))
    for i in (1, 2):
        for j in (i, 2):
            M[i - 1, j - 1] = M[j - 1, i - 1] = 0.5 * (G[("+", "-", i, j)] + G[("+", "-", j, i)])
    m_asym = abs(G[("+", "-", 1, 2)] - G[("+", "-", 2, 1)])

    zf = cell.measures.zf
    integral = {key: _integrate(solutions[CellBoundaryMode.tangential(*key)], cell) for key in q}
    half3 = 0.5 * _integrate(solutions[CellBoundaryMode.NORMAL], cell)
    e33 = np.zeros((3, 3))
    e33[2, 2] = 1.0
    A = {}
    for a in sides:
        A[a] = np.column_stack([integral[(a, 1)], integral[(a, 2)], half3]) / zf
    return EffectiveFlowTensors(
        G=G,
        K_plus=K["+"],
        K_minus=K["-"],
        M=M,
        A_plus=A["+"],
        A_minus=A["-"],
        Q_plus=A["+"] - e33 / zf,
        Q_minus=A["-"] - e33 / zf,
        zf_measure=zf,
        resolution=cell.n,
        gamma_measure=cell.measures.gamma,
        m_asymmetry=m_asym,
    )


def interface_form_matrix(t: EffectiveFlowTensors) -> np.ndarray:
    """6x6 matrix of the form 2 M xi+.xi- + sum K xi.xi in (xi+, xi-)."""
    return np.block([[t.K_plus, t.M], [t.M, t.K_minus]])


def constrained_basis() -> np.ndarray:
    """Orthonormal basis (6x5) of {xi_3^+ = xi_3^-}."""
    P = np.zeros((6, 5))
    P[0, 0] = P[1, 1] = P[3, 2] = P[4, 3] = 1.0
    P[2, 4] = P[5, 4] = 1.0 / math.sqrt(2.0)
    return P


def coercivity_margin(t: EffectiveFlowTensors) -> float:
    """Largest c_0 with form >= c_0 (|xi+|^2 + |xi-|^2) on xi_3^+ = xi_3^-."""
    P = constrained_basis()
    Q6 = interface_form_matrix(t)
    red = P.T @ (0.5 * (Q6 + Q6.T)) @ P
    return float(sla.eigvalsh(red)[0])


def darcy_velocity(
    t: EffectiveFlowTensors, v_plus_trace, v_minus_trace, tol: float = 1e-12
) -> np.ndarray:
    vp = np.asarray(v_plus_trace, dtype=float)
    vm = np.asarray(v_minus_trace, dtype=float)
    if abs(vp[2] - vm[2]) > tol * (1.0 + max(abs(vp[2]), abs(vm[2]))):
        raise ValueError(f"normal trace components differ: {vp[2]!r} vs {vm[2]!r}")
    out = t.Q_plus @ vp + t.Q_minus @ vm
    out[2] += (CELL_VOLUME / t.zf_measure) * vp[2]
    return out
