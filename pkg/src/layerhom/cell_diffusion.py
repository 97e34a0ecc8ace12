"""
Scalar corrector problems on the solid part of the cell and the homogenized
tangential diffusion tensor.

The corrector for direction ``i`` minimizes the discrete energy

    sum over SOLID-SOLID faces of h^3 ((eta_b - eta_a)/h + delta_{axis,i})^2,

so Gamma faces carry no flux and the S^+/S^- faces (if solid touches them)
are no-flux as well.  ``D*`` is the Gram matrix of the face gradients.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .geometry import GeometryError, ReferenceCell, solid_face_pairs
from .linalg import cg_solve

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class _SolidOperator:
    voxels: np.ndarray  # flat indices of solid voxels
    grad: sparse.csr_matrix  # face x voxel, (eta_b - eta_a) / h
    axis: np.ndarray
    labels: np.ndarray  # connected component of each solid voxel
    ncomp: int
    lap: sparse.csr_matrix

    def project(self, r: np.ndarray) -> np.ndarray:
        """Remove the per-component mean (works on 1-D and 2-D arrays)."""
        counts = np.bincount(self.labels, minlength=self.ncomp).astype(float)
        if r.ndim == 1:
            means = np.bincount(self.labels, weights=r, minlength=self.ncomp) / counts
            return r - means[self.labels]
        out = np.empty_like(r)
        for j in range(r.shape[1]):
            out[:, j] = self.project(r[:, j])
        return out


def _solid_operator(cell: ReferenceCell) -> _SolidOperator:
    if cell.measures.zs == 0:
        raise GeometryError("solid phase is empty; the diffusion cell problem is undefined")
    h = cell.h
    vox = np.flatnonzero(cell.solid.ravel())
    local = np.full(cell.phase.size, -1, dtype=np.int64)
    local[vox] = np.arange(len(vox))
    a, b, axis = solid_face_pairs(cell)
    nf = len(a)
    rows = np.repeat(np.arange(nf), 2)
    cols = np.column_stack([local[a], local[b]]).ravel()
    vals = np.tile([-1.0 / h, 1.0 / h], nf)
    grad = sparse.csr_matrix((vals, (rows, cols)), shape=(nf, len(vox)))
    lap = (h**3 * (grad.T @ grad)).tocsr()
    adj = sparse.csr_matrix((np.ones(nf), (local[a], local[b])), shape=(len(vox), len(vox)))
    ncomp, labels = csgraph.connected_components(adj, directed=False)
    if ncomp > 1:
        warnings.warn(f"solid phase has {ncomp} face-connected components; correctors are fixed per component")
    return _SolidOperator(vox, grad, axis, labels, ncomp, lap)


@dataclass(frozen=True, eq=False)
class DiffusionCellSolution:
    direction: int
    eta: np.ndarray  # cell-shaped, zero on fluid voxels
    face_gradient: np.ndarray = field(repr=False)  # e_i + grad eta on solid-solid faces
    residual: float
    components: int
    resolution: int


@dataclass(frozen=True)
class EffectiveDiffusionTensor:
    D_star: np.ndarray
    zs_measure: float
    d_s: float
    gamma_measure: float | None = None

    def to_json(self) -> dict:
        return {
            "D_star": [[float(x) for x in row] for row in self.D_star],
            "zs_measure": float(self.zs_measure),
            "gamma_measure": self.gamma_measure,
            "d_s": float(self.d_s),
        }

    @classmethod
    def from_json(cls, doc) -> "EffectiveDiffusionTensor":
        D = np.array(doc["D_star"], dtype=float)
        if D.shape != (2, 2):
            raise ValueError(f"D_star must be 2x2, got shape {D.shape}")
        return cls(D, float(doc["zs_measure"]), float(doc.get("d_s", 1.0)), doc.get("gamma_measure"))


def _solve(cell: ReferenceCell, op: _SolidOperator, direction: int, tol: float) -> DiffusionCellSolution:
    if direction not in (1, 2):
        raise ValueError(f"direction must be 1 or 2, got {direction!r}")
    h = cell.h
    e = (op.axis == direction - 1).astype(float)
    rhs = -h**3 * (op.grad.T @ e)
    x = cg_solve(op.lap, op.project(rhs), tol=tol, project=op.project, relative=True)
    x = op.project(x)
    res = float(np.linalg.norm(op.project(op.lap @ x - rhs)))
    eta = np.zeros(cell.phase.size)
    eta[op.voxels] = x
    return DiffusionCellSolution(
        direction=direction,
        eta=eta.reshape(cell.shape),
        face_gradient=op.grad @ x + e,
        residual=res,
        components=op.ncomp,
        resolution=cell.n,
    )


def solve_cell_diffusion(cell: ReferenceCell, direction: int, d_s: float = 1.0, tol: float = 1e-10) -> DiffusionCellSolution:
    """Corrector eta_i; independent of ``d_s`` (checked to be positive)."""
    if not d_s > 0:
        raise ValueError(f"D_s must be positive, got {d_s!r}")
    return _solve(cell, _solid_operator(cell), direction, tol)


def solve_both_directions(cell: ReferenceCell, tol: float = 1e-10, threads: int = 1):
    op = _solid_operator(cell)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            return tuple(pool.map(lambda i: _solve(cell, op, i, tol), (1, 2)))
    return tuple(_solve(cell, op, i, tol) for i in (1, 2))


def assemble_d_star(solutions, cell: ReferenceCell, d_s: float = 1.0) -> EffectiveDiffusionTensor:
    sols = {s.direction: s for s in solutions}
    if set(sols) != {1, 2}:
        raise ValueError("need correctors for directions 1 and 2")
    for s in sols.values():
        if s.resolution != cell.n or s.eta.shape != cell.shape:
            raise ValueError("corrector computed on a different grid")
    h3 = cell.h**3
    D = np.zeros((2, 2))
    for i in (1, 2):
        for j in (i, 2):
            D[i - 1, j - 1] = D[j - 1, i - 1] = d_s * h3 * math.fsum(sols[i].face_gradient * sols[j].face_gradient)
    return EffectiveDiffusionTensor(D, cell.measures.zs, float(d_s), cell.measures.gamma)


def effective_diffusion(cell: ReferenceCell, d_s: float = 1.0, tol: float = 1e-10, threads: int = 1) -> EffectiveDiffusionTensor:
    return assemble_d_star(solve_both_directions(cell, tol, threads), cell, d_s)
