"""
Sparse solvers: Jacobi-preconditioned conjugate gradients and an Uzawa
iteration for symmetric saddle-point systems

    [ A  B^T ] [u]   [f]
    [ B   0  ] [p] = [g].

The Uzawa driver runs conjugate gradients on the pressure Schur complement
``B A^{-1} B^T`` preconditioned by the inverse (diagonal) pressure mass
matrix; every application of ``A^{-1}`` is an inner Jacobi-CG solve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

MAX_ITER_CAP = 50_000


class SolverError(RuntimeError):
    """Raised on non-convergence; carries the last residual norms."""

    def __init__(self, message: str, residual: float, divergence_residual: float | None = None):
        super().__init__(message)
        self.residual = residual
        self.divergence_residual = divergence_residual


def default_max_iter(n: int) -> int:
    return int(min(MAX_ITER_CAP, max(1, math.ceil(20.0 * math.sqrt(max(n, 1))))))


@dataclass(frozen=True)
class SparseOperator:
    """Linear operator on R^n given by its matrix-vector product."""

    n: int
    apply: Callable[[np.ndarray], np.ndarray]
    symmetric: bool = True
    diagonal: Optional[np.ndarray] = None

    @classmethod
    def from_matrix(cls, A, symmetric: bool = True) -> "SparseOperator":
        if sparse.issparse(A):
            A = A.tocsr()
            diag = A.diagonal()
        else:
            A = np.asarray(A, dtype=float)
            diag = np.diag(A).copy()
        return cls(A.shape[0], A.__matmul__, symmetric, diag)

    def __matmul__(self, x):
        return self.apply(x)

    def symmetry_defect(self, probes: int = 4, seed: int = 0) -> float:
        """max |<Ax, y> - <x, Ay>| / (|Ax||y|) over random probes."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(probes):
            x = rng.standard_normal(self.n)
            y = rng.standard_normal(self.n)
            ax, ay = self.apply(x), self.apply(y)
            scale = np.linalg.norm(ax) * np.linalg.norm(y) + 1e-300
            worst = max(worst, abs(ax @ y - x @ ay) / scale)
        return worst


def _as_operator(A) -> SparseOperator:
    return A if isinstance(A, SparseOperator) else SparseOperator.from_matrix(A)


def cg_solve(
    op,
    rhs: np.ndarray,
    tol: float = 1e-8,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
    precond: str | None = "jacobi",
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    relative: bool = False,
    callback: Callable[[np.ndarray], None] | None = None,
) -> np.ndarray:
    """Preconditioned CG for SPD ``op``.

    Stops when ``|r| <= tol * (1 + |rhs|)`` (or ``tol * |rhs|`` with
    ``relative=True``).  ``rhs`` may be 2-D, in which case every column is an
    independent system sharing the operator.  ``project`` is applied to the
    residual and search directions (e.g. removal of a constant null mode).
    """
    op = _as_operator(op)
    b = np.asarray(rhs, dtype=float)
    batched = b.ndim == 2
    B = b if batched else b[:, None]
    n, m = B.shape
    if n != op.n:
        raise ValueError(f"rhs has length {n}, operator has dimension {op.n}")
    max_iter = default_max_iter(n) if max_iter is None else int(max_iter)

    if precond == "jacobi" and op.diagonal is not None:
        d = np.asarray(op.diagonal, dtype=float)
        dinv = np.where(d != 0.0, 1.0 / np.where(d != 0.0, d, 1.0), 1.0)[:, None]
    else:
        dinv = None

    def P(r):
        return r if project is None else project(r)

    def apply(X):
        if m == 1:
            return op.apply(X[:, 0])[:, None]
        return np.column_stack([op.apply(X[:, j]) for j in range(m)]) if not _batched_ok(op) else op.apply(X)

    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(n, m)
    R = P(B - apply(X) if x0 is not None else B.copy())
    bnorm = np.linalg.norm(B, axis=0)
    thresh = tol * (bnorm if relative else (1.0 + bnorm))
    rnorm = np.linalg.norm(R, axis=0)
    active = rnorm > thresh
    if not active.any():
        return X if batched else X[:, 0]

    Z = P(R * dinv) if dinv is not None else R.copy()
    D = Z.copy()
    rz = np.einsum("ij,ij->j", R, Z)
    for it in range(1, max_iter + 1):
        AD = apply(D)
        dAd = np.einsum("ij,ij->j", D, AD)
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = np.where(active & (dAd > 0), rz / dAd, 0.0)
        X += alpha * D
        R -= alpha * AD
        if callback is not None:
            callback(X if batched else X[:, 0])
        rnorm = np.linalg.norm(R, axis=0)
        active = active & (rnorm > thresh)
        if not active.any():
            logger.debug("cg converged in %d iterations", it)
            return X if batched else X[:, 0]
        Z = P(R * dinv) if dinv is not None else P(R.copy())
        rz_new = np.einsum("ij,ij->j", R, Z)
        with np.errstate(divide="ignore", invalid="ignore"):
            beta = np.where(active & (rz != 0), rz_new / rz, 0.0)
        D = Z + beta * D
        rz = rz_new
    raise SolverError(
        f"CG did not converge in {max_iter} iterations (residual {rnorm.max():.3e}, "
        f"target {thresh.max():.3e})",
        float(rnorm.max()),
    )


def _batched_ok(op: SparseOperator) -> bool:
    # bound sparse-matrix products accept 2-D right-hand sides
    owner = getattr(op.apply, "__self__", None)
    return owner is not None and (sparse.issparse(owner) or isinstance(owner, np.ndarray))


@dataclass
class SaddleSystem:
    """Symmetric saddle-point system; ``pressure_mass`` is the diagonal mass.

    With ``mean_constraint`` the pressure is sought with zero mass-weighted
    mean and constants must lie in the kernel of ``B^T``.
    """

    A: object
    B: sparse.spmatrix
    f: np.ndarray
    g: np.ndarray
    mean_constraint: bool = False
    pressure_mass: Optional[np.ndarray] = None

    def __post_init__(self):
        self.B = sparse.csr_matrix(self.B)
        self.BT = self.B.T.tocsr()
        if self.pressure_mass is None:
            self.pressure_mass = np.ones(self.B.shape[0])
        self.pressure_mass = np.asarray(self.pressure_mass, dtype=float)

    @property
    def n_velocity(self) -> int:
        return self.B.shape[1]

    @property
    def n_pressure(self) -> int:
        return self.B.shape[0]

    def constant_pressure_defect(self) -> float:
        return float(np.abs(self.BT @ np.ones(self.n_pressure)).max(initial=0.0))

    def project_mean(self, p: np.ndarray) -> np.ndarray:
        w = self.pressure_mass
        return p - (w @ p) / w.sum()

    def residuals(self, u: np.ndarray, p: np.ndarray) -> tuple[float, float]:
        A = _as_operator(self.A)
        mom = np.linalg.norm(A.apply(u) + self.BT @ p - self.f)
        div = np.linalg.norm((self.B @ u - self.g) / np.sqrt(self.pressure_mass))
        return float(mom), float(div)


class UzawaResult(NamedTuple):
    u: np.ndarray
    p: np.ndarray
    iterations: int
    momentum_residual: float
    divergence_residual: float


def uzawa_solve(
    system: SaddleSystem,
    tol: float = 1e-8,
    max_iter: int | None = None,
    p0: np.ndarray | None = None,
    inner_tol: float | None = None,
) -> UzawaResult:
    """Uzawa-CG on the pressure Schur complement.

    Converged when the momentum residual is below ``tol * (1 + |f|)`` and the
    mass-weighted divergence residual below ``tol * (1 + |M^{-1/2} g|)``.
    """
    A = _as_operator(system.A)
    B, BT = system.B, system.BT
    W = system.pressure_mass
    np_ = system.n_pressure
    max_iter = default_max_iter(np_) if max_iter is None else int(max_iter)
    f = np.asarray(system.f, dtype=float)
    g = np.asarray(system.g, dtype=float)
    fnorm = np.linalg.norm(f)
    mom_target = tol * (1.0 + fnorm)
    div_target = tol * (1.0 + np.linalg.norm(g / np.sqrt(W)))
    # inner solves must be well below the outer target
    itol = inner_tol if inner_tol is not None else 1e-3 * tol

    def proj(q):
        return system.project_mean(q) if system.mean_constraint else q

    def solve_A(rhs, x0=None):
        scale = max(np.linalg.norm(rhs), fnorm, 1e-300)
        return cg_solve(A, rhs, tol=itol * scale / max(np.linalg.norm(rhs), 1e-300), x0=x0, relative=True)

    p = np.zeros(np_) if p0 is None else proj(np.array(p0, dtype=float))
    if not np.any(f) and not np.any(g) and not np.any(p):
        return UzawaResult(np.zeros(system.n_velocity), p, 0, 0.0, 0.0)

    u = solve_A(f - BT @ p)
    rho = B @ u - g
    if system.mean_constraint:
        # the Schur residual must be orthogonal to constants; anything else is incompatible data
        rho = rho - W * (rho.sum() / W.sum())
    z = proj(rho / W)
    d = z.copy()
    rz = rho @ z
    it = 0
    div = np.linalg.norm(rho / np.sqrt(W))
    while div > div_target:
        if it >= max_iter:
            mom, div_true = system.residuals(u, p)
            raise SolverError(
                f"Uzawa stagnated after {it} iterations (momentum {mom:.3e}, divergence {div_true:.3e})",
                mom,
                div_true,
            )
        w = solve_A(BT @ d)
        Sd = B @ w
        dSd = d @ Sd
        if dSd <= 0:
            mom, div_true = system.residuals(u, p)
            raise SolverError("Schur complement lost positivity", mom, div_true)
        alpha = rz / dSd
        p += alpha * d
        u -= alpha * w
        rho -= alpha * Sd
        it += 1
        div = np.linalg.norm(rho / np.sqrt(W))
        z = proj(rho / W)
        rz_new = rho @ z
        d = z + (rz_new / rz) * d
        rz = rz_new

    p = proj(p)
    # refresh the velocity so the momentum residual reflects a single inner solve
    u = solve_A(f - BT @ p, x0=u)
    mom, div = system.residuals(u, p)
    if mom > mom_target or div > 10 * div_target:
        raise SolverError(
            f"Uzawa final residuals too large (momentum {mom:.3e}, divergence {div:.3e})", mom, div
        )
    logger.debug("uzawa: %d outer iterations, residuals %.2e / %.2e", it, mom, div)
    return UzawaResult(u, p, it, mom, div)
