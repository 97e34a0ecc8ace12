"""
Effective transport: c_f on the bulk column grid (both boxes, Sigma is the
interior face level ``nz``) coupled to the solid concentration c_s whose
form depends on the diffusion scaling regime.

Splitting per step (Lie): the solid update runs first with the current
fluid trace on Sigma and returns the exchange density ``X`` (exchange rate
per unit Sigma area).  The fluid update then removes exactly the same ``X``,
so the two sides of the exchange cancel by construction.

The Sigma source is split evenly between the two cell layers touching Sigma.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .cell_diffusion import _solid_operator
from .geometry import ReferenceCell, gamma_solid_voxels
from .kinetics import KineticsSpec, Variant, eval_h
from .linalg import SolverError, cg_solve
from .macro_flow import BulkGrid, FlowState

logger = logging.getLogger(__name__)


class Regime(enum.Enum):
    MINUS_ONE = "minus_one"
    INTERMEDIATE = "intermediate"
    ONE = "one"


class CFLError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TransportConfig:
    regime: Regime
    D_f: float
    D_s: float
    kinetics: KineticsSpec
    dt: float
    zs_measure: float
    gamma_measure: float
    D_star: np.ndarray | None = None
    cell: ReferenceCell | None = None

    def __post_init__(self):
        if not isinstance(self.regime, Regime):
            object.__setattr__(self, "regime", Regime(self.regime))
        if not (self.D_f > 0 and self.D_s > 0):
            raise ValueError("D_f and D_s must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.zs_measure < 0 or self.gamma_measure < 0:
            raise ValueError("cell measures must be non-negative")
        if self.regime is Regime.MINUS_ONE:
            if self.D_star is None:
                raise ValueError("regime MINUS_ONE needs D_star")
            D = np.asarray(self.D_star, dtype=float)
            if D.shape != (2, 2) or not np.allclose(D, D.T, rtol=0, atol=1e-14 * (1 + np.abs(D).max())):
                raise ValueError("D_star must be a symmetric 2x2 matrix")
            if np.linalg.eigvalsh(D)[0] < -1e-14 * (1 + np.abs(D).max()):
                raise ValueError("D_star must be positive semidefinite")
            object.__setattr__(self, "D_star", D)
        if self.regime is Regime.ONE:
            if self.cell is None:
                raise ValueError("regime ONE needs a reference cell")
            if self.cell.measures.zs == 0:
                raise ValueError("regime ONE needs a non-empty solid phase")
            object.__setattr__(self, "zs_measure", self.cell.measures.zs)
            object.__setattr__(self, "gamma_measure", self.cell.measures.gamma)
        elif self.zs_measure == 0:
            raise ValueError(f"regime {self.regime.name} needs |Z_s| > 0")


@dataclass(frozen=True, eq=False)
class TransportState:
    c_f: np.ndarray  # (N, N, 2nz)
    c_s: np.ndarray  # (N, N) or (N*N, m) in regime ONE
    t: float = 0.0


@dataclass(frozen=True)
class StepReport:
    fluid_exchange: float  # change of fluid mass due to the Sigma source
    solid_exchange: float  # change of solid mass due to the reaction
    mass_before: float
    mass_after: float

    @property
    def exchange_defect(self) -> float:
        return self.fluid_exchange + self.solid_exchange


def _face_velocity(grid: BulkGrid, velocity):
    if velocity is None:
        z = np.zeros(grid.cell_shape)
        return z, z, np.zeros(grid.w_shape)
    if isinstance(velocity, FlowState):
        return velocity.u, velocity.v, velocity.w
    u, v, w = velocity
    return np.asarray(u, float), np.asarray(v, float), np.asarray(w, float)


class TransportModel:
    """Operators for one grid/config pair; reused across steps."""

    def __init__(self, grid: BulkGrid, config: TransportConfig, diffusion_tol: float = 1e-13):
        self.grid = grid
        self.config = config
        self.tol = diffusion_tol
        n, L = grid.n_sigma, grid.layers
        V = grid.cell_volume
        ids = np.arange(n * n * L).reshape(grid.cell_shape)
        a_list, b_list, c_list = [], [], []
        for axis, coef in ((0, grid.hz), (1, grid.hz)):
            a_list.append(ids.ravel())
            b_list.append(np.roll(ids, -1, axis=axis).ravel())
            c_list.append(np.full(ids.size, coef))
        a_list.append(ids[:, :, :-1].ravel())
        b_list.append(ids[:, :, 1:].ravel())
        c_list.append(np.full(ids[:, :, :-1].size, grid.hx**2 / grid.hz))
        self._fluid_lap = _graph_laplacian(np.concatenate(a_list), np.concatenate(b_list), np.concatenate(c_list), ids.size)
        self._fluid_op = (sparse.identity(ids.size) * V + config.dt * config.D_f * self._fluid_lap).tocsr()

        self._sigma_op = None
        if config.regime is Regime.MINUS_ONE and np.any(config.D_star):
            self._sigma_op = (
                sparse.identity(n * n) * (config.zs_measure * grid.hx**2) + config.dt * _tensor_laplacian(n, grid.hx, config.D_star)
            ).tocsr()

        self._cell = None
        if config.regime is Regime.ONE:
            cell = config.cell
            op = _solid_operator(cell)
            local = np.full(cell.phase.size, -1, dtype=np.int64)
            local[op.voxels] = np.arange(len(op.voxels))
            gvox = local[gamma_solid_voxels(cell)]
            h = cell.h
            self._cell = dict(
                m=len(op.voxels),
                gvox=gvox,
                h=h,
                op=(sparse.identity(len(op.voxels)) * h**3 + config.dt * config.D_s * op.lap).tocsr(),
            )

    # -- measures -------------------------------------------------------
    def fluid_mass(self, state: TransportState) -> float:
        return self.grid.cell_volume * math.fsum(state.c_f.ravel())

    def solid_mass(self, state: TransportState) -> float:
        area = self.grid.hx**2
        if self.config.regime is Regime.ONE:
            return area * self._cell["h"] ** 3 * math.fsum(state.c_s.ravel())
        return area * self.config.zs_measure * math.fsum(state.c_s.ravel())

    def total_mass(self, state: TransportState) -> float:
        return self.fluid_mass(state) + self.solid_mass(state)

    def sigma_trace(self, c_f: np.ndarray) -> np.ndarray:
        nz = self.grid.nz
        return 0.5 * (c_f[:, :, nz - 1] + c_f[:, :, nz])

    # -- construction ---------------------------------------------------
    def initial_state(self, c_f, c_s) -> TransportState:
        g = self.grid
        cf = np.broadcast_to(np.asarray(c_f, dtype=float), g.cell_shape).copy()
        if self.config.regime is Regime.ONE:
            shape = (g.n_sigma**2, self._cell["m"])
        else:
            shape = (g.n_sigma, g.n_sigma)
        cs = np.broadcast_to(np.asarray(c_s, dtype=float), shape).copy()
        return TransportState(cf, cs, 0.0)

    # -- solid ----------------------------------------------------------
    def step_solid(self, state: TransportState) -> tuple[np.ndarray, np.ndarray, float]:
        """Return (new c_s, exchange density X on Sigma, solid mass gained by reaction)."""
        a = self.sigma_trace(state.c_f)
        area = self.grid.hx**2
        if self.config.regime is Regime.ONE:
            cs, X, gained = self._step_cell(state, a)
            return cs, X, area * gained
        cs, X = self._react(a, state.c_s)
        gained = area * self.config.zs_measure * math.fsum((cs - state.c_s).ravel())
        if self.config.regime is Regime.MINUS_ONE and self._sigma_op is not None:
            cs = self._diffuse_sigma(cs)
        return cs, X, gained

    def _react(self, a: np.ndarray, c: np.ndarray):
        """Implicit Euler for |Z_s| dc/dt = |Gamma| h(a, c), pointwise."""
        cfg = self.config
        kin, dt, zs, gam = cfg.kinetics, cfg.dt, cfg.zs_measure, cfg.gamma_measure
        if kin.variant is Variant.ZERO or gam == 0:
            return c.copy(), np.zeros_like(c)
        c_new = _implicit_reaction(kin, a, c, dt * gam / zs)
        X = gam * eval_h(kin, a, c_new)
        # the stored update uses the sampled X itself so both sides see one sample
        return c + dt * X / zs, X

    def _diffuse_sigma(self, cs: np.ndarray) -> np.ndarray:
        zs = self.config.zs_measure * self.grid.hx**2
        rhs = zs * cs.ravel()
        x = cg_solve(self._sigma_op, rhs, tol=self.tol, x0=cs.ravel(), relative=True)
        x += (math.fsum(rhs) - math.fsum(zs * x)) / (zs * x.size)
        return x.reshape(cs.shape)

    def _step_cell(self, state: TransportState, a: np.ndarray):
        cfg = self.config
        cell = self._cell
        h = cell["h"]
        cs = state.c_s
        if cfg.kinetics.variant is Variant.ZERO:
            return cs.copy(), np.zeros_like(a), 0.0
        gvox = cell["gvox"]
        rates = eval_h(cfg.kinetics, a.reshape(-1, 1), cs[:, gvox]) * h**2  # (points, faces)
        src = np.zeros_like(cs)
        for p in range(cs.shape[0]):
            src[p] = np.bincount(gvox, weights=rates[p], minlength=cell["m"])
        X = src.sum(axis=1)
        rhs = (h**3 * cs + cfg.dt * src).T
        x = cg_solve(cell["op"], rhs, tol=self.tol, x0=cs.T, relative=True).T
        target = h**3 * cs.sum(axis=1) + cfg.dt * X
        x += ((target - h**3 * x.sum(axis=1)) / (h**3 * cell["m"]))[:, None]
        return x, X.reshape(a.shape), cfg.dt * math.fsum(src.ravel())

    # -- fluid ----------------------------------------------------------
    def check_cfl(self, velocity) -> float:
        g = self.grid
        u, v, w = _face_velocity(g, velocity)
        w = w.copy()
        w[:, :, 0] = w[:, :, -1] = 0.0
        out = (
            np.maximum(np.roll(u, -1, 0), 0) + np.maximum(-u, 0) + np.maximum(np.roll(v, -1, 1), 0) + np.maximum(-v, 0)
        ) / g.hx + (np.maximum(w[:, :, 1:], 0) + np.maximum(-w[:, :, :-1], 0)) / g.hz
        cfl = float(self.config.dt * out.max(initial=0.0))
        if cfl > 1.0:
            raise CFLError(f"advective CFL number {cfl:.3f} exceeds 1; reduce dt")
        return cfl

    def step_fluid(self, state: TransportState, velocity, X: np.ndarray) -> tuple[np.ndarray, float]:
        """Upwind advection and Sigma source (explicit), then implicit diffusion."""
        g = self.grid
        dt = self.config.dt
        c = state.c_f
        V = g.cell_volume
        mass0 = self.fluid_mass(state)
        new = c.copy()
        if velocity is not None:
            self.check_cfl(velocity)
            new -= dt * _upwind_divergence(g, c, velocity)
        nz = g.nz
        dc = -dt * X / (2 * g.hz)
        new[:, :, nz - 1] += dc
        new[:, :, nz] += dc
        # sink actually applied to the two Sigma layers
        exchange = V * math.fsum(np.concatenate([np.ravel(dc), np.ravel(dc)]))
        rhs = V * new.ravel()
        x = cg_solve(self._fluid_op, rhs, tol=self.tol, x0=new.ravel(), relative=True)
        # CG leaves O(tol) mass error; the exact mass is known, so restore it
        x += (mass0 + exchange - V * math.fsum(x)) / (V * x.size)
        out = x.reshape(c.shape)
        if not np.all(np.isfinite(out)):
            raise SolverError("non-finite fluid concentration", float("nan"))
        return out, exchange

    # -- composition ----------------------------------------------------
    def coupled_step(self, state: TransportState, velocity=None) -> tuple[TransportState, StepReport]:
        m0 = self.total_mass(state)
        s_mass0 = self.solid_mass(state)
        cs, X, solid_ex = self.step_solid(state)
        cf, fluid_ex = self.step_fluid(state, velocity, X)
        new = TransportState(cf, cs, state.t + self.config.dt)
        if not np.all(np.isfinite(cs)):
            raise SolverError("non-finite solid concentration", float("nan"))
        report = StepReport(fluid_ex, solid_ex, m0, self.total_mass(new))
        logger.debug("step t=%.4g solid mass %.6e -> %.6e", new.t, s_mass0, self.solid_mass(new))
        return new, report


def _graph_laplacian(a, b, coef, n) -> sparse.csr_matrix:
    rows = np.concatenate([a, b, a, b])
    cols = np.concatenate([a, b, b, a])
    vals = np.concatenate([coef, coef, -coef, -coef])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _tensor_laplacian(n: int, hx: float, D: np.ndarray) -> sparse.csr_matrix:
    """Area-weighted -div(D grad) on the periodic Sigma grid.

    Diagonal coefficients use face differences; the cross coefficient uses
    gradients averaged to cell vertices.  Face gradients dominate the vertex
    averages, so the operator is positive semidefinite for any PSD ``D``.
    """
    ids = np.arange(n * n).reshape(n, n)
    a1, b1 = ids.ravel(), np.roll(ids, -1, 0).ravel()
    a2, b2 = ids.ravel(), np.roll(ids, -1, 1).ravel()
    ones = np.ones(n * n)
    L = D[0, 0] * _graph_laplacian(a1, b1, ones, n * n) + D[1, 1] * _graph_laplacian(a2, b2, ones, n * n)
    if D[0, 1] != 0:
        # vertex gradients from the 2x2 block of cells (i-1..i, j-1..j)
        im, jm = np.roll(ids, 1, 0), np.roll(ids, 1, 1)
        imm = np.roll(im, 1, 1)
        rows = np.arange(n * n)
        gx = sparse.csr_matrix(
            (np.tile([0.5, 0.5, -0.5, -0.5], n * n),
             (np.repeat(rows, 4), np.column_stack([ids.ravel(), jm.ravel(), im.ravel(), imm.ravel()]).ravel())),
            shape=(n * n, n * n),
        )
        gy = sparse.csr_matrix(
            (np.tile([0.5, 0.5, -0.5, -0.5], n * n),
             (np.repeat(rows, 4), np.column_stack([ids.ravel(), im.ravel(), jm.ravel(), imm.ravel()]).ravel())),
            shape=(n * n, n * n),
        )
        L = L + D[0, 1] * (gx.T @ gy + gy.T @ gx)
    # gradients are differences / hx and the cell area is hx^2, so hx cancels
    return L.tocsr()


def _upwind_divergence(grid: BulkGrid, c: np.ndarray, velocity) -> np.ndarray:
    u, v, w = _face_velocity(grid, velocity)
    # x faces: face i sits between cells i-1 and i
    cm = np.roll(c, 1, axis=0)
    fx = np.where(u > 0, u * cm, u * c)
    cm = np.roll(c, 1, axis=1)
    fy = np.where(v > 0, v * cm, v * c)
    fz = np.zeros(grid.w_shape)
    wi = w[:, :, 1:-1]
    fz[:, :, 1:-1] = np.where(wi > 0, wi * c[:, :, :-1], wi * c[:, :, 1:])
    return (
        (np.roll(fx, -1, 0) - fx) / grid.hx + (np.roll(fy, -1, 1) - fy) / grid.hx + (fz[:, :, 1:] - fz[:, :, :-1]) / grid.hz
    )


def _implicit_reaction(kin: KineticsSpec, a, c, lam, max_iter: int = 100):
    """Solve c_new - c - lam h(a, c_new) = 0 pointwise (safeguarded Newton).

    The residual is strictly increasing in c_new (h is non-increasing in its
    second argument), and the root lies between c and c + lam h(a, c).
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    step0 = lam * eval_h(kin, a, c)
    lo = np.minimum(c, c + step0)
    hi = np.maximum(c, c + step0)
    x = c + step0 / (1.0 - lam * kin.d_db(a, c))
    x = np.clip(x, lo, hi)
    scale = 1.0 + np.abs(c) + np.abs(step0)
    for _ in range(max_iter):
        f = x - c - lam * eval_h(kin, a, x)
        done = np.abs(f) <= 4e-16 * scale
        if done.all():
            return x
        lo = np.where(f < 0, x, lo)
        hi = np.where(f > 0, x, hi)
        xn = x - f / (1.0 - lam * kin.d_db(a, x))
        bad = (xn <= lo) | (xn >= hi) | ~np.isfinite(xn)
        xn = np.where(bad, 0.5 * (lo + hi), xn)
        x = np.where(done, x, xn)
        if np.all(hi - lo <= 4e-16 * scale):
            return x
    raise SolverError("reaction Newton iteration did not converge", float(np.abs(f).max()))


def step_fluid(state: TransportState, velocity, model: TransportModel, X: np.ndarray) -> np.ndarray:
    return model.step_fluid(state, velocity, X)[0]


def step_solid_gamma_minus1(state: TransportState, model: TransportModel) -> np.ndarray:
    if model.config.regime is not Regime.MINUS_ONE:
        raise ValueError("model is not in regime MINUS_ONE")
    return model.step_solid(state)[0]


def step_solid_ode(state: TransportState, model: TransportModel) -> np.ndarray:
    if model.config.regime is not Regime.INTERMEDIATE:
        raise ValueError("model is not in regime INTERMEDIATE")
    return model.step_solid(state)[0]


def step_solid_gamma1(state: TransportState, model: TransportModel) -> np.ndarray:
    if model.config.regime is not Regime.ONE:
        raise ValueError("model is not in regime ONE")
    return model.step_solid(state)[0]


def total_mass(state: TransportState, model: TransportModel) -> float:
    return model.total_mass(state)


def field_stats(state: TransportState) -> dict:
    return {
        "c_f_min": float(state.c_f.min()),
        "c_f_max": float(state.c_f.max()),
        "c_s_min": float(state.c_s.min()),
        "c_s_max": float(state.c_s.max()),
    }


def advance(model: TransportModel, state: TransportState, nsteps: int, velocity=None):
    """Run ``nsteps`` coupled steps; yields (state, report) after each."""
    for _ in range(nsteps):
        state, rep = model.coupled_step(state, velocity)
        yield state, rep


def with_time(state: TransportState, t: float) -> TransportState:
    return replace(state, t=t)
