"""
Transient Stokes flow in the bulk boxes Omega^- = Sigma x (-H, 0) and
Omega^+ = Sigma x (0, H), coupled across Sigma by the effective tensors.

Both boxes live on one MAC column grid with ``2 nz`` layers; Sigma is the
w-face level ``nz``.  The normal velocity on Sigma is a single unknown shared
by both sides.  Each side additionally carries tangential trace unknowns on
Sigma (``u_S``, ``v_S``) that close the one-sided shear strain in the half
cell next to the interface and feed the interface form

    sum over Sigma cells of area * X^T T X,   X = (v^+|_Sigma, v^-|_Sigma),
    T = [[K^+, M], [M, K^-]].

The viscous term is ``|E v|^2`` with sqrt-weighted strain rows.  Edges on the
top and bottom boundaries are left out, which realizes the stress-free
condition as the natural boundary condition of the discrete weak form.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import sparse

from .cell_flow import EffectiveFlowTensors, coercivity_margin, interface_form_matrix
from .linalg import SaddleSystem, SolverError, uzawa_solve
from .mac import RowBuilder

logger = logging.getLogger(__name__)

PLUS, MINUS = 0, 1


@dataclass(frozen=True)
class BulkGrid:
    n_sigma: int
    nz: int  # layers per box
    H: float = 1.0
    length: float = 1.0  # lateral period of Sigma

    def __post_init__(self):
        if self.n_sigma < 2 or self.nz < 1 or not self.H > 0 or not self.length > 0:
            raise ValueError(f"invalid bulk grid {self}")

    @property
    def hx(self) -> float:
        return self.length / self.n_sigma

    @property
    def hz(self) -> float:
        return self.H / self.nz

    @property
    def layers(self) -> int:
        return 2 * self.nz

    @property
    def cell_volume(self) -> float:
        return self.hx**2 * self.hz

    @property
    def cell_shape(self) -> tuple[int, int, int]:
        return (self.n_sigma, self.n_sigma, self.layers)

    @property
    def w_shape(self) -> tuple[int, int, int]:
        return (self.n_sigma, self.n_sigma, self.layers + 1)

    def z_centers(self) -> np.ndarray:
        return -self.H + (np.arange(self.layers) + 0.5) * self.hz


class InterfaceMode(enum.Enum):
    COUPLED = "coupled"
    IMPERMEABLE = "impermeable"


@dataclass(frozen=True)
class InterfaceLaw:
    mode: InterfaceMode
    tensors: EffectiveFlowTensors | None = None
    psd_tol: float = 1e-12

    def __post_init__(self):
        if self.mode is InterfaceMode.COUPLED:
            if self.tensors is None:
                raise ValueError("COUPLED interface law needs effective tensors")
            T = interface_form_matrix(self.tensors)
            margin = coercivity_margin(self.tensors)
            scale = 1.0 + float(np.abs(T).max())
            if margin < -self.psd_tol * scale:
                raise ValueError(f"interface tensors are not coercive (margin {margin:.3e})")
            if margin <= self.psd_tol * scale:
                warnings.warn(
                    f"interface tensors are only semidefinite (margin {margin:.3e}); energy still decays"
                )

    @property
    def margin(self) -> float | None:
        return None if self.tensors is None else coercivity_margin(self.tensors)


@dataclass(frozen=True)
class Forcing:
    """Constant body force per box, optionally ramped linearly up to ``ramp_time``."""

    f_plus: tuple = (0.0, 0.0, 0.0)
    f_minus: tuple = (0.0, 0.0, 0.0)
    ramp_time: float = 0.0

    def factor(self, t: float) -> float:
        if self.ramp_time <= 0:
            return 1.0
        return min(1.0, max(0.0, t / self.ramp_time))

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.f_plus) or np.any(self.f_minus))


@dataclass(frozen=True, eq=False)
class FlowState:
    grid: BulkGrid
    u: np.ndarray  # (N, N, 2nz) at x = i hx
    v: np.ndarray
    w: np.ndarray  # (N, N, 2nz + 1); level nz is Sigma
    u_trace: np.ndarray  # (2, N, N): [PLUS], [MINUS] tangential traces on Sigma
    v_trace: np.ndarray
    p: np.ndarray  # (N, N, 2nz)
    t: float = 0.0

    @classmethod
    def zero(cls, grid: BulkGrid, t: float = 0.0) -> "FlowState":
        n = grid.n_sigma
        return cls(
            grid,
            np.zeros(grid.cell_shape),
            np.zeros(grid.cell_shape),
            np.zeros(grid.w_shape),
            np.zeros((2, n, n)),
            np.zeros((2, n, n)),
            np.zeros(grid.cell_shape),
            t,
        )

    def box(self, side: int):
        """Velocity faces of one box as (u, v, w) views."""
        nz = self.grid.nz
        if side == PLUS:
            return self.u[:, :, nz:], self.v[:, :, nz:], self.w[:, :, nz:]
        return self.u[:, :, :nz], self.v[:, :, :nz], self.w[:, :, : nz + 1]

    @property
    def v_plus(self):
        return self.box(PLUS)

    @property
    def v_minus(self):
        return self.box(MINUS)

    @property
    def p_plus(self) -> np.ndarray:
        return self.p[:, :, self.grid.nz :]

    @property
    def p_minus(self) -> np.ndarray:
        return self.p[:, :, : self.grid.nz]


@dataclass(frozen=True, eq=False)
class _Layout:
    iu: np.ndarray
    iv: np.ndarray
    iw: np.ndarray
    ius: np.ndarray
    ivs: np.ndarray
    n: int


def _layout(grid: BulkGrid, mode: InterfaceMode) -> _Layout:
    n, L, nz = grid.n_sigma, grid.layers, grid.nz
    counter = [0]

    def take(shape, fixed=None):
        idx = np.full(shape, -1, dtype=np.int64)
        free = np.ones(shape, dtype=bool) if fixed is None else ~fixed
        k = int(free.sum())
        idx[free] = counter[0] + np.arange(k)
        counter[0] += k
        return idx

    iu = take((n, n, L))
    iv = take((n, n, L))
    wfixed = np.zeros((n, n, L + 1), dtype=bool)
    if mode is InterfaceMode.IMPERMEABLE:
        wfixed[:, :, nz] = True
        ius = np.full((2, n, n), -1, dtype=np.int64)
        ivs = np.full((2, n, n), -1, dtype=np.int64)
        iw = take((n, n, L + 1), wfixed)
    else:
        iw = take((n, n, L + 1), wfixed)
        ius = take((2, n, n))
        ivs = take((2, n, n))
    return _Layout(iu, iv, iw, ius, ivs, counter[0])


def _strain_operator(grid: BulkGrid, lay: _Layout) -> sparse.csr_matrix:
    n, L, nz = grid.n_sigma, grid.layers, grid.nz
    hx, hz, V = grid.hx, grid.hz, grid.cell_volume
    rb = RowBuilder(lay.n)
    I, J, K = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), np.arange(L), indexing="ij"))
    ip, jp, im, jm = (I + 1) % n, (J + 1) % n, (I - 1) % n, (J - 1) % n
    s = math.sqrt(V)

    for hi, lo, hstep in (
        (lay.iu[ip, J, K], lay.iu[I, J, K], hx),
        (lay.iv[I, jp, K], lay.iv[I, J, K], hx),
        (lay.iw[I, J, K + 1], lay.iw[I, J, K], hz),
    ):
        rows = rb.new_rows(len(I))
        rb.add(rows, hi, s / hstep)
        rb.add(rows, lo, -s / hstep)

    # xy shear on vertical edges
    c = math.sqrt(2 * V) * 0.5 / hx
    rows = rb.new_rows(len(I))
    rb.add(rows, lay.iu[I, J, K], c)
    rb.add(rows, lay.iu[I, jm, K], -c)
    rb.add(rows, lay.iv[I, J, K], c)
    rb.add(rows, lay.iv[im, J, K], -c)

    # xz / yz shear on interior horizontal edges
    I2, J2, K2 = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), np.arange(1, L), indexing="ij"))
    keep = K2 != nz
    I2, J2, K2 = I2[keep], J2[keep], K2[keep]
    for tang, (pi, pj) in ((lay.iu, ((I2 - 1) % n, J2)), (lay.iv, (I2, (J2 - 1) % n))):
        rows = rb.new_rows(len(I2))
        rb.add(rows, tang[I2, J2, K2], math.sqrt(2 * V) * 0.5 / hz)
        rb.add(rows, tang[I2, J2, K2 - 1], -math.sqrt(2 * V) * 0.5 / hz)
        rb.add(rows, lay.iw[I2, J2, K2], math.sqrt(2 * V) * 0.5 / hx)
        rb.add(rows, lay.iw[pi, pj, K2], -math.sqrt(2 * V) * 0.5 / hx)

    # half edges on either side of Sigma, closed by the trace unknowns
    I3, J3 = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), indexing="ij"))
    ch = math.sqrt(V) * 0.5  # sqrt(2 * V / 2) * 1/2
    for tang, trace, (pi, pj) in (
        (lay.iu, lay.ius, ((I3 - 1) % n, J3)),
        (lay.iv, lay.ivs, (I3, (J3 - 1) % n)),
    ):
        for side, inner, sign in ((PLUS, nz, 1.0), (MINUS, nz - 1, -1.0)):
            rows = rb.new_rows(len(I3))
            rb.add(rows, tang[I3, J3, inner], sign * ch * 2 / hz)
            rb.add(rows, trace[side, I3, J3], -sign * ch * 2 / hz)
            rb.add(rows, lay.iw[I3, J3, nz], ch / hx)
            rb.add(rows, lay.iw[pi, pj, nz], -ch / hx)
    return rb.tocsr()


def _trace_operator(grid: BulkGrid, lay: _Layout) -> sparse.csr_matrix:
    """Rows (cell-major, 6 per Sigma cell): cell-centred (v^+|_Sigma, v^-|_Sigma)."""
    n, nz = grid.n_sigma, grid.nz
    rb = RowBuilder(lay.n)
    I, J = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), indexing="ij"))
    ncell = len(I)
    base = 6 * np.arange(ncell)
    rb.nrows = 6 * ncell
    for side, off in ((PLUS, 0), (MINUS, 3)):
        rb.add(base + off, lay.ius[side, I, J], 0.5)
        rb.add(base + off, lay.ius[side, (I + 1) % n, J], 0.5)
        rb.add(base + off + 1, lay.ivs[side, I, J], 0.5)
        rb.add(base + off + 1, lay.ivs[side, I, (J + 1) % n], 0.5)
        rb.add(base + off + 2, lay.iw[I, J, nz], 1.0)
    return rb.tocsr()


def _divergence(grid: BulkGrid, lay: _Layout) -> sparse.csr_matrix:
    n, L = grid.n_sigma, grid.layers
    rb = RowBuilder(lay.n)
    I, J, K = (a.ravel() for a in np.meshgrid(np.arange(n), np.arange(n), np.arange(L), indexing="ij"))
    rows = rb.new_rows(len(I))
    for hi, lo, hstep in (
        (lay.iu[(I + 1) % n, J, K], lay.iu[I, J, K], grid.hx),
        (lay.iv[I, (J + 1) % n, K], lay.iv[I, J, K], grid.hx),
        (lay.iw[I, J, K + 1], lay.iw[I, J, K], grid.hz),
    ):
        rb.add(rows, hi, 1.0 / hstep)
        rb.add(rows, lo, -1.0 / hstep)
    return rb.tocsr()


def _face_masses(grid: BulkGrid):
    """Per-face mass split into the part in Omega^+ and in Omega^-."""
    V, nz, L = grid.cell_volume, grid.nz, grid.layers
    plus_c = np.zeros(grid.cell_shape)
    plus_c[:, :, nz:] = V
    minus_c = V - plus_c
    wp = np.zeros(grid.w_shape)
    wm = np.zeros(grid.w_shape)
    wp[:, :, nz + 1 : L] = V
    wp[:, :, nz] = wp[:, :, L] = V / 2
    wm[:, :, 1:nz] = V
    wm[:, :, nz] = wm[:, :, 0] = V / 2
    return plus_c, minus_c, wp, wm


@dataclass(frozen=True, eq=False)
class FlowSystem:
    grid: BulkGrid
    law: InterfaceLaw
    dt: float
    forcing: Forcing
    layout: _Layout = field(repr=False)
    A: sparse.csr_matrix = field(repr=False)
    B: sparse.csr_matrix = field(repr=False)
    divergence: sparse.csr_matrix = field(repr=False)
    mass: np.ndarray = field(repr=False)
    force_plus: np.ndarray = field(repr=False)  # mass-weighted unit forces, (3, n)
    force_minus: np.ndarray = field(repr=False)
    viscous: sparse.csr_matrix = field(repr=False)
    interface: sparse.csr_matrix = field(repr=False)

    def pack(self, state: FlowState) -> np.ndarray:
        lay = self.layout
        x = np.zeros(lay.n)
        for idx, arr in ((lay.iu, state.u), (lay.iv, state.v), (lay.iw, state.w), (lay.ius, state.u_trace), (lay.ivs, state.v_trace)):
            m = idx >= 0
            x[idx[m]] = arr[m]
        return x

    def unpack(self, x: np.ndarray, p: np.ndarray, t: float) -> FlowState:
        lay = self.layout
        out = []
        for idx in (lay.iu, lay.iv, lay.iw, lay.ius, lay.ivs):
            arr = np.zeros(idx.shape)
            m = idx >= 0
            arr[m] = x[idx[m]]
            out.append(arr)
        return FlowState(self.grid, *out, p=p.reshape(self.grid.cell_shape), t=t)

    def rhs(self, state: FlowState) -> np.ndarray:
        t1 = state.t + self.dt
        fac = self.forcing.factor(t1)
        f = self.mass * self.pack(state) / self.dt
        f = f + fac * (np.asarray(self.forcing.f_plus, float) @ self.force_plus)
        f = f + fac * (np.asarray(self.forcing.f_minus, float) @ self.force_minus)
        return f

    def saddle(self, state: FlowState) -> SaddleSystem:
        return SaddleSystem(
            A=self.A,
            B=self.B,
            f=self.rhs(state),
            g=np.zeros(self.B.shape[0]),
            mean_constraint=False,
            pressure_mass=np.full(self.B.shape[0], self.grid.cell_volume),
        )


def assemble_flow_system(grid: BulkGrid, law: InterfaceLaw, dt: float, forcing: Forcing | None = None) -> FlowSystem:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt!r}")
    forcing = forcing or Forcing()
    lay = _layout(grid, law.mode)
    E = _strain_operator(grid, lay)
    visc = (E.T @ E).tocsr()
    if law.mode is InterfaceMode.COUPLED:
        P = _trace_operator(grid, lay)
        T = interface_form_matrix(law.tensors) * grid.hx**2
        T = 0.5 * (T + T.T)
        blocks = sparse.kron(sparse.identity(grid.n_sigma**2, format="csr"), sparse.csr_matrix(T), format="csr")
        itf = (P.T @ blocks @ P).tocsr()
    else:
        itf = sparse.csr_matrix((lay.n, lay.n))

    plus_c, minus_c, wp, wm = _face_masses(grid)
    mass = np.zeros(lay.n)
    fp = np.zeros((3, lay.n))
    fm = np.zeros((3, lay.n))
    for comp, idx, mp, mm in ((0, lay.iu, plus_c, minus_c), (1, lay.iv, plus_c, minus_c), (2, lay.iw, wp, wm)):
        m = idx >= 0
        mass[idx[m]] = mp[m] + mm[m]
        fp[comp, idx[m]] = mp[m]
        fm[comp, idx[m]] = mm[m]
    A = (sparse.diags(mass / dt) + visc + itf).tocsr()
    D = _divergence(grid, lay)
    B = (-grid.cell_volume * D).tocsr()
    return FlowSystem(grid, law, float(dt), forcing, lay, A, B, D, mass, fp, fm, visc, itf)


def step_flow(state: FlowState, system: FlowSystem, tol: float = 1e-10) -> FlowState:
    """One implicit-Euler step; the emitted state has max |div v| <= 10 tol."""
    if state.grid != system.grid:
        raise ValueError("state and system use different grids")
    sad = system.saddle(state)
    if not np.any(sad.f):
        return FlowState.zero(system.grid, state.t + system.dt)
    # the solver controls a mass-weighted L2 divergence; tighten it to bound the max norm
    inner = tol * min(1.0, math.sqrt(system.grid.cell_volume)) * 0.1
    res = uzawa_solve(sad, tol=inner, p0=state.p.ravel())
    div = float(np.abs(system.divergence @ res.u).max(initial=0.0))
    if div > 10 * tol:
        raise SolverError(f"divergence {div:.3e} exceeds 10 tol", res.momentum_residual, div)
    return system.unpack(res.u, res.p, state.t + system.dt)


def interface_traces(state: FlowState) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centred traces on Sigma, each (N, N, 3); the normal entries share one array."""
    nz = state.grid.nz
    wS = state.w[:, :, nz]
    out = []
    for side in (PLUS, MINUS):
        ut = 0.5 * (state.u_trace[side] + np.roll(state.u_trace[side], -1, axis=0))
        vt = 0.5 * (state.v_trace[side] + np.roll(state.v_trace[side], -1, axis=1))
        out.append(np.stack([ut, vt, wS], axis=-1))
    return out[0], out[1]


def kinetic_energy(state: FlowState) -> float:
    plus_c, minus_c, wp, wm = _face_masses(state.grid)
    mc = plus_c + minus_c
    mw = wp + wm
    return 0.5 * math.fsum(
        np.concatenate([(mc * state.u**2).ravel(), (mc * state.v**2).ravel(), (mw * state.w**2).ravel()])
    )


def max_divergence(state: FlowState) -> float:
    g = state.grid
    d = (
        (np.roll(state.u, -1, axis=0) - state.u) / g.hx
        + (np.roll(state.v, -1, axis=1) - state.v) / g.hx
        + (state.w[:, :, 1:] - state.w[:, :, :-1]) / g.hz
    )
    return float(np.abs(d).max())


def sigma_normal_flux(state: FlowState) -> float:
    return state.grid.hx**2 * math.fsum(state.w[:, :, state.grid.nz].ravel())


def darcy_field(tensors: EffectiveFlowTensors, state: FlowState) -> np.ndarray:
    """Darcy velocity in every Sigma cell, (N, N, 3)."""
    tp, tm = interface_traces(state)
    out = tp @ tensors.Q_plus.T + tm @ tensors.Q_minus.T
    out[..., 2] += (2.0 / tensors.zf_measure) * tp[..., 2]
    return out


def random_divergence_free(grid: BulkGrid, mode: InterfaceMode, seed: int = 0, tol: float = 1e-10) -> FlowState:
    """Mass-orthogonal projection of a random face field onto discretely solenoidal fields."""
    rng = np.random.default_rng(seed)
    lay = _layout(grid, mode)
    plus_c, minus_c, wp, wm = _face_masses(grid)
    mass = np.zeros(lay.n)
    for idx, mp in ((lay.iu, plus_c + minus_c), (lay.iv, plus_c + minus_c), (lay.iw, wp + wm)):
        m = idx >= 0
        mass[idx[m]] = mp[m]
    # traces carry no mass; give them a nominal weight so the projection is well posed
    mass[mass == 0] = grid.cell_volume
    r = rng.standard_normal(lay.n)
    D = _divergence(grid, lay)
    sad = SaddleSystem(
        A=sparse.diags(mass).tocsr(),
        B=(-grid.cell_volume * D).tocsr(),
        f=mass * r,
        g=np.zeros(D.shape[0]),
        pressure_mass=np.full(D.shape[0], grid.cell_volume),
    )
    res = uzawa_solve(sad, tol=tol * math.sqrt(grid.cell_volume) * 0.1)
    dummy = FlowSystem(grid, InterfaceLaw(InterfaceMode.IMPERMEABLE), 1.0, Forcing(), lay, None, None, D, mass, None, None, None, None)
    return dummy.unpack(res.u, np.zeros(grid.cell_shape), 0.0)


@dataclass
class FlowRun:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    darcy_mean: list = field(default_factory=list)
    trace_mean: list = field(default_factory=list)


def run_flow(
    grid: BulkGrid,
    law: InterfaceLaw,
    forcing: Forcing | None,
    T: float,
    dt: float,
    tol: float = 1e-10,
    initial: FlowState | None = None,
    cadence: int = 1,
    on_step: Callable[[int, FlowState], None] | None = None,
) -> FlowRun:
    """Implicit-Euler run to time ``T``; keeps every ``cadence``-th state."""
    if T < 0:
        raise ValueError("final time must be non-negative")
    system = assemble_flow_system(grid, law, dt, forcing)
    state = initial if initial is not None else FlowState.zero(grid)
    nsteps = int(round(T / dt))
    if nsteps and abs(nsteps * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not a multiple of dt={dt}")
    out = FlowRun()

    def record(s: FlowState):
        out.times.append(s.t)
        out.states.append(s)
        out.energy.append(kinetic_energy(s))
        tp, tm = interface_traces(s)
        out.trace_mean.append((tp.mean(axis=(0, 1)), tm.mean(axis=(0, 1))))
        if law.tensors is not None:
            out.darcy_mean.append(darcy_field(law.tensors, s).mean(axis=(0, 1)))

    record(state)
    for n in range(1, nsteps + 1):
        state = step_flow(state, system, tol)
        if on_step is not None:
            on_step(n, state)
        if n % cadence == 0 or n == nsteps:
            record(state)
    return out


def with_time(state: FlowState, t: float) -> FlowState:
    return replace(state, t=t)
