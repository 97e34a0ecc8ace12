"""
Staggered (MAC) layout helpers shared by the cell and bulk Stokes assemblies.

Face values are addressed by *generalized columns*: every face maps either to
one column (a free unknown or a boundary-data slot) with coefficient one, or
to nothing (value zero).  Strain rows are then plain sparse combinations of
columns, which keeps the discrete symmetric-gradient form exactly the same
object in the solve and in any post-processing integral.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

FREE = 0
DATA = 1
WALL = 2  # value fixed to zero, no ghost
SOLID = 3  # inside an obstacle; mirrored across the neighbouring edge


class RowBuilder:
    """Accumulates COO triplets row by row (vectorized)."""

    def __init__(self, ncols: int):
        self.ncols = ncols
        self.nrows = 0
        self._r: list[np.ndarray] = []
        self._c: list[np.ndarray] = []
        self._v: list[np.ndarray] = []

    def new_rows(self, count: int) -> np.ndarray:
        rows = np.arange(self.nrows, self.nrows + count)
        self.nrows += count
        return rows

    def add(self, rows, cols, vals) -> None:
        rows = np.broadcast_to(rows, np.shape(cols))
        vals = np.broadcast_to(vals, np.shape(cols)).astype(float)
        keep = (np.asarray(cols) >= 0) & (vals != 0.0)
        self._r.append(np.asarray(rows)[keep])
        self._c.append(np.asarray(cols)[keep])
        self._v.append(vals[keep])

    def tocsr(self) -> sparse.csr_matrix:
        if self._r:
            r = np.concatenate(self._r)
            c = np.concatenate(self._c)
            v = np.concatenate(self._v)
        else:
            r = c = np.zeros(0, dtype=np.int64)
            v = np.zeros(0)
        return sparse.csr_matrix((v, (r, c)), shape=(self.nrows, self.ncols))


@dataclass
class FaceTable:
    """Per-face status and generalized column for one velocity component."""

    status: np.ndarray
    col: np.ndarray


def tangential_difference(
    rb: RowBuilder,
    rows: np.ndarray,
    scale: np.ndarray,
    hi: FaceTable,
    hi_idx: tuple,
    lo: FaceTable,
    lo_idx: tuple,
) -> None:
    """Add ``scale * (val(hi) - val(lo))`` with mirror ghosts for SOLID faces.

    A SOLID face takes minus the value of its partner (wall on the shared
    edge).  Both SOLID gives zero.
    """
    sh = hi.status[hi_idx]
    sl = lo.status[lo_idx]
    ch = hi.col[hi_idx]
    cl = lo.col[lo_idx]
    hi_solid = sh == SOLID
    lo_solid = sl == SOLID
    # coefficient on val(hi) and val(lo) after substituting ghosts
    a_hi = np.where(hi_solid, 0.0, np.where(lo_solid, 2.0, 1.0))
    a_lo = np.where(lo_solid, 0.0, np.where(hi_solid, -2.0, -1.0))
    ch = np.where(hi_solid | (sh == WALL), -1, ch)
    cl = np.where(lo_solid | (sl == WALL), -1, cl)
    rb.add(rows, ch, scale * a_hi)
    rb.add(rows, cl, scale * a_lo)
