"""Interface exchange kinetics h(c_f, c_s), all globally Lipschitz."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc


class Variant(enum.Enum):
    LINEAR = "linear"
    SATURATING = "saturating"
    ZERO = "zero"


@dataclass(frozen=True)
class KineticsSpec:
    variant: Variant
    k: float = 0.0
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not isinstance(self.variant, Variant):
            object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("k", "k1", "k2"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"kinetic rate {name} must be finite and >= 0, got {val!r}")

    @classmethod
    def linear(cls, k: float) -> "KineticsSpec":
        return cls(Variant.LINEAR, k=float(k))

    @classmethod
    def saturating(cls, k1: float, k2: float) -> "KineticsSpec":
        return cls(Variant.SATURATING, k1=float(k1), k2=float(k2))

    @classmethod
    def zero(cls) -> "KineticsSpec":
        return cls(Variant.ZERO)

    @classmethod
    def from_dict(cls, d: dict) -> "KineticsSpec":
        v = Variant(d["variant"])
        if v is Variant.LINEAR:
            return cls.linear(d["k"])
        if v is Variant.SATURATING:
            return cls.saturating(d["k1"], d["k2"])
        return cls.zero()

    def to_dict(self) -> dict:
        if self.variant is Variant.LINEAR:
            return {"variant": "linear", "k": self.k}
        if self.variant is Variant.SATURATING:
            return {"variant": "saturating", "k1": self.k1, "k2": self.k2}
        return {"variant": "zero"}

    @property
    def lipschitz(self) -> float:
        """Analytic per-argument Lipschitz constant."""
        if self.variant is Variant.LINEAR:
            return self.k
        if self.variant is Variant.SATURATING:
            return max(self.k1, self.k2)
        return 0.0

    def d_db(self, a, b):
        """Partial derivative in the solid argument (used by Newton)."""
        b = np.asarray(b, dtype=float)
        if self.variant is Variant.LINEAR:
            return np.full(np.broadcast(np.asarray(a), b).shape, -self.k)
        if self.variant is Variant.SATURATING:
            return np.broadcast_to(-self.k2 / (1.0 + np.abs(b)) ** 2, np.broadcast(np.asarray(a), b).shape)
        return np.zeros(np.broadcast(np.asarray(a), b).shape)


def eval_h(spec: KineticsSpec, a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if spec.variant is Variant.LINEAR:
        out = spec.k * (a - b)
    elif spec.variant is Variant.SATURATING:
        out = spec.k1 * a / (1.0 + np.abs(a)) - spec.k2 * b / (1.0 + np.abs(b))
    else:
        out = np.zeros(np.broadcast(a, b).shape)
    return out if out.ndim else float(out)


def lipschitz_certificate(spec: KineticsSpec, samples: int = 256, bound: float = 10.0) -> float:
    """Largest per-argument difference quotient over a Sobol point set in [-bound, bound]^2.

    For each point pair along one coordinate (the other held fixed), the
    quotient |h(a,b) - h(a',b)| / |a - a'| is formed between neighbours in
    sorted order; the supremum over both arguments is returned.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    pts = qmc.Sobol(d=2, scramble=False).random(1 << int(np.ceil(np.log2(samples))))[:samples]
    pts = -bound + 2 * bound * pts
    best = 0.0
    for ax in (0, 1):
        x = np.sort(pts[:, ax])
        x = x[np.concatenate([[True], np.diff(x) > 0])]
        if len(x) < 2:
            continue
        for other in pts[:, 1 - ax]:
            fixed = np.full_like(x, other)
            vals = eval_h(spec, x, fixed) if ax == 0 else eval_h(spec, fixed, x)
            q = np.abs(np.diff(vals)) / np.diff(x)
            best = max(best, float(q.max()))
    return best
