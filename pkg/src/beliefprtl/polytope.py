"""H-representation polytopes and LP feasibility tests."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import linprog

FEAS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Polytope:
    """The set ``{z : H z <= g}``."""

    H: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        g = np.asarray(self.g, dtype=float).reshape(-1)
        if H.shape[0] != g.size:
            raise ValueError("H and g have inconsistent row counts")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", g)

    @classmethod
    def box(cls, lower, upper) -> "Polytope":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = lower.size
        H = np.vstack([np.eye(n), -np.eye(n)])
        return cls(H, np.concatenate([upper, -lower]))

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def intersect(self, other: "Polytope") -> "Polytope":
        return Polytope(np.vstack([self.H, other.H]), np.concatenate([self.g, other.g]))

    def contains(self, z, tol: float = FEAS_TOL) -> bool:
        return bool(np.all(self.H @ np.asarray(z, dtype=float) <= self.g + tol))

    @cached_property
    def _violation(self) -> tuple[float, np.ndarray | None]:
        return min_violation(self.H, self.g)

    def is_empty(self) -> bool:
        return self._violation[0] > FEAS_TOL

    def feasible_point(self) -> np.ndarray | None:
        return None if self.is_empty() else self._violation[1]

    @cached_property
    def bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Axis-aligned bounding box, or None for an empty polytope."""
        if self.is_empty():
            return None
        n = self.dim
        lo = np.empty(n)
        hi = np.empty(n)
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            for sign, out in ((1.0, lo), (-1.0, hi)):
                res = linprog(sign * e, A_ub=self.H, b_ub=self.g + FEAS_TOL,
                              bounds=[(None, None)] * n, method="highs")
                if res.status != 0:
                    raise ValueError("polytope is unbounded or numerically infeasible")
                out[i] = sign * res.fun
        return lo, hi


def min_violation(H: np.ndarray, g: np.ndarray) -> tuple[float, np.ndarray | None]:
    """Phase-1 LP: smallest uniform slack ``t >= 0`` with ``H z - t <= g``."""
    m, n = H.shape
    if m == 0:
        return 0.0, np.zeros(n)
    cost = np.zeros(n + 1)
    cost[-1] = 1.0
    A = np.hstack([H, -np.ones((m, 1))])
    res = linprog(cost, A_ub=A, b_ub=g, bounds=[(None, None)] * n + [(0.0, None)],
                  method="highs")
    if res.status != 0:
        raise ValueError(f"phase-1 LP failed: {res.message}")
    return float(res.x[-1]), res.x[:n]


def polytopes_intersect(p: Polytope, q: Polytope) -> bool:
    """True iff the joint half-space system is feasible (touching faces count)."""
    bp, bq = p.bounds, q.bounds
    if bp is None or bq is None:
        return False
    # disjoint bounding boxes settle the question without an LP
    if np.any(bp[1] < bq[0] - FEAS_TOL) or np.any(bq[1] < bp[0] - FEAS_TOL):
        return False
    return min_violation(np.vstack([p.H, q.H]), np.concatenate([p.g, q.g]))[0] <= FEAS_TOL


def chebyshev_radius(H: np.ndarray, g: np.ndarray, cap: float = 1e6) -> float:
    """Radius of the largest ball inside ``{z : H z <= g}`` (capped)."""
    m, n = H.shape
    norms = np.linalg.norm(H, axis=1)
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    A = np.hstack([H, norms[:, None]])
    res = linprog(cost, A_ub=A, b_ub=g, bounds=[(None, None)] * n + [(0.0, cap)],
                  method="highs")
    if res.status != 0:
        return -1.0
    return float(res.x[-1])
