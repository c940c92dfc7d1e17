"""Linear-Gaussian system model, Kalman and MLO belief dynamics, simulation.

The system is

    x_{k+1} = A x_k + B u_k + sqrt(W) w_k
    y_k     = C x_k + sqrt(V(x_k)) v_k,      w, v ~ N(0, I)

with inputs restricted to the polytope ``{u : H_u u >= c_u}``.  Observation
noise may depend on the state; during planning it is evaluated at the
predicted mean ``A mu + B u``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .polytope import chebyshev_radius

PSD_TOL = 1e-9
COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class BeliefState:
    """Gaussian belief N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float).reshape(-1))
        object.__setattr__(self, "cov", np.atleast_2d(np.asarray(self.cov, dtype=float)))

    @property
    def dim(self) -> int:
        return self.mean.size

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_json(cls, d) -> "BeliefState":
        return cls(np.array(d["mean"], dtype=float), np.array(d["cov"], dtype=float))


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def clamp_psd(S: np.ndarray) -> np.ndarray:
    """Symmetrize and zero out slightly negative eigenvalues.

    Raises if an eigenvalue is below ``-PSD_TOL``.
    """
    S = symmetrize(S)
    w, V = np.linalg.eigh(S)
    if w.size and w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise ValueError(f"matrix is indefinite (eigenvalue {w.min():.3e})")
    if w.size and w.min() < 0.0:
        S = symmetrize((V * np.clip(w, 0.0, None)) @ V.T)
    return S


def psd_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix via eigendecomposition."""
    S = symmetrize(np.asarray(S, dtype=float))
    w, V = np.linalg.eigh(S)
    if w.size and w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise ValueError("matrix is indefinite")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------

class NoiseModel:
    """Diagonal observation-noise covariance, possibly state dependent."""

    p: int

    def diag(self, x: np.ndarray) -> np.ndarray:
        """Noise variances for states ``x`` of shape (..., n) -> (..., p)."""
        raise NotImplementedError

    def lower_bound(self) -> np.ndarray:
        """Per-output variance floor over the whole state space."""
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return np.diag(self.diag(np.asarray(x, dtype=float)))


@dataclass(frozen=True, eq=False)
class ConstantNoise(NoiseModel):
    variances: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float).reshape(-1)
        if np.any(v < 0):
            raise ValueError("noise variances must be non-negative")
        object.__setattr__(self, "variances", v)

    @property
    def p(self) -> int:
        return self.variances.size

    def diag(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.variances, x.shape[:-1] + (self.p,)).copy()

    def lower_bound(self):
        return self.variances.copy()


@dataclass(frozen=True)
class PolyTerm:
    """``coef * (x[index] - shift) ** power`` with ``power`` even, ``coef >= 0``."""

    index: int
    shift: float
    power: int
    coef: float = 1.0

    def __post_init__(self):
        if self.power < 0 or self.power % 2:
            raise ValueError("polynomial noise terms need an even non-negative power")
        if self.coef < 0:
            raise ValueError("polynomial noise terms need a non-negative coefficient")


@dataclass(frozen=True, eq=False)
class MinPolyNoise(NoiseModel):
    """Per output ``min(const, floor + sum_j term_j(x))``.

    This is the camera/GPS fusion model: a state-independent fallback sensor
    with variance ``const`` and a sensor whose variance grows polynomially
    with the distance from a sweet spot.
    """

    const: np.ndarray
    floor: np.ndarray
    terms: tuple[tuple[PolyTerm, ...], ...]

    def __post_init__(self):
        const = np.asarray(self.const, dtype=float).reshape(-1)
        floor = np.asarray(self.floor, dtype=float).reshape(-1)
        if const.size != floor.size or len(self.terms) != const.size:
            raise ValueError("noise model sizes disagree")
        if np.any(floor <= 0) or np.any(const <= 0):
            raise ValueError("noise variances must be positive")
        object.__setattr__(self, "const", const)
        object.__setattr__(self, "floor", floor)
        object.__setattr__(self, "terms", tuple(tuple(t) for t in self.terms))

    @property
    def p(self) -> int:
        return self.const.size

    def diag(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.p,))
        for i, terms in enumerate(self.terms):
            poly = np.full(x.shape[:-1], self.floor[i])
            for t in terms:
                poly = poly + t.coef * (x[..., t.index] - t.shift) ** t.power
            out[..., i] = np.minimum(self.const[i], poly)
        return out

    def lower_bound(self):
        return np.minimum(self.const, self.floor)


def noise_cov(model: NoiseModel, x) -> np.ndarray:
    """Observation noise covariance ``V(x)`` (diagonal)."""
    return model(x)


# ---------------------------------------------------------------------------
# System
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    W: np.ndarray
    noise: NoiseModel
    H_u: np.ndarray
    c_u: np.ndarray
    _sqrtW: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("A", "B", "C", "W", "H_u"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, "c_u", np.asarray(self.c_u, dtype=float).reshape(-1))
        try:
            object.__setattr__(self, "_sqrtW", psd_sqrt(self.W))
        except (ValueError, np.linalg.LinAlgError):
            raise ValueError("W: not positive semidefinite") from None

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def validate(self) -> None:
        """Check dimensions, PSD noise, full-dimensional inputs, stabilisability.

        Raises ``ValueError`` naming the offending field.
        """
        n, m = self.n, self.m
        if self.A.shape != (n, n):
            raise ValueError(f"A: expected square matrix, got {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError(f"B: expected {n} rows, got {self.B.shape[0]}")
        if self.C.shape[1] != n:
            raise ValueError(f"C: expected {n} columns, got {self.C.shape[1]}")
        if self.W.shape != (n, n):
            raise ValueError(f"W: expected {n}x{n}, got {self.W.shape}")
        if not np.allclose(self.W, self.W.T, atol=1e-12):
            raise ValueError("W: not symmetric")
        if np.linalg.eigvalsh(self.W).min() < -PSD_TOL:
            raise ValueError("W: not positive semidefinite")
        if self.noise.p != self.p:
            raise ValueError(f"noise: model has {self.noise.p} outputs, C has {self.p}")
        if self.H_u.shape[1] != m or self.H_u.shape[0] != self.c_u.size:
            raise ValueError("input_set: H_u / c_u dimensions disagree with B")
        # H u >= c  <=>  -H u <= -c
        if chebyshev_radius(-self.H_u, -self.c_u) <= 1e-9:
            raise ValueError("input_set: polytope is not full-dimensional")
        if not is_stabilisable(self.A, self.B):
            raise ValueError("A/B: system is not stabilisable")

    def input_admissible(self, u, tol: float = 1e-9) -> bool:
        return bool(np.all(self.H_u @ np.asarray(u, dtype=float) >= self.c_u - tol))

    def covariance_floor(self) -> np.ndarray:
        """PSD lower bound on every covariance produced by one filter step.

        With ``W > 0`` and ``V(x) >= v_lo I``, the update satisfies
        ``Sigma' >= (W^-1 + C' C / v_lo)^-1``.  Returns zeros when W is singular.
        """
        n = self.n
        w = np.linalg.eigvalsh(self.W)
        if w.min() <= 1e-12:
            return np.zeros((n, n))
        info = np.linalg.inv(self.W)
        lo = self.noise.lower_bound()
        if self.p:
            info = info + self.C.T @ np.diag(1.0 / lo) @ self.C
        return symmetrize(np.linalg.inv(info))


def is_stabilisable(A: np.ndarray, B: np.ndarray) -> bool:
    """PBH test on the eigenvalues with modulus >= 1."""
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - 1e-12:
            M = np.hstack([A - lam * np.eye(n), B.astype(complex)])
            if np.linalg.matrix_rank(M, tol=1e-9) < n:
                return False
    return True


# ---------------------------------------------------------------------------
# Belief dynamics
# ---------------------------------------------------------------------------

def belief_step_batch(sys: LinearSystem, means, covs, us):
    """MLO belief step for a batch.

    Shapes: means (k, n), covs (k, n, n), us (k, m).  Returns
    ``(mean', cov', f, K)`` where ``f`` is the predicted mean and ``K`` the
    Kalman gain, so a full Kalman update only needs ``f + K (y - C f)``.
    """
    A, B, C, W = sys.A, sys.B, sys.C, sys.W
    f = means @ A.T + us @ B.T
    gamma = A @ covs @ A.T + W
    if sys.p == 0:
        return f, symmetrize(gamma), f, np.zeros(f.shape + (0,))
    V = sys.noise.diag(f)
    S = C @ gamma @ C.T
    idx = np.arange(sys.p)
    S[..., idx, idx] += V
    if np.any(np.linalg.cond(S) > COND_LIMIT):
        raise np.linalg.LinAlgError("innovation covariance is singular")
    # K = gamma C' S^-1  computed as (S^-1 C gamma)' since S and gamma are symmetric
    K = np.swapaxes(np.linalg.solve(S, C @ gamma), -1, -2)
    cov = symmetrize(gamma - K @ C @ gamma)
    return f, cov, f, K


def _single(sys, belief, u):
    u = np.asarray(u, dtype=float).reshape(1, -1)
    if u.shape[1] != sys.m:
        raise ValueError(f"control has dimension {u.shape[1]}, expected {sys.m}")
    if belief.dim != sys.n:
        raise ValueError(f"belief has dimension {belief.dim}, expected {sys.n}")
    mean, cov, f, K = belief_step_batch(sys, belief.mean[None], belief.cov[None], u)
    cov = cov[0]
    if np.linalg.eigvalsh(cov)[0] < 0.0:
        cov = clamp_psd(cov)
    return f[0], cov, K[0]


def mlo_step(sys: LinearSystem, belief: BeliefState, u) -> BeliefState:
    """Belief update under the maximum-likelihood-observation assumption."""
    f, cov, _ = _single(sys, belief, u)
    return BeliefState(f, cov)


def kalman_update(sys: LinearSystem, belief: BeliefState, u, y) -> BeliefState:
    """Kalman filter step with an actual observation ``y``."""
    f, cov, K = _single(sys, belief, u)
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != sys.p:
        raise ValueError(f"observation has dimension {y.size}, expected {sys.p}")
    return BeliefState(K @ (y - sys.C @ f) + f, cov)


def rollout(sys: LinearSystem, belief: BeliefState, controls) -> list[BeliefState]:
    """Fold :func:`mlo_step` over a control sequence; includes the start."""
    out = [belief]
    for u in controls:
        out.append(mlo_step(sys, out[-1], u))
    return out


def simulate_step(sys: LinearSystem, x, u, rng: np.random.Generator):
    """Sample the true next state and its observation."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x_next = sys.A @ x + sys.B @ u + sys._sqrtW @ rng.standard_normal(sys.n)
    v = sys.noise.diag(x_next)
    y = sys.C @ x_next + np.sqrt(v) * rng.standard_normal(sys.p)
    return x_next, y


def steady_state_cov(sys: LinearSystem, x, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of the MLO covariance map while hovering at state ``x``."""
    x = np.asarray(x, dtype=float)
    cov = sys.W.copy()
    for _ in range(max_iter):
        gamma = sys.A @ cov @ sys.A.T + sys.W
        S = sys.C @ gamma @ sys.C.T + sys.noise(x)
        K = np.linalg.solve(S, sys.C @ gamma).T
        nxt = symmetrize(gamma - K @ sys.C @ gamma)
        if np.abs(nxt - cov).max() < tol:
            return nxt
        cov = nxt
    raise RuntimeError("covariance iteration did not converge")
