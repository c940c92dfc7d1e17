"""Steering primitives: LQR, belief LQR, loop closure and input clamping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .belief import BeliefState, LinearSystem, belief_step_batch, clamp_psd, mlo_step


class RiccatiError(RuntimeError):
    """Riccati iteration failed to converge."""


def dare_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.abs(rhs - P).max())


def lqr(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Infinite-horizon discrete LQR gain ``F`` (control law ``u = -F x``).

    The Riccati equation is solved by fixed-point iteration from ``P = Q``.

    Raises
    ------
    RiccatiError
        If the iteration has not settled after ``max_iter`` sweeps.
    """
    F, _ = lqr_with_cost(A, B, Q, R, tol, max_iter)
    return F


def lqr_with_cost(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10_000):
    A, B, Q, R = (np.atleast_2d(np.asarray(M, dtype=float)) for M in (A, B, Q, R))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ G)
        P_next = 0.5 * (P_next + P_next.T)
        if np.abs(P_next - P).max() <= tol * max(1.0, np.abs(P).max()):
            P = P_next
            break
        P = P_next
    else:
        raise RiccatiError("Riccati iteration did not converge")
    F = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if dare_residual(A, B, Q, R, P) > 1e-8 * max(1.0, np.abs(P).max()):
        raise RiccatiError("Riccati residual too large")
    return F, P


# ---------------------------------------------------------------------------
# Input set
# ---------------------------------------------------------------------------

def _box_rows(H_u, c_u):
    """Per-coordinate bounds if every row of ``H_u`` touches one input."""
    H_u = np.atleast_2d(H_u)
    m = H_u.shape[1]
    lo = np.full(m, -np.inf)
    hi = np.full(m, np.inf)
    for h, c in zip(H_u, c_u):
        nz = np.flatnonzero(h)
        if nz.size != 1:
            return None
        j = nz[0]
        # h_j u_j >= c
        if h[j] > 0:
            lo[j] = max(lo[j], c / h[j])
        else:
            hi[j] = min(hi[j], c / h[j])
    return lo, hi


def clamp_control(u_des, H_u, c_u) -> np.ndarray:
    """Closest admissible input to ``u_des`` in the L1 norm.

    Solves ``min ||u - u_des||_1  s.t.  H_u u >= c_u``.  Axis-aligned input
    boxes reduce to per-coordinate clipping.
    """
    u_des = np.asarray(u_des, dtype=float).reshape(-1)
    H_u = np.atleast_2d(np.asarray(H_u, dtype=float))
    c_u = np.asarray(c_u, dtype=float).reshape(-1)
    if np.all(H_u @ u_des >= c_u):
        return u_des.copy()
    box = _box_rows(H_u, c_u)
    if box is not None:
        return np.clip(u_des, *box)
    return clamp_control_lp(u_des, H_u, c_u)


def clamp_control_lp(u_des, H_u, c_u) -> np.ndarray:
    m = u_des.size
    # variables [u, t], |u - u_des| <= t
    cost = np.concatenate([np.zeros(m), np.ones(m)])
    I = np.eye(m)
    A = np.vstack([
        np.hstack([I, -I]),
        np.hstack([-I, -I]),
        np.hstack([-H_u, np.zeros((H_u.shape[0], m))]),
    ])
    b = np.concatenate([u_des, -u_des, -c_u])
    res = linprog(cost, A_ub=A, b_ub=b, bounds=[(None, None)] * m + [(0, None)] * m, method="highs")
    if res.status != 0:
        raise ValueError(f"input set is infeasible: {res.message}")
    return res.x[:m]


# ---------------------------------------------------------------------------
# Loop closure
# ---------------------------------------------------------------------------

@dataclass
class LoopClosure:
    controls: np.ndarray  # (n, m) after clamping
    raw: np.ndarray  # (n, m) minimum-norm solution
    residual: float  # infinity-norm endpoint error after clamping


def controllability_matrix(A, B) -> np.ndarray:
    """``[A^{n-1} B, ..., A B, B]`` (column block k multiplies ``u_k``)."""
    n = A.shape[0]
    blocks = []
    M = B.copy()
    for _ in range(n):
        blocks.append(M)
        M = A @ M
    return np.hstack(blocks[::-1])


def loop_controls(sys: LinearSystem, mu_near, mu_final) -> LoopClosure:
    """Minimum-norm n-step input sequence steering the mean exactly.

    Raises
    ------
    ValueError
        If the controllability matrix is rank deficient.
    """
    A, B = sys.A, sys.B
    n, m = sys.n, sys.m
    Cm = controllability_matrix(A, B)
    if np.linalg.matrix_rank(Cm) < n:
        raise ValueError("loop closure impossible: (A, B) is not controllable")
    mu_near = np.asarray(mu_near, dtype=float)
    mu_final = np.asarray(mu_final, dtype=float)
    target = mu_final - np.linalg.matrix_power(A, n) @ mu_near
    raw = (np.linalg.pinv(Cm) @ target).reshape(n, m)
    clamped = np.array([clamp_control(u, sys.H_u, sys.c_u) for u in raw])
    mu = mu_near
    for u in clamped:
        mu = A @ mu + B @ u
    return LoopClosure(clamped, raw, float(np.abs(mu - mu_final).max()))


# ---------------------------------------------------------------------------
# Belief LQR
# ---------------------------------------------------------------------------

def _tril(n):
    return np.tril_indices(n)


def belief_to_vec(mean, cov) -> np.ndarray:
    """Stack the mean and the lower Cholesky factor of the covariance."""
    n = mean.shape[-1]
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = clamp_psd(cov) + 1e-12 * np.eye(n)
        L = np.linalg.cholesky(cov)
    i, j = _tril(n)
    return np.concatenate([mean, L[..., i, j]], axis=-1)


def vec_to_belief(s, n):
    i, j = _tril(n)
    mean = s[..., :n]
    L = np.zeros(s.shape[:-1] + (n, n))
    L[..., i, j] = s[..., n:]
    return mean, L @ np.swapaxes(L, -1, -2)


def belief_vec_step(sys: LinearSystem, s, u) -> np.ndarray:
    """Batched MLO step on stacked belief vectors."""
    n = sys.n
    mean, cov = vec_to_belief(np.atleast_2d(s), n)
    m2, c2, _, _ = belief_step_batch(sys, mean, cov, np.atleast_2d(u))
    return belief_to_vec(m2, c2)


def belief_jacobians(sys: LinearSystem, s_nom, u_nom, h: float = 1e-6):
    """Central-difference Jacobians of the stacked belief step.

    ``s_nom`` has shape (T, d) and ``u_nom`` (T, m).  Returns ``(As, Bs)``
    with shapes (T, d, d) and (T, d, m).  All perturbed steps go through a
    single batched filter call.
    """
    s_nom = np.atleast_2d(s_nom)
    u_nom = np.atleast_2d(u_nom)
    T, d = s_nom.shape
    m = u_nom.shape[1]
    k = d + m
    E = np.eye(k) * h
    z = np.concatenate([s_nom, u_nom], axis=1)  # (T, k)
    zp = (z[:, None, :] + E[None]).reshape(-1, k)
    zm = (z[:, None, :] - E[None]).reshape(-1, k)
    both = np.concatenate([zp, zm])
    out = belief_vec_step(sys, both[:, :d], both[:, d:])
    fp, fm = out[: T * k].reshape(T, k, d), out[T * k:].reshape(T, k, d)
    J = np.swapaxes((fp - fm) / (2 * h), 1, 2)  # (T, d, k)
    return J[:, :, :d], J[:, :, d:]


@dataclass
class BlqrGains:
    F: np.ndarray  # (T, m, d) feedback gains
    k: np.ndarray  # (T, m) feedforward corrections
    s_nom: np.ndarray  # (T+1, d)
    u_nom: np.ndarray  # (T, m)


def blqr(sys: LinearSystem, nominal: list[BeliefState], controls, Q, Q_f, R, target=None) -> BlqrGains:
    """Time-varying LQ gains on the linearised stacked belief dynamics.

    The stage cost is ``(s - s*)' Q (s - s*) + u' R u`` with terminal weight
    ``Q_f``; ``s*`` defaults to zero.  Linearising about the nominal run gives
    an affine LQ problem whose solution is ``du = -F ds + k``.

    Parameters
    ----------
    nominal
        Beliefs ``b_0 .. b_T`` of the nominal run.
    controls
        Inputs ``u_0 .. u_{T-1}`` of the nominal run.
    target
        Stacked reference belief ``s*`` (length d).
    """
    u_nom = np.atleast_2d(np.asarray(controls, dtype=float))
    T = u_nom.shape[0]
    s_nom = np.array([belief_to_vec(b.mean, b.cov) for b in nominal])
    d = s_nom.shape[1]
    target = np.zeros(d) if target is None else np.asarray(target, dtype=float)
    As, Bs = belief_jacobians(sys, s_nom[:-1], u_nom)
    # value function V(ds) = ds' P ds + 2 p' ds
    P = Q_f
    p = Q_f @ (s_nom[-1] - target)
    F = np.empty((T, u_nom.shape[1], d))
    kff = np.empty((T, u_nom.shape[1]))
    for t in reversed(range(T)):
        A, B = As[t], Bs[t]
        Quu = R + B.T @ P @ B
        Qus = B.T @ P @ A
        Qs = Q @ (s_nom[t] - target) + A.T @ p
        Qu = R @ u_nom[t] + B.T @ p
        F[t] = np.linalg.solve(Quu, Qus)
        kff[t] = -np.linalg.solve(Quu, Qu)
        p = Qs + Qus.T @ kff[t]
        P = Q + A.T @ P @ A - Qus.T @ F[t]
        P = 0.5 * (P + P.T)
    return BlqrGains(F, kff, s_nom, u_nom)
