"""Unbiased minimum-variance joint input and state filter (no direct feedthrough).

Recursion, for a measurement ``y[k+1]`` and matrices at step ``k``::

    x- = A x,            P- = A P A^T + Qn
    F  = C B,            R~ = C P- C^T + Rn
    M  = (F^T R~^-1 F)^-1 F^T R~^-1
    d  = M (y - C x-)                      # estimate of u[k]
    x* = x- + B d
    K  = P- C^T R~^-1
    x+ = x* + K (y - C x*)
    P+ = P- - K (R~ - F Pd F^T) K^T,  Pd = (F^T R~^-1 F)^-1

The residual ``y - C x*`` is orthogonal to ``F`` in the ``R~^-1`` metric, so the
state correction never reintroduces the unknown input and both estimates stay
unbiased.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynsys import Episode, LtvSystem, NoiseModel

COND_LIMIT = 1e12
JITTER = 1e-12


class InputNotEstimableError(ValueError):
    def __init__(self, t: int, rank: int, needed: int):
        self.t = t
        super().__init__(f"input not estimable at t={t}: C[t+1] B[t] has rank {rank} < {needed}")


def _symmetrize(P: np.ndarray) -> np.ndarray:
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() < 0:
        P = (V * np.maximum(w, 0.0)) @ V.T
        P = 0.5 * (P + P.T)
    return P


def _check_psd(M: np.ndarray, name: str, tol: float = 1e-10) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.allclose(M, M.T, atol=tol, rtol=0):
        raise ValueError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(0.5 * (M + M.T)).min() < -tol:
        raise ValueError(f"{name} is not positive semidefinite")
    return M


@dataclass(frozen=True, eq=False)
class UmvFilterState:
    x_hat: np.ndarray
    P: np.ndarray
    t: int
    Qn: np.ndarray
    Rn: np.ndarray
    regularized: bool = False


def umv_init(x0_hat, P0, Qn, Rn) -> UmvFilterState:
    x0 = np.asarray(x0_hat, dtype=float).reshape(-1)
    P0 = _check_psd(P0, "P0")
    Qn = _check_psd(Qn, "Qn")
    Rn = _check_psd(Rn, "Rn")
    n = x0.size
    if P0.shape != (n, n) or Qn.shape != (n, n):
        raise ValueError(f"P0 and Qn must be {n}x{n}")
    return UmvFilterState(x0, P0, 0, Qn, Rn)


def _guarded_inv(R: np.ndarray) -> tuple[np.ndarray, bool]:
    if np.linalg.cond(R) > COND_LIMIT:
        return np.linalg.inv(R + JITTER * np.eye(R.shape[0])), True
    return np.linalg.inv(R), False


def umv_step(state: UmvFilterState, y_next, A: np.ndarray, B: np.ndarray,
             C_next: np.ndarray) -> tuple[np.ndarray, UmvFilterState]:
    """One filter step: returns the estimate of ``u[t]`` and the state at ``t+1``."""
    y = np.asarray(y_next, dtype=float).reshape(-1)
    x_pred = A @ state.x_hat
    P_pred = A @ state.P @ A.T + state.Qn
    F = C_next @ B
    rank = np.linalg.matrix_rank(F)
    if rank < F.shape[1]:
        raise InputNotEstimableError(state.t, rank, F.shape[1])
    R_tilde = C_next @ P_pred @ C_next.T + state.Rn
    R_inv, reg = _guarded_inv(R_tilde)
    info = F.T @ R_inv @ F
    Pd = np.linalg.inv(info)
    M = Pd @ F.T @ R_inv
    d = M @ (y - C_next @ x_pred)
    x_star = x_pred + B @ d
    K = P_pred @ C_next.T @ R_inv
    x_new = x_star + K @ (y - C_next @ x_star)
    P_new = P_pred - K @ (R_tilde - F @ Pd @ F.T) @ K.T
    new = UmvFilterState(x_new, _symmetrize(P_new), state.t + 1, state.Qn, state.Rn,
                         state.regularized or reg)
    return d, new


@dataclass(frozen=True, eq=False)
class UmvResult:
    estimates: np.ndarray
    states: np.ndarray
    regularized: bool


def umv_estimate_sequence(episode: Episode, system: LtvSystem, Qn, Rn, P0) -> UmvResult:
    """Run the filter over ``y_1..y_T``; row ``t`` of the result estimates ``u[t]``."""
    state = umv_init(episode.x0_hat, P0, Qn, Rn)
    ds, xs = [], [state.x_hat]
    for t in range(episode.T):
        d, state = umv_step(state, episode.outputs[t], system.A[t], system.B[t], system.C[t + 1])
        ds.append(d)
        xs.append(state.x_hat)
    return UmvResult(np.array(ds), np.array(xs), state.regularized)


def noise_covariances(system: LtvSystem, noise: NoiseModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(Qn, Rn, P0)`` matching the simulator's noise draws exactly."""
    vx = noise.component_variance(system.n_x)
    vy = noise.component_variance(system.n_y)
    return vx * np.eye(system.n_x), vy * np.eye(system.n_y), vx * np.eye(system.n_x)
