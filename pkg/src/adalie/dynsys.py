"""Linear time-varying systems: simulation, transition caching and linearization.

Matrices are stored stacked along a leading time axis, so ``system.A[t]`` is
the state matrix at step ``t``. Time runs over ``0..T`` for every stack.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

RANK_RTOL = 1e-10
DIVERGENCE_LIMIT = 1e12
FULL_TABLE_MAX_T = 100


class NotStronglyObservableError(ValueError):
    """Raised when ``C_tau H_tau`` loses column rank at some ``tau``."""

    def __init__(self, tau: int, rank: int, needed: int):
        self.tau = tau
        super().__init__(
            f"system is not strongly observable: C_tau H_tau has rank {rank} < {needed} at tau={tau}"
        )


class RankDeficientError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, t: int, norm: float):
        self.t = t
        super().__init__(f"state diverged at t={t} (|x|={norm:.3g})")


def checked_pinv(M: np.ndarray, rtol: float = RANK_RTOL) -> tuple[np.ndarray, int]:
    """Pseudo-inverse via SVD, returning it together with the numerical rank.

    Singular values below ``rtol * s_max`` are treated as zero. Callers decide
    what a rank deficiency means; nothing is silently regularized here.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(M.T.shape), 0
    keep = s > rtol * s[0]
    rank = int(keep.sum())
    pinv = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return pinv, rank


def _stack(M, T: int, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return np.broadcast_to(M, (T + 1,) + M.shape).copy()
    if M.ndim == 3 and M.shape[0] == T + 1:
        return M.copy()
    raise ValueError(f"{name} must be a matrix or a stack of T+1={T + 1} matrices, got shape {M.shape}")


@dataclass(frozen=True, eq=False)
class LtvSystem:
    """Discrete-time ``x[t+1] = A[t] x[t] + B[t] u[t]``, ``y[t] = C[t] x[t]``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    T: int
    name: str = ""

    def __post_init__(self):
        T = int(self.T)
        if T < 1:
            raise ValueError("horizon T must be positive")
        object.__setattr__(self, "T", T)
        for key in ("A", "B", "C"):
            arr = _stack(getattr(self, key), T, key)
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        n_x = self.A.shape[1]
        if self.A.shape[2] != n_x:
            raise ValueError(f"A must be square, got {self.A.shape[1:]}")
        if self.B.shape[1] != n_x:
            raise ValueError(f"B has {self.B.shape[1]} rows, expected n_x={n_x}")
        if self.C.shape[2] != n_x:
            raise ValueError(f"C has {self.C.shape[2]} columns, expected n_x={n_x}")

    @classmethod
    def time_invariant(cls, A, B, C, T: int, name: str = "") -> "LtvSystem":
        return cls(np.atleast_2d(A), np.atleast_2d(B), np.atleast_2d(C), T, name)

    @property
    def n_x(self) -> int:
        return self.A.shape[1]

    @property
    def n_u(self) -> int:
        return self.B.shape[2]

    @property
    def n_y(self) -> int:
        return self.C.shape[1]

    def step(self, t: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A[t] @ x + self.B[t] @ u

    def output(self, t: int, x: np.ndarray) -> np.ndarray:
        return self.C[t] @ x

    def with_horizon(self, T: int) -> "LtvSystem":
        """Same dynamics over another horizon (only valid for time-invariant stacks)."""
        if not (np.all(self.A == self.A[0]) and np.all(self.B == self.B[0]) and np.all(self.C == self.C[0])):
            raise ValueError("with_horizon requires a time-invariant system")
        return LtvSystem.time_invariant(self.A[0], self.B[0], self.C[0], T, self.name)


def state_transition(system: LtvSystem, t: int, i: int) -> np.ndarray:
    """Return ``Phi(t, i) = A[t-1] ... A[i]`` with ``Phi(t, t) = I``."""
    if not 0 <= i <= t <= system.T:
        raise IndexError(f"need 0 <= i <= t <= T, got i={i}, t={t}, T={system.T}")
    phi = np.eye(system.n_x)
    for k in range(i, t):
        phi = system.A[k] @ phi
    return phi


@dataclass(frozen=True, eq=False)
class TransitionCache:
    """Everything the estimators need from the dynamics over a horizon ``T``.

    Attributes:
        T: horizon.
        phi: ``(T+1, T+1, n_x, n_x)`` table of ``Phi(t, i)`` (zero for ``i > t``),
            or ``None`` when the horizon is too long to store it.
        phi0: ``Phi(t, 0)`` for every ``t``.
        h: ``H_tau = sum_{i<tau} Phi(tau, i+1)``; ``h[0]`` is zero.
        ch_pinv: ``(C_tau H_tau)^+``; ``ch_pinv[0]`` is zero.
        norms: ``norms[tau, i] = ||(C_tau H_tau)^+ C_tau Phi(tau, i)||`` for
            ``0 <= i <= tau``, zero elsewhere. Equals ``||H_tau^{-1} Phi(tau, i)||``
            when ``C_tau`` has full column rank.
        pinv_norms: ``||(C_tau H_tau)^+||``.
    """

    system: LtvSystem
    T: int
    phi: np.ndarray | None
    phi0: np.ndarray
    h: np.ndarray
    ch_pinv: np.ndarray
    norms: np.ndarray
    pinv_norms: np.ndarray

    def transition(self, t: int, i: int) -> np.ndarray:
        if not 0 <= i <= t <= self.T:
            raise IndexError(f"need 0 <= i <= t <= T, got i={i}, t={t}")
        if self.phi is not None:
            return self.phi[t, i]
        return state_transition(self.system, t, i)

    def inverse_h(self, tau: int) -> np.ndarray:
        """Left inverse of ``H_tau`` as seen through the outputs."""
        return self.ch_pinv[tau] @ self.system.C[tau]


def build_cache(system: LtvSystem, full_table: bool | None = None) -> TransitionCache:
    """Precompute transitions, ``H_tau``, ``(C_tau H_tau)^+`` and their norms.

    Raises:
        NotStronglyObservableError: ``C_tau H_tau`` is column-rank deficient for
            some ``tau >= 1``; the error carries the offending ``tau``.
    """
    T, n = system.T, system.n_x
    if full_table is None:
        full_table = T <= FULL_TABLE_MAX_T
    eye = np.eye(n)

    phi = np.zeros((T + 1, T + 1, n, n)) if full_table else None
    phi0 = np.zeros((T + 1, n, n))
    h = np.zeros((T + 1, n, n))
    ch_pinv = np.zeros((T + 1, n, system.n_y))
    norms = np.zeros((T + 1, T + 1))
    pinv_norms = np.zeros(T + 1)

    row = eye[None].copy()  # row[i] = Phi(t, i), i = 0..t
    phi0[0] = eye
    if phi is not None:
        phi[0, 0] = eye
    for t in range(1, T + 1):
        row = np.concatenate([system.A[t - 1] @ row, eye[None]], axis=0)
        phi0[t] = row[0]
        if phi is not None:
            phi[t, : t + 1] = row
        h[t] = row[1:].sum(axis=0)
        ch = system.C[t] @ h[t]
        pinv, rank = checked_pinv(ch)
        if rank < n:
            raise NotStronglyObservableError(t, rank, n)
        ch_pinv[t] = pinv
        gain = pinv @ system.C[t]
        norms[t, : t + 1] = np.linalg.norm(gain @ row, ord=2, axis=(1, 2))
        pinv_norms[t] = np.linalg.norm(pinv, ord=2)

    for arr in (phi0, h, ch_pinv, norms, pinv_norms):
        arr.setflags(write=False)
    if phi is not None:
        phi.setflags(write=False)
    return TransitionCache(system, T, phi, phi0, h, ch_pinv, norms, pinv_norms)


@dataclass(frozen=True, eq=False)
class InputRecovery:
    """Maps estimates of ``B[t] u[t]`` back to ``u[t]`` via ``B[t]^+``."""

    pinvs: np.ndarray

    def __call__(self, absorbed: np.ndarray, t: int | None = None) -> np.ndarray:
        absorbed = np.asarray(absorbed, dtype=float)
        if t is not None:
            return self.pinvs[t] @ absorbed
        n = absorbed.shape[0]
        return np.einsum("tij,tj->ti", self.pinvs[:n], absorbed)


def absorb_input_matrix(system: LtvSystem) -> tuple[LtvSystem, InputRecovery]:
    """Rewrite the system for the input ``B[t] u[t]`` so that ``B[t] = I``."""
    pinvs = np.zeros((system.T + 1, system.n_u, system.n_x))
    for t in range(system.T + 1):
        pinv, rank = checked_pinv(system.B[t])
        if rank < system.n_u:
            raise RankDeficientError(f"B[{t}] has rank {rank} < n_u={system.n_u}")
        pinvs[t] = pinv
    pinvs.setflags(write=False)
    eye = np.eye(system.n_x)
    absorbed = LtvSystem(system.A, np.broadcast_to(eye, (system.T + 1, system.n_x, system.n_x)),
                         system.C, system.T, system.name)
    return absorbed, InputRecovery(pinvs)


NOISE_FAMILIES = ("uniform", "truncated-gaussian", "zero")


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean noise whose samples never exceed ``bound`` in 2-norm.

    ``uniform`` draws each of the ``n`` components from
    ``U[-bound/sqrt(n), bound/sqrt(n)]``; ``truncated-gaussian`` draws an
    isotropic Gaussian with per-component std ``bound/(2 sqrt(n))`` and rejects
    samples outside the ball.
    """

    bound: float = 0.0
    family: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.bound < 0:
            raise ValueError("noise bound must be nonnegative")
        if self.family not in NOISE_FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; choose from {NOISE_FAMILIES}")

    @property
    def silent(self) -> bool:
        return self.family == "zero" or self.bound == 0.0

    def component_variance(self, dim: int) -> float:
        """Per-component variance of a ``dim``-dimensional draw."""
        if self.silent:
            return 0.0
        if self.family == "uniform":
            return self.bound**2 / (3.0 * dim)
        # truncation at 2 sigma*sqrt(n) removes little mass; use the untruncated value
        return self.bound**2 / (4.0 * dim)

    def sample(self, rng: np.random.Generator, dim: int, size: int | None = None) -> np.ndarray:
        shape = (dim,) if size is None else (size, dim)
        if self.silent:
            return np.zeros(shape)
        half = self.bound / np.sqrt(dim)
        if self.family == "uniform":
            return rng.uniform(-half, half, size=shape)
        flat = rng.normal(0.0, half / 2.0, size=shape).reshape(-1, dim)
        bad = np.linalg.norm(flat, axis=1) > self.bound
        while bad.any():
            flat[bad] = rng.normal(0.0, half / 2.0, size=(int(bad.sum()), dim))
            bad = np.linalg.norm(flat, axis=1) > self.bound
        return flat.reshape(shape)


@dataclass(frozen=True, eq=False)
class Episode:
    """One rollout.

    ``outputs[k]`` is ``y[k+1]`` (so ``y_1..y_T``), ``true_inputs[t]`` is
    ``u[t]``. ``y0`` is the measurement at time 0 and ``states`` the noiseless
    trajectory ``x_0..x_T``; both are kept for diagnostics and the distance
    metric, never for estimation of the inputs themselves.
    """

    x0_hat: np.ndarray
    outputs: np.ndarray
    true_inputs: np.ndarray
    x0_true: np.ndarray
    y0: np.ndarray | None = None
    states: np.ndarray | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.outputs.shape[0]

    def all_outputs(self, C0: np.ndarray | None = None) -> np.ndarray:
        """Stack ``y_0..y_T``; ``y_0`` falls back to ``C0 @ x0_hat``."""
        y0 = self.y0
        if y0 is None:
            if C0 is None:
                raise ValueError("episode has no y0; pass C0 to synthesize it from x0_hat")
            y0 = C0 @ self.x0_hat
        return np.vstack([y0, self.outputs])

    def window(self, start: int, length: int) -> "Episode":
        """Sub-episode over ``[start, start+length]``, re-anchored on ``y[start]``."""
        ys = self.all_outputs()
        states = None if self.states is None else self.states[start : start + length + 1]
        x_true = self.x0_true if self.states is None else self.states[start]
        return Episode(
            x0_hat=self.x0_hat if start == 0 else ys[start],
            outputs=ys[start + 1 : start + length + 1],
            true_inputs=self.true_inputs[start : start + length],
            x0_true=x_true,
            y0=ys[start],
            states=states,
        )


InputFn = Callable[[int, np.ndarray], np.ndarray]


def simulate(system, input_fn: InputFn, noise: NoiseModel, x0, T: int | None = None) -> Episode:
    """Roll the system forward with bounded process and measurement noise.

    ``system`` is an :class:`LtvSystem` or a :class:`NonlinearSystem`; anything
    with ``step(t, x, u)``, ``output(t, x)`` and ``n_x``/``n_y`` works.
    ``input_fn(t, y_t)`` sees the noisy measurement at ``t``. The initial-state
    estimate is ``x0`` plus one noise draw.

    Raises:
        DivergenceError: when ``|x_t|`` exceeds ``DIVERGENCE_LIMIT``.
    """
    if T is None:
        T = system.T
    rng = np.random.default_rng(noise.seed)
    x = np.asarray(x0, dtype=float).reshape(-1)
    x0_true = x.copy()
    x0_hat = x + noise.sample(rng, system.n_x)
    states = [x]
    ys = []
    us = []
    for t in range(T + 1):
        y = system.output(t, x) + noise.sample(rng, system.n_y)
        ys.append(y)
        if t == T:
            break
        u = np.atleast_1d(np.asarray(input_fn(t, y), dtype=float))
        us.append(u)
        x = system.step(t, x, u) + noise.sample(rng, system.n_x)
        norm = np.linalg.norm(x)
        if not np.isfinite(norm) or norm > DIVERGENCE_LIMIT:
            raise DivergenceError(t + 1, norm)
        states.append(x)
    ys = np.array(ys)
    return Episode(x0_hat=x0_hat, outputs=ys[1:], true_inputs=np.array(us), x0_true=x0_true,
                   y0=ys[0], states=np.array(states))


@dataclass(frozen=True, eq=False)
class NonlinearSystem:
    """Control-affine ``x[t+1] = g(x) + h(x) u``, ``y = C x``.

    ``dh(x)`` returns the derivative tensor with ``dh(x)[j, k, l] =
    d h_jk / d x_l``; pass ``None`` when ``h`` does not depend on the state.
    """

    g: Callable[[np.ndarray], np.ndarray]
    h: Callable[[np.ndarray], np.ndarray]
    dg: Callable[[np.ndarray], np.ndarray]
    C: np.ndarray
    dt: float
    dh: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""
    T: int = 100

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        object.__setattr__(self, "C", C)

    @property
    def n_x(self) -> int:
        return self.C.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_u(self) -> int:
        return np.atleast_2d(self.h(np.zeros(self.n_x))).shape[1]

    def step(self, t: int, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.g(x), dtype=float) + np.atleast_2d(self.h(x)) @ u

    def output(self, t: int, x: np.ndarray) -> np.ndarray:
        return self.C @ x


def linearize(nl: NonlinearSystem, outputs, x0_hat=None) -> LtvSystem:
    """Linearize along the state trajectory recovered from the measurements.

    ``outputs`` holds ``y_1..y_T``. States are recovered as ``C^+ y``; the
    initial point is ``x0_hat`` when given, else ``C^+ y_0`` must be the first
    row of ``outputs`` (pass ``T+1`` rows in that case).
    """
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    c_pinv, rank = checked_pinv(nl.C)
    if rank < nl.n_x:
        raise RankDeficientError(f"C has rank {rank} < n_x={nl.n_x}; states cannot be recovered")
    xs = outputs @ c_pinv.T
    if x0_hat is not None:
        xs = np.vstack([np.asarray(x0_hat, dtype=float).reshape(1, -1), xs])
    T = xs.shape[0] - 1
    A = np.array([np.atleast_2d(nl.dg(x)) for x in xs])
    B = np.array([np.atleast_2d(nl.h(x)) for x in xs])
    if nl.dh is not None:
        B = B + np.array([np.einsum("jkl,l->jk", nl.dh(x), x) for x in xs])
    C = np.broadcast_to(nl.C, (T + 1,) + nl.C.shape)
    return LtvSystem(A, B, C, T, nl.name)


def perturb_system(system: LtvSystem, sigma: float, seed: int) -> LtvSystem:
    """Add i.i.d. ``N(0, sigma^2)`` noise to every entry of every ``A[t]``."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return system
    rng = np.random.default_rng(seed)
    A = system.A + rng.normal(0.0, sigma, size=system.A.shape)
    return replace(system, A=A)


def write_episode_csv(episode: Episode, path) -> None:
    """Columns ``t, y[0..], u[0..]`` for ``t = 0..T``; missing cells are blank."""
    ys = episode.all_outputs() if episode.y0 is not None else np.vstack(
        [np.full(episode.outputs.shape[1], np.nan), episode.outputs])
    n_y, n_u = ys.shape[1], episode.true_inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"y{j}" for j in range(n_y)] + [f"u{j}" for j in range(n_u)])
        for t in range(episode.T + 1):
            y = ["" if np.isnan(v) else repr(float(v)) for v in ys[t]]
            u = [repr(float(v)) for v in episode.true_inputs[t]] if t < episode.T else [""] * n_u
            writer.writerow([t] + y + u)
