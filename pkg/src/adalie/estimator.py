"""Adaptive linear input estimation.

Each input ``u_t`` is estimated as a convex combination of the per-step
inversions ``z_tau = (C_tau H_tau)^+ (y_tau - C_tau Phi(tau, 0) x0_hat)``.
The weights trade the variance of the noise terms against the bias that
averaging a non-constant input introduces, by minimizing

    alpha^T (Q + ratio * q_t q_t^T) alpha   over the probability simplex,

with ``ratio`` the Lipschitz-to-noise ratio ``L^2 / V(beta)``.

Indexing: weight position ``k`` (0-based) multiplies ``z_{k+1}``; the horizon
``T`` gives ``T`` weights per target time ``t in 0..T-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynsys import Episode, LtvSystem, TransitionCache, absorb_input_matrix, build_cache

CLAMP = 1e-12


def noise_variance_constant(b: float, beta: float) -> float:
    """High-probability scale ``36 b^2 (1 + sqrt(log(1/beta)))^2``."""
    if not 0.0 < beta <= 1.0:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if b < 0:
        raise ValueError("b must be nonnegative")
    return 36.0 * b * b * (1.0 + math.sqrt(math.log(1.0 / beta))) ** 2


@dataclass(frozen=True)
class DistanceMetric:
    """``d(i, y_i; t, y_t) = time_weight |i - t| + output_weight ||y_i - y_t||``."""

    time_weight: float = 1.0
    output_weight: float = 1.0

    def __post_init__(self):
        if self.time_weight < 0 or self.output_weight < 0:
            raise ValueError("metric weights must be nonnegative")

    def __call__(self, t1: int, y1, t2: int, y2) -> float:
        diff = np.asarray(y2, dtype=float) - np.asarray(y1, dtype=float)
        return self.time_weight * abs(t2 - t1) + self.output_weight * float(np.linalg.norm(diff))

    def matrix(self, outputs: np.ndarray | None, n: int) -> np.ndarray:
        """Pairwise ``D[t, i]`` for ``t, i in 0..n-1``."""
        idx = np.arange(n)
        D = self.time_weight * np.abs(idx[:, None] - idx[None, :]).astype(float)
        if self.output_weight > 0:
            if outputs is None:
                raise ValueError("output term of the metric needs the measured outputs")
            ys = np.asarray(outputs, dtype=float)[:n]
            D = D + self.output_weight * np.linalg.norm(ys[:, None, :] - ys[None, :, :], axis=-1)
        return D


TIME_ONLY = DistanceMetric(1.0, 0.0)


@dataclass(frozen=True, eq=False)
class QpProblem:
    Q: np.ndarray
    q: np.ndarray
    ratio: float
    V: float = 1.0

    def __post_init__(self):
        if self.ratio < 0:
            raise ValueError("ratio must be nonnegative")
        if self.V < 0:
            raise ValueError("V must be nonnegative")

    @property
    def matrix(self) -> np.ndarray:
        return self.Q + self.ratio * np.outer(self.q, self.q)

    def objective(self, alpha) -> float:
        alpha = np.asarray(alpha, dtype=float)
        return float(alpha @ self.Q @ alpha + self.ratio * (self.q @ alpha) ** 2)


@dataclass(frozen=True, eq=False)
class WeightVector:
    alpha: np.ndarray
    t: int
    converged: bool = True
    iterations: int = 0
    objective: float = float("nan")

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if abs(alpha.sum() - 1.0) > 1e-9 or alpha.min() < -CLAMP:
            raise ValueError("weights are not on the simplex")


@dataclass(frozen=True)
class SolverOptions:
    """Simplex QP solver settings.

    ``method="active-set"`` pivots on the support and lands on the exact
    minimizer; ``method="pgd"`` is plain projected gradient with step
    ``1/(2 lambda_max)``, which stalls when the bias term makes the problem
    badly conditioned. Both report the projected-gradient residual at the
    PGD step size and stop once it is below ``tol``.

    ``init`` is ``"onehot"`` (mass on the first output that sees ``u_t``) or
    ``"uniform"``. ``accelerate`` adds momentum (with a function-value
    restart, so iterates stay monotone) to the PGD path.
    """

    tol: float = 1e-8
    max_iter: int = 5000
    init: str = "onehot"
    power_iters: int = 50
    method: str = "active-set"
    accelerate: bool = True
    check_every: int = 10


def build_q_matrix(cache: TransitionCache, T: int | None = None) -> np.ndarray:
    """Variance quadratic form.

    ``Q[tau, tau'] = sum_{i<=min(tau,tau')} n(tau, i) n(tau', i) + ||(C H)^+_tau||^2 delta``
    with ``n(tau, i) = ||H_tau^{-1} Phi(tau, i)||``.
    """
    T = cache.T if T is None else T
    if T > cache.T:
        raise ValueError(f"cache covers T={cache.T}, asked for {T}")
    N = cache.norms[1 : T + 1, : T + 1]  # zero for i > tau already
    Q = N @ N.T + np.diag(cache.pinv_norms[1 : T + 1] ** 2)
    return 0.5 * (Q + Q.T)


def bias_matrix(cache: TransitionCache, metric: DistanceMetric, outputs=None,
                T: int | None = None) -> np.ndarray:
    """All bias vectors at once: row ``t`` is ``q_t``.

    ``q_t[tau] = sum_{i<tau} d(i, t) ||H_tau^{-1} Phi(tau, i+1)||``. ``outputs``
    stacks ``y_0..y_{T-1}`` (at least) when the metric has an output term.
    """
    T = cache.T if T is None else T
    D = metric.matrix(outputs, T)  # D[t, i]
    # W[tau-1, i] = n(tau, i+1) for i < tau
    W = np.tril(cache.norms[1 : T + 1, 1 : T + 1])
    return D @ W.T


def build_bias_vector(cache: TransitionCache, t: int, metric: DistanceMetric,
                      outputs=None, T: int | None = None) -> np.ndarray:
    T = cache.T if T is None else T
    if not 0 <= t < T:
        raise IndexError(f"target t={t} outside 0..{T - 1}")
    return bias_matrix(cache, metric, outputs, T)[t]


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold).

    Accepts a vector or a 2-D array of row vectors.
    """
    V = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(V)):
        raise ValueError("cannot project a non-finite vector")
    single = V.ndim == 1
    V = np.atleast_2d(V)
    n = V.shape[1]
    U = -np.sort(-V, axis=1, kind="stable")
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.count_nonzero(U - css / ind > 0, axis=1)
    theta = css[np.arange(V.shape[0]), rho - 1] / rho
    W = np.maximum(V - theta[:, None], 0.0)
    W[W < CLAMP] = 0.0
    W /= W.sum(axis=1, keepdims=True)
    return W[0] if single else W


def _objectives(A: np.ndarray, Q: np.ndarray, qs: np.ndarray, ratio: float) -> np.ndarray:
    return np.einsum("ij,ij->i", A @ Q, A) + ratio * np.einsum("ij,ij->i", A, qs) ** 2


def _gradients(A: np.ndarray, Q: np.ndarray, qs: np.ndarray, ratio: float) -> np.ndarray:
    return 2.0 * (A @ Q + ratio * np.einsum("ij,ij->i", A, qs)[:, None] * qs)


def _lambda_max(Q: np.ndarray, qs: np.ndarray, ratio: float, iters: int) -> np.ndarray:
    """Power-iteration estimate of the top eigenvalue of every ``Q + ratio q q^T``."""
    X = np.ones_like(qs) / math.sqrt(qs.shape[1])
    lam = np.zeros(qs.shape[0])
    for _ in range(iters):
        Y = X @ Q + ratio * np.einsum("ij,ij->i", X, qs)[:, None] * qs
        lam = np.einsum("ij,ij->i", X, Y)
        X = Y / np.linalg.norm(Y, axis=1, keepdims=True)
    return lam


def initial_weights(targets, T: int, init: str = "onehot") -> np.ndarray:
    targets = np.atleast_1d(targets)
    if init == "uniform":
        return np.full((targets.size, T), 1.0 / T)
    if init != "onehot":
        raise ValueError(f"unknown init {init!r}")
    A0 = np.zeros((targets.size, T))
    # u_t first shows up in y_{t+1}, i.e. weight position t
    A0[np.arange(targets.size), np.minimum(targets, T - 1)] = 1.0
    return A0


@dataclass
class BatchSolution:
    alpha: np.ndarray
    objective: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    history: list = field(default_factory=list)


def solve_batch(Q: np.ndarray, qs: np.ndarray, ratio: float, targets=None,
                opts: SolverOptions = SolverOptions(), record: bool = False) -> BatchSolution:
    """Minimize ``a^T (Q + ratio q q^T) a`` on the simplex, one row per ``q``."""
    qs = np.atleast_2d(np.asarray(qs, dtype=float))
    if targets is None:
        targets = np.arange(qs.shape[0])
    if opts.method == "pgd":
        return _solve_pgd(Q, qs, ratio, targets, opts, record)
    if opts.method == "active-set":
        return _solve_active_set(Q, qs, ratio, targets, opts, record)
    raise ValueError(f"unknown method {opts.method!r}")


def pgd_residual(alpha: np.ndarray, Q: np.ndarray, qs: np.ndarray, ratio: float,
                 power_iters: int = 50) -> np.ndarray:
    """``||a - P(a - eta grad f(a))||`` with ``eta = 1/(2 lambda_max)``, row-wise."""
    A = np.atleast_2d(alpha)
    qs = np.atleast_2d(qs)
    eta = 1.0 / (2.0 * _lambda_max(Q, qs, ratio, power_iters))
    G = _gradients(A, Q, qs, ratio)
    return np.linalg.norm(A - project_simplex(A - eta[:, None] * G), axis=1)


def _active_set_row(Q, q, ratio, a, max_iter, record):
    """Primal active-set method for one simplex QP, started at feasible ``a``.

    Each pass solves the equality-constrained problem on the support. If that
    point leaves the simplex we walk toward it until a weight hits zero and
    drop it; otherwise we add the coordinate with the most negative reduced
    gradient. The objective never increases.
    """
    n = a.size
    S = list(np.flatnonzero(a > 0))
    hist = []
    f = float(a @ Q @ a + ratio * (q @ a) ** 2)
    for it in range(1, max_iter + 1):
        idx = np.array(S)
        qS = q[idx]
        M = Q[np.ix_(idx, idx)] + ratio * np.outer(qS, qS)
        w = np.linalg.solve(M, np.ones(idx.size))
        cand = w / w.sum()
        if np.all(cand > 0):
            a = np.zeros(n)
            a[idx] = cand
            g = 2.0 * (Q @ a + ratio * (q @ a) * q)
            lam = float(np.mean(g[idx]))
            out = np.setdiff1d(np.arange(n), idx)
            f = float(a @ Q @ a + ratio * (q @ a) ** 2)
            if record:
                hist.append(f)
            if out.size == 0:
                return a, f, True, it, hist
            j = out[np.argmin(g[out])]
            if g[j] >= lam - 1e-12 * max(1.0, abs(lam)):
                return a, f, True, it, hist
            S.append(int(j))
            S.sort()
        else:
            cur = a[idx]
            d = cand - cur
            neg = d < 0
            steps = np.where(neg, cur / np.where(neg, -d, 1.0), np.inf)
            k = int(np.argmin(steps))
            a = np.zeros(n)
            a[idx] = np.maximum(cur + steps[k] * d, 0.0)
            a[idx[k]] = 0.0
            a /= a.sum()
            S = [s for s in S if a[s] > 0]
            f = float(a @ Q @ a + ratio * (q @ a) ** 2)
            if record:
                hist.append(f)
    return a, f, False, max_iter, hist


def _solve_active_set(Q, qs, ratio, targets, opts, record) -> BatchSolution:
    m, T = qs.shape
    X = initial_weights(targets, T, opts.init)
    fX = _objectives(X, Q, qs, ratio)
    converged = np.zeros(m, dtype=bool)
    iterations = np.zeros(m, dtype=int)
    histories = []
    for r in range(m):
        a, f, ok, it, hist = _active_set_row(Q, qs[r], ratio, X[r], opts.max_iter, record)
        X[r], fX[r], converged[r], iterations[r] = a, f, ok, it
        if record:
            histories.append([float(_objectives(initial_weights([targets[r]], T, opts.init), Q, qs[r:r + 1], ratio)[0])] + hist)
    res = pgd_residual(X, Q, qs, ratio, opts.power_iters)
    converged &= res <= opts.tol
    return BatchSolution(X, fX, converged, iterations, histories)


def _solve_pgd(Q: np.ndarray, qs: np.ndarray, ratio: float, targets,
               opts: SolverOptions, record: bool = False) -> BatchSolution:
    """Projected gradient, optionally accelerated.

    Step size is ``1/(2 lambda_max)`` with ``lambda_max`` from power iteration.
    A row stops once its projected-gradient residual
    ``||a - P(a - eta grad)||`` drops below ``opts.tol``.
    """
    m, T = qs.shape
    lam = _lambda_max(Q, qs, ratio, opts.power_iters)
    # power iteration approaches lambda_max from below
    eta = 1.0 / (2.0 * 1.02 * lam)

    X = initial_weights(targets, T, opts.init)
    fX = _objectives(X, Q, qs, ratio)
    Y = X.copy()
    mom = np.ones(m)
    active = np.ones(m, dtype=bool)
    converged = np.zeros(m, dtype=bool)
    iterations = np.zeros(m, dtype=int)
    history = [fX.copy()] if record else []

    for k in range(1, opts.max_iter + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        Qr, e = qs[rows], eta[rows, None]
        Yr = Y[rows] if opts.accelerate else X[rows]
        Xn = project_simplex(Yr - e * _gradients(Yr, Q, Qr, ratio))
        fn = _objectives(Xn, Q, Qr, ratio)
        worse = fn > fX[rows]
        if worse.any():
            # momentum overshot: restart from the last iterate with a plain step
            w = rows[worse]
            Xw = project_simplex(X[w] - eta[w, None] * _gradients(X[w], Q, qs[w], ratio))
            fw = _objectives(Xw, Q, qs[w], ratio)
            keep = fw > fX[w]
            for _ in range(30):  # step too long for the current estimate
                if not keep.any():
                    break
                eta[w[keep]] *= 0.5
                wk = w[keep]
                Xw[keep] = project_simplex(X[wk] - eta[wk, None] * _gradients(X[wk], Q, qs[wk], ratio))
                fw[keep] = _objectives(Xw[keep], Q, qs[wk], ratio)
                keep = fw > fX[w]
            # rounding-level ascent at the optimum: stay put
            Xw[keep], fw[keep] = X[w[keep]], fX[w[keep]]
            Xn[worse], fn[worse] = Xw, fw
            mom[w] = 1.0
        mom_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * mom[rows] ** 2))
        beta = np.where(worse, 0.0, (mom[rows] - 1.0) / mom_new)
        Y[rows] = Xn + beta[:, None] * (Xn - X[rows])
        mom[rows] = np.where(worse, 1.0, mom_new)
        X[rows], fX[rows] = Xn, fn
        iterations[rows] = k
        if record:
            history.append(fX.copy())

        if k % opts.check_every == 0 or k == opts.max_iter:
            G = _gradients(X[rows], Q, Qr, ratio)
            res = np.linalg.norm(X[rows] - project_simplex(X[rows] - e * G), axis=1)
            done = res <= opts.tol
            converged[rows[done]] = True
            active[rows[done]] = False
            Y[rows[done]] = X[rows[done]]

    return BatchSolution(X, fX, converged, iterations, history)


def solve_weights(problem: QpProblem, t: int, opts: SolverOptions = SolverOptions()) -> WeightVector:
    """Solve one per-timestep problem; non-convergence is flagged, not raised."""
    sol = solve_batch(problem.Q, problem.q[None, :], problem.ratio, [t], opts)
    return WeightVector(sol.alpha[0], t, bool(sol.converged[0]), int(sol.iterations[0]),
                        float(sol.objective[0]))


def error_bound(weights, problem: QpProblem) -> float:
    """``2 V alpha^T (Q + ratio q q^T) alpha``, the high-probability squared-error bound."""
    alpha = weights.alpha if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    return 2.0 * problem.V * problem.objective(alpha)


def inversions(episode: Episode, cache: TransitionCache) -> np.ndarray:
    """Row ``tau-1`` is ``(C_tau H_tau)^+ (y_tau - C_tau Phi(tau, 0) x0_hat)``."""
    T = cache.T
    if episode.outputs.shape[0] < T:
        raise ValueError(f"episode has {episode.outputs.shape[0]} outputs, cache needs {T}")
    C = cache.system.C[1 : T + 1]
    x0 = np.asarray(episode.x0_hat, dtype=float)
    free = np.einsum("tij,tjk,k->ti", C, cache.phi0[1 : T + 1], x0)
    resid = episode.outputs[:T] - free
    return np.einsum("tij,tj->ti", cache.ch_pinv[1 : T + 1], resid)


def estimate_input(weights, episode: Episode, cache: TransitionCache, t: int | None = None) -> np.ndarray:
    """Weighted sum of inversions: the estimate of the absorbed input at ``t``."""
    alpha = weights.alpha if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    if alpha.shape[-1] != cache.T:
        raise ValueError(f"weights have length {alpha.shape[-1]}, horizon is {cache.T}")
    return alpha @ inversions(episode, cache)


@dataclass(frozen=True, eq=False)
class EstimationResult:
    estimates: np.ndarray  # (T, n_u) in the original input coordinates
    bounds: np.ndarray  # (T,) squared-error bounds (units of V when V=1)
    weights: np.ndarray  # (T, T), row t = alpha_t
    converged: np.ndarray
    ratio: float
    absorbed: np.ndarray  # (T, n_x) estimates of B_t u_t

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all())

    def weight_vectors(self) -> list[WeightVector]:
        return [WeightVector(a, t, bool(c)) for t, (a, c) in enumerate(zip(self.weights, self.converged))]


class AdaptiveEstimator:
    """Per-system state (absorbed system, cache, ``Q``) shared across episodes."""

    def __init__(self, system: LtvSystem, metric: DistanceMetric = DistanceMetric(),
                 opts: SolverOptions = SolverOptions()):
        self.system = system
        self.metric = metric
        self.opts = opts
        self.absorbed, self.recover = absorb_input_matrix(system)
        self.cache = build_cache(self.absorbed)
        self.Q = build_q_matrix(self.cache)

    def bias_vectors(self, episode: Episode) -> np.ndarray:
        outputs = None
        if self.metric.output_weight > 0:
            outputs = episode.all_outputs(self.system.C[0])
        return bias_matrix(self.cache, self.metric, outputs)

    def estimate(self, episode: Episode, ratio: float, V: float = 1.0) -> EstimationResult:
        T = self.cache.T
        qs = self.bias_vectors(episode)
        sol = solve_batch(self.Q, qs, ratio, np.arange(T), self.opts)
        absorbed = sol.alpha @ inversions(episode, self.cache)
        estimates = self.recover(absorbed)
        bounds = 2.0 * V * sol.objective
        return EstimationResult(estimates, bounds, sol.alpha, sol.converged, ratio, absorbed)


def estimate_sequence(episode: Episode, system: LtvSystem, ratio: float,
                      metric: DistanceMetric = DistanceMetric(),
                      opts: SolverOptions = SolverOptions(), V: float = 1.0) -> EstimationResult:
    """Estimate ``u_0..u_{T-1}`` for one episode."""
    return AdaptiveEstimator(system, metric, opts).estimate(episode, ratio, V)


def sparsity_profile(weights, threshold: float = 1e-6) -> np.ndarray:
    """Per-target count of weights above ``threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if isinstance(weights, EstimationResult):
        W = weights.weights
    else:
        W = np.array([w.alpha if isinstance(w, WeightVector) else w for w in weights], dtype=float)
    return np.count_nonzero(np.atleast_2d(W) > threshold, axis=1)
