"""Learning from observations on the inverted pendulum.

Angle convention: ``phi = 0`` is upright. The actuator torque enters the
dynamics with a negative sign, so a policy output ``a`` produces
``omega_dot = (g/l) sin(phi) - damping * omega - a / (m l^2)``. With that
convention the expert ``15 sin(phi) + 30 phi + 8 omega`` and any cloned policy
``k_phi phi + k_omega omega`` push the pendulum back to upright when their
gains are positive.

Integration is semi-implicit Euler (velocity first, then angle).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dynsys import Episode, NoiseModel, NonlinearSystem, linearize
from .estimator import AdaptiveEstimator, DistanceMetric, SolverOptions
from .umvie import umv_estimate_sequence

ESTIMATORS = ("adalie", "umvie", "oracle")


@dataclass(frozen=True)
class PendulumParams:
    m: float = 1.0
    l: float = 1.0
    g: float = 10.0
    damping: float = 0.05
    dt: float = 0.05
    u_max: float = 100.0
    perturbation: float = 0.10

    def __post_init__(self):
        for name in ("m", "l", "g", "damping", "dt", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.perturbation < 0:
            raise ValueError("perturbation must be nonnegative")

    def perturbed(self, rng: np.random.Generator) -> "PendulumParams":
        """Multiply each physical parameter by ``1 + U(-p, p)``."""
        p = self.perturbation
        scale = lambda v: v * (1.0 + rng.uniform(-p, p))  # noqa: E731
        return replace(self, m=scale(self.m), l=scale(self.l), g=scale(self.g),
                       damping=scale(self.damping))

    @property
    def inertia(self) -> float:
        return self.m * self.l**2


@dataclass(frozen=True)
class LinearPolicy:
    k_phi: float
    k_omega: float
    offset: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.k_phi) and math.isfinite(self.k_omega)):
            raise ValueError("policy gains must be finite")

    def __call__(self, phi: float, omega: float) -> float:
        return self.k_phi * phi + self.k_omega * omega + self.offset


def expert_control(phi: float, omega: float) -> float:
    """Feedback-linearizing expert, before saturation."""
    return 15.0 * math.sin(phi) + 30.0 * phi + 8.0 * omega


def wrap_angle(phi):
    """Map to ``[-pi, pi)``."""
    return (np.asarray(phi) + np.pi) % (2 * np.pi) - np.pi


def pendulum_step(params: PendulumParams, phi: float, omega: float, torque: float) -> tuple[float, float]:
    acc = (params.g / params.l) * math.sin(phi) - params.damping * omega - torque / params.inertia
    omega = omega + params.dt * acc
    return phi + params.dt * omega, omega


def pendulum_system(params: PendulumParams, T: int = 100) -> NonlinearSystem:
    """Control-affine form of one integrator step, full-state measurement."""
    dt, s, d, J = params.dt, params.g / params.l, params.damping, params.inertia

    def g(x):
        w = x[1] + dt * (s * np.sin(x[0]) - d * x[1])
        return np.array([x[0] + dt * w, w])

    def dg(x):
        dw = np.array([dt * s * np.cos(x[0]), 1.0 - dt * d])
        return np.array([[1.0 + dt * dw[0], dt * dw[1]], dw])

    h_const = np.array([[-dt * dt / J], [-dt / J]])
    return NonlinearSystem(g=g, h=lambda x: h_const, dg=dg, C=np.eye(2), dt=dt, name="pendulum", T=T)


@dataclass(frozen=True)
class Rollout:
    """Pendulum trajectory. ``actions[t]`` is the saturated torque applied at ``t``."""

    states: np.ndarray  # (N+1, 2) true (phi, omega), phi unwrapped
    observations: np.ndarray  # (N+1, 2) noisy, phi wrapped
    actions: np.ndarray  # (N,)

    def episode(self, start: int = 0, length: int | None = None) -> Episode:
        """Estimation window anchored on the measurement at ``start`` (C = I)."""
        n = self.actions.size
        length = n - start if length is None else length
        obs = self.observations.copy()
        obs[:, 0] = np.unwrap(obs[:, 0])
        ys = obs[start:start + length + 1]
        return Episode(x0_hat=ys[0].copy(), outputs=ys[1:], true_inputs=self.actions[start:start + length, None],
                       x0_true=self.states[start], y0=ys[0], states=self.states[start:start + length + 1])


def pendulum_rollout(params: PendulumParams, policy, noise: NoiseModel, x0, duration: float,
                     obs_noise: NoiseModel | None = None, observe: bool = False) -> Rollout:
    """Simulate ``duration`` seconds.

    ``noise`` perturbs the torque (process noise on the input); ``obs_noise``
    (defaults to ``noise``) perturbs the measured state. With ``observe=True``
    the policy acts on the noisy wrapped measurement, otherwise on the true
    wrapped state (the expert's view).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    obs_noise = noise if obs_noise is None else obs_noise
    rng = np.random.default_rng(noise.seed)
    n = int(round(duration / params.dt))
    phi, omega = float(x0[0]), float(x0[1])
    states = np.empty((n + 1, 2))
    observations = np.empty((n + 1, 2))
    actions = np.empty(n)
    for t in range(n + 1):
        states[t] = phi, omega
        y = np.array([wrap_angle(phi), omega]) + obs_noise.sample(rng, 2)
        y[0] = wrap_angle(y[0])
        observations[t] = y
        if t == n:
            break
        view = y if observe else (float(wrap_angle(phi)), omega)
        a = policy(view[0], view[1]) + float(noise.sample(rng, 1)[0])
        a = float(np.clip(a, -params.u_max, params.u_max))
        actions[t] = a
        phi, omega = pendulum_step(params, phi, omega, a)
    return Rollout(states, observations, actions)


def stabilized(rollout: Rollout, phi_tol: float = 0.2, omega_tol: float = 0.5) -> bool:
    phi, omega = rollout.states[-1]
    return bool(abs(wrap_angle(phi)) <= phi_tol and abs(omega) <= omega_tol)


def behavioral_clone(observations, targets) -> LinearPolicy:
    """Least-squares fit of ``target ~ k_phi phi + k_omega omega``."""
    X = np.atleast_2d(np.asarray(observations, dtype=float))
    y = np.asarray(targets, dtype=float).reshape(-1)
    if X.shape[0] < 2 or X.shape[0] != y.size:
        raise ValueError("need at least two (observation, target) pairs of matching length")
    if np.linalg.matrix_rank(X) < 2:
        raise ValueError("regressor matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return LinearPolicy(float(coef[0]), float(coef[1]))


def closed_loop_matrix(policy: LinearPolicy, params: PendulumParams) -> np.ndarray:
    """One integrator step of the upright linearization under the policy."""
    dt, s, d, J = params.dt, params.g / params.l, params.damping, params.inertia
    # omega+ = omega + dt (s phi - d omega - (k_phi phi + k_omega omega)/J)
    row_w = np.array([dt * (s - policy.k_phi / J), 1.0 - dt * (d + policy.k_omega / J)])
    row_p = np.array([1.0, 0.0]) + dt * row_w
    return np.array([row_p, row_w])


def closed_loop_eigenvalues(policy: LinearPolicy, params: PendulumParams = PendulumParams()) -> np.ndarray:
    """Stable iff every returned eigenvalue lies strictly inside the unit circle."""
    return np.linalg.eigvals(closed_loop_matrix(policy, params))


def is_stable(policy: LinearPolicy, params: PendulumParams = PendulumParams()) -> bool:
    return bool(np.max(np.abs(closed_loop_eigenvalues(policy, params))) < 1.0)


@dataclass(frozen=True)
class LfoConfig:
    demos: int = 100
    demo_duration: float = 10.0
    eval_duration: float = 100.0
    window: int = 2
    process_noise: float = 10.0
    measurement_noise: float = 0.1
    ratio: float = 100.0
    estimators: tuple = ("adalie", "umvie", "oracle")
    seed: int = 0
    params: PendulumParams = PendulumParams()
    metric: DistanceMetric = DistanceMetric()

    def __post_init__(self):
        if self.demos < 0:
            raise ValueError("demos must be nonnegative")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        object.__setattr__(self, "estimators", tuple(self.estimators))


@dataclass
class DemoOutcome:
    estimator: str
    demo: int
    success: bool
    k_phi: float = float("nan")
    k_omega: float = float("nan")
    max_eig: float = float("nan")
    error: str | None = None


@dataclass
class LfoResult:
    outcomes: dict = field(default_factory=dict)  # estimator -> list[DemoOutcome]
    expert_successes: int = 0
    demos: int = 0

    def successes(self, estimator: str) -> int:
        return sum(o.success for o in self.outcomes.get(estimator, []))

    def trials(self, estimator: str) -> int:
        return len(self.outcomes.get(estimator, []))

    def mean_policy(self, estimator: str) -> LinearPolicy | None:
        gains = [(o.k_phi, o.k_omega) for o in self.outcomes.get(estimator, []) if o.error is None]
        if not gains:
            return None
        k = np.mean(gains, axis=0)
        return LinearPolicy(float(k[0]), float(k[1]))


def _noises(config: LfoConfig, seed: int) -> tuple[NoiseModel, NoiseModel]:
    return NoiseModel(config.process_noise, "uniform", seed), NoiseModel(config.measurement_noise, "uniform", seed)


def _start(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])


def estimate_actions(rollout: Rollout, params: PendulumParams, estimator: str, config: LfoConfig) -> np.ndarray:
    """Estimated torque sequence for one demonstration, window by window."""
    n = rollout.actions.size
    if estimator == "oracle":
        return rollout.actions.copy()
    nl = pendulum_system(params)
    vx = config.measurement_noise**2 / 6.0  # uniform per component of a 2-vector
    out = np.empty(n)
    for start in range(0, n, config.window):
        length = min(config.window, n - start)
        ep = rollout.episode(start, length)
        lin = linearize(nl, ep.outputs, ep.x0_hat)
        if estimator == "adalie":
            est = AdaptiveEstimator(lin, config.metric, SolverOptions())
            out[start:start + length] = est.estimate(ep, config.ratio).estimates[:, 0]
        else:
            # the torque noise is part of the input being estimated, so no state noise remains
            res = umv_estimate_sequence(ep, lin, np.zeros((2, 2)), vx * np.eye(2), vx * np.eye(2))
            out[start:start + length] = res.estimates[:, 0]
    return out


def run_demo(k: int, config: LfoConfig) -> tuple[bool, list[DemoOutcome]]:
    """Demonstrate, estimate, clone and evaluate for every configured estimator."""
    seed = int(np.random.SeedSequence([config.seed, 7919, k]).generate_state(1)[0])
    rng = np.random.default_rng(seed)
    params = config.params.perturbed(rng)
    x0 = _start(rng)
    proc, meas = _noises(config, seed)
    demo = pendulum_rollout(params, expert_control, proc, x0, config.demo_duration, obs_noise=meas)
    expert_ok = stabilized(pendulum_rollout(params, expert_control, proc, x0, config.eval_duration,
                                            obs_noise=meas))
    eval_x0 = _start(rng)
    eval_seed = seed ^ 0x5A5A5A5A
    outcomes = []
    for name in config.estimators:
        try:
            targets = estimate_actions(demo, params, name, config)
            policy = behavioral_clone(demo.observations[:-1], targets)
            ev_proc, ev_meas = _noises(config, eval_seed)
            ev = pendulum_rollout(params, policy, ev_proc, eval_x0, config.eval_duration,
                                  obs_noise=ev_meas, observe=True)
            eig = float(np.max(np.abs(closed_loop_eigenvalues(policy, config.params))))
            outcomes.append(DemoOutcome(name, k, stabilized(ev), policy.k_phi, policy.k_omega, eig))
        except Exception as exc:  # noqa: BLE001 - a failed demo counts as a failure
            outcomes.append(DemoOutcome(name, k, False, error=f"{type(exc).__name__}: {exc}"))
    return expert_ok, outcomes


def _run_demo_args(args):
    return run_demo(*args)


def run_lfo(config: LfoConfig = LfoConfig(), jobs: int = 1) -> LfoResult:
    tasks = [(k, config) for k in range(config.demos)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_demo_args, tasks))
    else:
        outs = [run_demo(*t) for t in tasks]
    result = LfoResult({name: [] for name in config.estimators}, 0, config.demos)
    for expert_ok, demo_outcomes in outs:
        result.expert_successes += int(expert_ok)
        for o in demo_outcomes:
            result.outcomes[o.estimator].append(o)
    return result


LFO_HEADER = ["estimator", "demo", "success", "k_phi", "k_omega", "max_abs_eig"]


def write_lfo_csv(result: LfoResult, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LFO_HEADER)
        for name, outs in result.outcomes.items():
            for o in outs:
                w.writerow([name, o.demo, int(o.success), repr(o.k_phi), repr(o.k_omega), repr(o.max_eig)])
    return path


def summary_lines(result: LfoResult) -> list[str]:
    lines = [f"{'estimator':<10} {'stabilizing':>12} {'trials':>7}"]
    for name in result.outcomes:
        lines.append(f"{name:<10} {result.successes(name):>12} {result.trials(name):>7}")
    lines.append(f"{'expert':<10} {result.expert_successes:>12} {result.demos:>7}")
    return lines
