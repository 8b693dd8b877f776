"""Benchmark catalog and experiment grid comparing the adaptive estimator with UMV-IE."""

from __future__ import annotations

import csv
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .dynsys import (Episode, LtvSystem, NoiseModel, NonlinearSystem, linearize,
                     perturb_system, simulate)
from .estimator import AdaptiveEstimator, DistanceMetric, SolverOptions
from .umvie import noise_covariances, umv_estimate_sequence

log = logging.getLogger(__name__)

SIGNAL_KINDS = ("step", "sine", "ramp", "triangle", "ramp-then-step", "ramp-then-zero",
                "step-then-zero", "sine-plus-step")
SYSTEMS = ("spring-mass", "double-integrator", "email-server", "http-server", "random-stable",
           "nonlin-1", "nonlin-2")
ESTIMATORS = ("adalie", "umvie")
DEFAULT_RATIO_GRID = tuple(np.logspace(-3, 3, 13).tolist())


@dataclass(frozen=True)
class SignalSpec:
    """Scalar test input. ``period`` defaults to ``T/2``, ``switch`` to ``T/2``."""

    kind: str
    amplitude: float = 1.0
    period: float | None = None
    switch: int | None = None

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}; choose from {SIGNAL_KINDS}")


def make_signal(signal: SignalSpec | str, T: int) -> np.ndarray:
    """Length-``T`` input sequence ``u_0..u_{T-1}``.

    Ramps rise at ``1/T`` per step; the ramp segment of the two ramp-then-*
    kinds rises at ``1/switch`` so it reaches the unit level at the switch.
    """
    if isinstance(signal, str):
        signal = SignalSpec(signal)
    t = np.arange(T, dtype=float)
    period = signal.period or T / 2
    sw = signal.switch if signal.switch is not None else T // 2
    kind = signal.kind
    if kind == "step":
        u = np.ones(T)
    elif kind == "sine":
        u = np.sin(2 * np.pi * t / period)
    elif kind == "ramp":
        u = t / T
    elif kind == "triangle":
        u = 1.0 - np.abs(2.0 * t / T - 1.0)
    elif kind == "ramp-then-step":
        u = np.where(t < sw, t / sw, 1.0)
    elif kind == "ramp-then-zero":
        u = np.where(t < sw, t / sw, 0.0)
    elif kind == "step-then-zero":
        u = np.where(t < sw, 1.0, 0.0)
    else:  # sine-plus-step
        u = 1.0 + np.sin(2 * np.pi * t / period)
    return signal.amplitude * u


def _spring_mass(T: int, m=1.0, k=1.0, c=1.0, dt=1.0) -> LtvSystem:
    Ac = np.array([[0.0, 1.0], [-k / m, -c / m]])
    Bc = np.array([[0.0], [1.0 / m]])
    # zero-order hold via the augmented exponential
    aug = np.zeros((3, 3))
    aug[:2, :2], aug[:2, 2:] = Ac, Bc
    E = expm(aug * dt)
    return LtvSystem.time_invariant(E[:2, :2], E[:2, 2:], np.eye(2), T, "spring-mass")


def _random_stable(T: int, seed: int, n: int = 2) -> LtvSystem:
    rng = np.random.default_rng(seed)
    while True:
        A = rng.normal(0.0, 0.6, size=(n, n))
        if np.max(np.abs(np.linalg.eigvals(A))) < 1.0:
            break
    B = rng.normal(0.0, 1.0, size=(n, 1))
    return LtvSystem.time_invariant(A, B, np.eye(n), T, "random-stable")


def _nonlin_1(T: int, dt: float = 0.1) -> NonlinearSystem:
    # xdot = -x^3 + u, forward Euler
    return NonlinearSystem(
        g=lambda x: x - dt * x**3,
        h=lambda x: np.array([[dt]]),
        dg=lambda x: np.array([[1.0 - 3.0 * dt * x[0] ** 2]]),
        C=np.eye(1), dt=dt, name="nonlin-1", T=T)


def _nonlin_2(T: int, dt: float = 0.1) -> NonlinearSystem:
    # x1dot = x2, x2dot = -sin(x1) - x2 + u, forward Euler
    return NonlinearSystem(
        g=lambda x: np.array([x[0] + dt * x[1], x[1] + dt * (-np.sin(x[0]) - x[1])]),
        h=lambda x: np.array([[0.0], [dt]]),
        dg=lambda x: np.array([[1.0, dt], [-dt * np.cos(x[0]), 1.0 - dt]]),
        C=np.eye(2), dt=dt, name="nonlin-2", T=T)


def make_system(name: str, T: int = 100, seed: int = 0):
    """Catalog lookup; returns an :class:`LtvSystem` or a :class:`NonlinearSystem`."""
    if name == "spring-mass":
        return _spring_mass(T)
    if name == "double-integrator":
        return LtvSystem.time_invariant([[1.0, 1.0], [0.0, 1.0]], [[0.0], [1.0]], np.eye(2), T,
                                        "double-integrator")
    if name == "email-server":
        # first-order queue model, y+ = 0.43 y + 0.47 u
        return LtvSystem.time_invariant([[0.43]], [[0.47]], [[1.0]], T, "email-server")
    if name == "http-server":
        # second-order CPU/memory model; single input, gains rescaled to O(1)
        A = [[0.54, -0.11], [-0.026, 0.63]]
        B = [[-0.85], [-0.025]]
        return LtvSystem.time_invariant(A, B, np.eye(2), T, "http-server")
    if name == "random-stable":
        return _random_stable(T, seed)
    if name == "nonlin-1":
        return _nonlin_1(T)
    if name == "nonlin-2":
        return _nonlin_2(T)
    raise ValueError(f"unknown system {name!r}; choose from {SYSTEMS}")


@dataclass(frozen=True)
class BenchConfig:
    systems: tuple = SYSTEMS
    signals: tuple = SIGNAL_KINDS
    episodes: int = 20
    T: int = 100
    noise_bound: float = 0.2
    sigma: float = 0.05
    ratio_grid: tuple = DEFAULT_RATIO_GRID
    cv_episodes: int = 5
    seed: int = 0
    metric: DistanceMetric = DistanceMetric()
    noise_family: str = "uniform"

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if self.T < 2:
            raise ValueError("T must be >= 2")
        if len(self.ratio_grid) == 0:
            raise ValueError("ratio grid must be non-empty")
        sigs = tuple(s if isinstance(s, SignalSpec) else SignalSpec(s) for s in self.signals)
        object.__setattr__(self, "signals", sigs)
        object.__setattr__(self, "systems", tuple(self.systems))
        object.__setattr__(self, "ratio_grid", tuple(float(r) for r in self.ratio_grid))


def derive_seed(master: int, *keys) -> int:
    """Stable per-cell seed; independent of scheduling order."""
    words = [zlib.crc32(str(k).encode()) for k in keys]
    return int(np.random.SeedSequence([master & 0xFFFFFFFF, *words]).generate_state(1)[0])


def rms_error(estimates, true_inputs) -> float:
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(true_inputs, dtype=float)
    if est.shape[0] != tru.shape[0]:
        raise ValueError(f"length mismatch: {est.shape[0]} estimates vs {tru.shape[0]} inputs")
    err = (est - tru).reshape(est.shape[0], -1)
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


class _CellModel:
    """Estimation-side models for one (system, signal) cell."""

    def __init__(self, truth, config: BenchConfig, seed: int):
        self.truth = truth
        self.config = config
        self.seed = seed
        self.opts = SolverOptions()
        self._linear = None
        if isinstance(truth, LtvSystem):
            model = perturb_system(truth, config.sigma, seed)
            self._linear = (model, AdaptiveEstimator(model, config.metric, self.opts))

    def models(self, episode: Episode):
        if self._linear is not None:
            return self._linear
        lin = linearize(self.truth, episode.outputs, episode.x0_hat)
        model = perturb_system(lin, self.config.sigma, self.seed)
        return model, AdaptiveEstimator(model, self.config.metric, self.opts)


def _episode(truth, signal: np.ndarray, config: BenchConfig, seed: int) -> Episode:
    noise = NoiseModel(config.noise_bound, config.noise_family, seed)
    return simulate(truth, lambda t, y: signal[t:t + 1], noise, np.zeros(truth.n_x), config.T)


def select_ratio(scores: dict[float, float]) -> float:
    """Grid ratio with the lowest score; near-ties go to the largest ratio."""
    best = min(scores.values())
    tied = [r for r, s in scores.items() if s <= best + 1e-12 + 1e-9 * abs(best)]
    return max(tied)


def cross_validate_ratio(system, signal, config: BenchConfig, seed: int | None = None,
                         return_scores: bool = False):
    """Pick the ratio minimizing mean RMS on held-out calibration episodes."""
    grid = config.ratio_grid
    if len(grid) == 1:
        return (grid[0], {grid[0]: float("nan")}) if return_scores else grid[0]
    if isinstance(system, str):
        system = make_system(system, config.T, derive_seed(config.seed, "system", system))
    kind = signal.kind if isinstance(signal, SignalSpec) else str(signal)
    if seed is None:
        seed = derive_seed(config.seed, system.name, kind)
    cell = _CellModel(system, config, seed)
    u = make_signal(signal, config.T)
    totals = {r: 0.0 for r in grid}
    for k in range(config.cv_episodes):
        ep = _episode(system, u, config, derive_seed(seed, "calibration", k))
        _, est = cell.models(ep)
        for r in grid:
            totals[r] += rms_error(est.estimate(ep, r).estimates, ep.true_inputs)
    scores = {r: v / config.cv_episodes for r, v in totals.items()}
    ratio = select_ratio(scores)
    if ratio in (min(grid), max(grid)) and len(set(scores.values())) > 1:
        log.warning("cross-validation picked grid endpoint %g for %s/%s; consider widening the grid",
                    ratio, system.name, kind)
    return (ratio, scores) if return_scores else ratio


@dataclass
class CellResult:
    system: str
    signal: str
    estimator: str
    rms: list = field(default_factory=list)
    ratio: float | None = None
    nonconverged: int = 0
    error: str | None = None
    trace: np.ndarray | None = field(default=None, repr=False)
    sparsity: np.ndarray | None = field(default=None, repr=False)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rms)) if self.rms else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.rms, ddof=1)) if len(self.rms) > 1 else 0.0


@dataclass
class ResultTable:
    cells: list = field(default_factory=list)
    truths: dict = field(default_factory=dict)

    def get(self, system: str, signal: str, estimator: str) -> CellResult:
        for c in self.cells:
            if (c.system, c.signal, c.estimator) == (system, signal, estimator):
                return c
        raise KeyError((system, signal, estimator))

    def pairs(self) -> list[tuple[str, str]]:
        seen = []
        for c in self.cells:
            if (c.system, c.signal) not in seen:
                seen.append((c.system, c.signal))
        return seen

    def winner(self, system: str, signal: str) -> str:
        means = {e: self.get(system, signal, e).mean for e in ESTIMATORS}
        means = {e: m for e, m in means.items() if not math.isnan(m)}
        return min(means, key=means.get) if means else ""

    def wins(self, estimator: str = "adalie") -> int:
        return sum(self.winner(s, g) == estimator for s, g in self.pairs())


def run_cell(system_name: str, signal: SignalSpec, config: BenchConfig) -> tuple[CellResult, CellResult, np.ndarray]:
    seed = derive_seed(config.seed, system_name, signal.kind)
    ada = CellResult(system_name, signal.kind, "adalie")
    umv = CellResult(system_name, signal.kind, "umvie")
    u = make_signal(signal, config.T)
    try:
        truth = make_system(system_name, config.T, derive_seed(config.seed, "system", system_name))
        ratio = cross_validate_ratio(truth, signal, config, seed)
        ada.ratio = ratio
        cell = _CellModel(truth, config, seed)
        for k in range(config.episodes):
            ep = _episode(truth, u, config, derive_seed(seed, "episode", k))
            model, est = cell.models(ep)
            res = est.estimate(ep, ratio)
            ada.rms.append(rms_error(res.estimates, ep.true_inputs))
            ada.nonconverged += int((~res.converged).sum())
            noise = NoiseModel(config.noise_bound, config.noise_family, 0)
            umv_res = umv_estimate_sequence(ep, model, *noise_covariances(model, noise))
            umv.rms.append(rms_error(umv_res.estimates, ep.true_inputs))
            umv.nonconverged += int(umv_res.regularized)
            if k == 0:
                ada.trace = res.estimates[:, 0].copy()
                umv.trace = umv_res.estimates[:, 0].copy()
                ada.sparsity = (res.weights > 1e-6).sum(axis=1)
    except Exception as exc:  # noqa: BLE001 - the grid records failures and moves on
        log.exception("cell %s/%s failed", system_name, signal.kind)
        ada.error = umv.error = f"{type(exc).__name__}: {exc}"
    return ada, umv, u


def _run_cell_args(args):
    return run_cell(*args)


def run_grid(config: BenchConfig, jobs: int = 1) -> ResultTable:
    """Simulate every (system, signal) cell and estimate with both methods."""
    tasks = [(s, g, config) for s in config.systems for g in config.signals]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outs = list(pool.map(_run_cell_args, tasks))
    else:
        outs = [run_cell(*t) for t in tasks]
    table = ResultTable()
    for ada, umv, u in outs:
        table.cells.extend([ada, umv])
        table.truths[(ada.system, ada.signal)] = u
    return table


def noise_sweep(system: str, signal, b_values, config: BenchConfig, jobs: int = 1) -> dict[float, ResultTable]:
    if any(b <= 0 for b in b_values):
        raise ValueError("noise bounds must be positive")
    sig = signal if isinstance(signal, SignalSpec) else SignalSpec(signal)
    return {float(b): run_grid(replace(config, systems=(system,), signals=(sig,), noise_bound=float(b)), jobs)
            for b in b_values}


RESULT_HEADER = ["system", "signal", "estimator", "episode", "rms"]
SUMMARY_HEADER = ["system", "signal", "adalie_mean", "adalie_std", "umvie_mean", "umvie_std",
                  "ratio", "nonconverged", "winner", "error"]


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def emit_report(table: ResultTable, out_dir, plots: bool = False,
                sweep: dict[float, ResultTable] | None = None) -> list[Path]:
    """Write ``results.csv``, ``summary.csv`` and, optionally, static plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "results.csv", out / "summary.csv"]
    with open(written[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_HEADER)
        for c in table.cells:
            for k, r in enumerate(c.rms):
                w.writerow([c.system, c.signal, c.estimator, k, _fmt(r)])
    with open(written[1], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s, g in table.pairs():
            a, m = table.get(s, g, "adalie"), table.get(s, g, "umvie")
            w.writerow([s, g, _fmt(a.mean), _fmt(a.std), _fmt(m.mean), _fmt(m.std), _fmt(a.ratio),
                        a.nonconverged, table.winner(s, g), a.error or ""])
    if sweep:
        written.append(write_sweep_csv(sweep, out))
    if plots:
        written += _plot(table, out, sweep)
    return written


def write_sweep_csv(sweep: dict[float, ResultTable], out_dir) -> Path:
    """One summary row per (noise bound, system, signal)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "noise_sweep.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["b"] + SUMMARY_HEADER)
        for b, tab in sweep.items():
            for s, g in tab.pairs():
                a, m = tab.get(s, g, "adalie"), tab.get(s, g, "umvie")
                w.writerow([_fmt(b), s, g, _fmt(a.mean), _fmt(a.std), _fmt(m.mean), _fmt(m.std),
                            _fmt(a.ratio), a.nonconverged, tab.winner(s, g), a.error or ""])
    return path


def plot_sweep(sweep: dict[float, ResultTable], out_dir) -> list[Path]:
    return _plot(ResultTable(), Path(out_dir), sweep)


def _plot(table: ResultTable, out: Path, sweep) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    for s, g in table.pairs():
        a, m = table.get(s, g, "adalie"), table.get(s, g, "umvie")
        if a.trace is None:
            continue
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(table.truths[(s, g)], "b", label="input")
        ax.plot(m.trace, "g", alpha=0.6, label="UMV-IE")
        ax.plot(a.trace, "r", label="AdaL-IE")
        ax.set_xlabel("t")
        ax.legend(fontsize=7)
        path = out / f"{s}_{g}_trace.png"
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        files.append(path)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(np.arange(a.sparsity.size), a.sparsity)
        ax.set_xlabel("t")
        ax.set_ylabel("non-zero weights")
        path = out / f"{s}_{g}_sparsity.png"
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        files.append(path)
    if sweep:
        bs = sorted(sweep)
        for s, g in sweep[bs[0]].pairs():
            fig, ax = plt.subplots(figsize=(5, 3))
            for est, col in (("adalie", "r"), ("umvie", "g")):
                ax.errorbar(bs, [sweep[b].get(s, g, est).mean for b in bs],
                            yerr=[sweep[b].get(s, g, est).std for b in bs], color=col, label=est)
            ax.set_xscale("log")
            ax.set_yscale("log")
            ax.set_xlabel("noise bound b")
            ax.set_ylabel("mean RMS")
            ax.legend(fontsize=7)
            path = out / f"{s}_{g}_noise.png"
            fig.tight_layout()
            fig.savefig(path)
            plt.close(fig)
            files.append(path)
    return files
