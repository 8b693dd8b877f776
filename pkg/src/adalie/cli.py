"""Command-line entry point: ``adalie {estimate,bench,sweep,lfo}``.

Exit codes: 0 success, 1 usage or parse error, 2 domain error (the system is
not strongly observable or an input matrix is rank deficient).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, lfo
from .config import (ConfigError, load_bench_config, load_lfo_config, load_sweep_config, load_system,
                     read_measurements)
from .dynsys import (Episode, LtvSystem, NoiseModel, NotStronglyObservableError, RankDeficientError,
                     linearize)
from .estimator import AdaptiveEstimator, noise_variance_constant, sparsity_profile
from .umvie import InputNotEstimableError, noise_covariances, umv_estimate_sequence

log = logging.getLogger("adalie")

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _ratio(text: str):
    if text == "cv":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number or 'cv', got {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("ratio must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--out", default="out", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")
    common.add_argument("--plots", action="store_true", help="also write PNG figures")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="adalie", description="Input estimation from noisy outputs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", parents=[common], help="estimate inputs from a measurement CSV")
    p.add_argument("system", help="system YAML document")
    p.add_argument("measurements", help="CSV with columns t, y0, y1, ...")
    p.add_argument("--ratio", type=_ratio, default="cv", help="Lipschitz-to-noise ratio or 'cv'")
    p.add_argument("--estimator", choices=("adalie", "umvie"), default="adalie")
    p.add_argument("--noise-bound", type=float, default=0.2, help="noise bound b (covariances, V, cv)")
    p.add_argument("--beta", type=float, default=0.1, help="failure probability for the bound column")
    p.add_argument("--cv-signal", default="sine", choices=bench.SIGNAL_KINDS,
                   help="signal used to calibrate the ratio when --ratio cv")
    p.add_argument("--weights", action="store_true", help="also write the dense weight matrix")

    for name, text in (("bench", "run the benchmark grid"), ("sweep", "run a noise-bound sweep"),
                       ("lfo", "run the pendulum learning-from-observations pipeline")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("config", help="YAML run document")
    return parser


def _episode_from_measurements(Y: np.ndarray, U, system) -> tuple[Episode, LtvSystem]:
    C0 = system.C[0] if isinstance(system, LtvSystem) else system.C
    x0_hat = np.linalg.pinv(C0) @ Y[0]
    n_u = system.n_u
    T = Y.shape[0] - 1
    true_inputs = np.full((T, n_u), np.nan) if U is None or U.shape[1] != n_u else U[:T]
    ep = Episode(x0_hat=x0_hat, outputs=Y[1:], true_inputs=true_inputs, x0_true=x0_hat, y0=Y[0])
    model = system if isinstance(system, LtvSystem) else linearize(system, ep.outputs, x0_hat)
    return ep, model


def _write_estimates(path: Path, estimates, bounds=None, converged=None, nnz=None) -> None:
    n_u = estimates.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"u_hat{j}" for j in range(n_u)] + ["bound", "converged", "nnz"])
        for t, row in enumerate(estimates):
            w.writerow([t] + [repr(float(v)) for v in row]
                       + ["" if bounds is None else repr(float(bounds[t])),
                          "" if converged is None else int(converged[t]),
                          "" if nnz is None else int(nnz[t])])


def cmd_estimate(args) -> int:
    Y, U = read_measurements(args.measurements)
    system = load_system(args.system, T=Y.shape[0] - 1)
    if Y.shape[1] != system.n_y:
        raise ConfigError(args.measurements, f"{Y.shape[1]} output columns but the system has n_y={system.n_y}", 1)
    ep, model = _episode_from_measurements(Y, U, system)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = NoiseModel(args.noise_bound, "uniform", 0)
    if args.estimator == "umvie":
        res = umv_estimate_sequence(ep, model, *noise_covariances(model, noise))
        _write_estimates(out / "estimates.csv", res.estimates)
        print(f"wrote {out / 'estimates.csv'} ({ep.T} rows, UMV-IE)")
        return EXIT_OK
    est = AdaptiveEstimator(model)
    ratio = args.ratio
    if ratio == "cv":
        config = bench.BenchConfig(T=ep.T, noise_bound=args.noise_bound, sigma=0.0,
                                   seed=0 if args.seed is None else args.seed)
        ratio = bench.cross_validate_ratio(system, bench.SignalSpec(args.cv_signal), config)
        print(f"cross-validated ratio: {ratio:g}")
    V = noise_variance_constant(args.noise_bound, args.beta)
    res = est.estimate(ep, ratio, V)
    _write_estimates(out / "estimates.csv", res.estimates, res.bounds, res.converged, sparsity_profile(res))
    if args.weights:
        np.savetxt(out / "weights.csv", res.weights, delimiter=",", fmt="%.17g")
    if not res.all_converged:
        log.warning("%d weight problems hit the iteration cap", int((~res.converged).sum()))
    print(f"wrote {out / 'estimates.csv'} ({ep.T} rows, ratio {ratio:g})")
    return EXIT_OK


def _print_summary(table: bench.ResultTable) -> None:
    print(f"{'system':<18} {'signal':<15} {'AdaL-IE':>9} {'UMV-IE':>9}  winner")
    for s, g in table.pairs():
        a, m = table.get(s, g, "adalie"), table.get(s, g, "umvie")
        if a.error:
            print(f"{s:<18} {g:<15} {'failed':>9} {'':>9}  {a.error}")
            continue
        print(f"{s:<18} {g:<15} {a.mean:>9.4f} {m.mean:>9.4f}  {table.winner(s, g)}")
    print(f"AdaL-IE wins {table.wins('adalie')} of {len(table.pairs())} cells")


def cmd_bench(args) -> int:
    config = load_bench_config(args.config, args.seed)
    table = bench.run_grid(config, args.jobs)
    bench.emit_report(table, args.out, args.plots)
    _print_summary(table)
    failed = [c for c in table.cells if c.error]
    return EXIT_USAGE if table.cells and len(failed) == len(table.cells) else EXIT_OK


def cmd_sweep(args) -> int:
    system, signal, b_values, config = load_sweep_config(args.config, args.seed)
    sweep = bench.noise_sweep(system, signal, b_values, config, args.jobs)
    bench.write_sweep_csv(sweep, args.out)
    if args.plots:
        bench.plot_sweep(sweep, args.out)
    print(f"{'b':>8} {'AdaL-IE':>9} {'UMV-IE':>9}")
    failures = 0
    for b, tab in sweep.items():
        a, m = tab.get(system, signal.kind, "adalie"), tab.get(system, signal.kind, "umvie")
        failures += bool(a.error)
        print(f"{b:>8g} {a.mean:>9.4f} {m.mean:>9.4f}")
    return EXIT_USAGE if failures == len(sweep) else EXIT_OK


def cmd_lfo(args) -> int:
    config = load_lfo_config(args.config, args.seed)
    result = lfo.run_lfo(config, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lfo.write_lfo_csv(result, out / "lfo_results.csv")
    for line in lfo.summary_lines(result):
        print(line)
    failed = [o for outs in result.outcomes.values() for o in outs if o.error]
    total = sum(result.trials(e) for e in result.outcomes)
    return EXIT_USAGE if total and len(failed) == total else EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "bench": cmd_bench, "sweep": cmd_sweep, "lfo": cmd_lfo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("adalie: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"adalie: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NotStronglyObservableError as exc:
        print(f"adalie: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (RankDeficientError, InputNotEstimableError) as exc:
        print(f"adalie: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
