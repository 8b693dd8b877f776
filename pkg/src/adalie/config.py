"""YAML run documents and measurement CSVs, with line-numbered diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from .bench import SYSTEMS, BenchConfig, SignalSpec, make_system
from .dynsys import LtvSystem
from .estimator import DistanceMetric
from .lfo import LfoConfig, PendulumParams


class ConfigError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, path, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(path, exc.strerror or str(exc)) from exc


def _key_lines(node) -> dict:
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value if isinstance(k, yaml.ScalarNode)}


def load_document(path) -> tuple[dict, dict]:
    """Parse one YAML mapping; returns ``(data, {key: line})``."""
    text = _read_text(path)
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ConfigError(path, exc.problem or str(exc), mark.line + 1 if mark else None) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(path, str(exc)) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, "top level must be a mapping", 1)
    return data, _key_lines(node)


class _Doc:
    """Keyed access that reports the offending line on failure."""

    def __init__(self, path, data: dict, lines: dict, allowed):
        self.path, self.data, self.lines = path, data, lines
        for key in data:
            if key not in allowed:
                self.fail(key, f"unknown key {key!r}; allowed: {', '.join(sorted(allowed))}")

    def fail(self, key, message):
        raise ConfigError(self.path, message, self.lines.get(key))

    def get(self, key, convert, default=None):
        if key not in self.data:
            return default
        try:
            return convert(self.data[key])
        except (TypeError, ValueError) as exc:
            self.fail(key, f"bad value for {key!r}: {exc}")


def _count(v) -> int:
    if isinstance(v, bool) or int(v) != v or int(v) < 0:
        raise ValueError(f"expected a nonnegative integer, got {v!r}")
    return int(v)


def _finite(v) -> float:
    if isinstance(v, bool):
        raise ValueError("expected a number")
    f = float(v)
    if not math.isfinite(f):
        raise ValueError(f"expected a finite number, got {v!r}")
    return f


def _signal(v) -> SignalSpec:
    if isinstance(v, str):
        return SignalSpec(v)
    if isinstance(v, dict):
        unknown = set(v) - {"kind", "amplitude", "period", "switch"}
        if unknown:
            raise ValueError(f"unknown signal keys {sorted(unknown)}")
        return SignalSpec(**v)
    raise ValueError(f"signal must be a name or a mapping, got {v!r}")


def _metric(v) -> DistanceMetric:
    if not isinstance(v, dict) or set(v) - {"time_weight", "output_weight"}:
        raise ValueError("metric takes only time_weight and output_weight")
    return DistanceMetric(**{k: _finite(x) for k, x in v.items()})


def _str_list(v) -> tuple:
    if isinstance(v, str):
        return (v,)
    return tuple(str(x) for x in v)


_BENCH_KEYS = {f.name for f in fields(BenchConfig)}


def _bench_kwargs(doc: _Doc) -> dict:
    conv = {
        "systems": _str_list,
        "signals": lambda v: tuple(_signal(s) for s in ([v] if isinstance(v, (str, dict)) else v)),
        "episodes": _count,
        "T": _count,
        "noise_bound": _finite,
        "sigma": _finite,
        "ratio_grid": lambda v: tuple(_finite(x) for x in ([v] if not isinstance(v, list) else v)),
        "cv_episodes": _count,
        "seed": _count,
        "metric": _metric,
        "noise_family": str,
    }
    return {k: doc.get(k, conv[k]) for k in conv if k in doc.data}


def load_bench_config(path, seed: int | None = None) -> BenchConfig:
    data, lines = load_document(path)
    doc = _Doc(path, data, lines, _BENCH_KEYS)
    kwargs = _bench_kwargs(doc)
    for key in kwargs.get("systems", ()):
        if key not in SYSTEMS:
            doc.fail("systems", f"unknown system {key!r}")
    if seed is not None:
        kwargs["seed"] = seed
    try:
        return BenchConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def load_sweep_config(path, seed: int | None = None) -> tuple[str, SignalSpec, list, BenchConfig]:
    """Sweep document: ``system``, ``signal``, ``b_values`` plus any bench keys."""
    data, lines = load_document(path)
    allowed = (_BENCH_KEYS - {"systems", "signals", "noise_bound"}) | {"system", "signal", "b_values"}
    doc = _Doc(path, data, lines, allowed)
    for key in ("system", "signal", "b_values"):
        if key not in data:
            raise ConfigError(path, f"missing required key {key!r}")
    system = doc.get("system", str)
    if system not in SYSTEMS:
        doc.fail("system", f"unknown system {system!r}")
    signal = doc.get("signal", _signal)
    b_values = doc.get("b_values", lambda v: [_finite(x) for x in v])
    if not b_values or any(b <= 0 for b in b_values):
        doc.fail("b_values", "b_values must be a non-empty list of positive bounds")
    kwargs = _bench_kwargs(doc)
    if seed is not None:
        kwargs["seed"] = seed
    try:
        config = BenchConfig(systems=(system,), signals=(signal,), **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc
    return system, signal, b_values, config


_PARAM_KEYS = {f.name for f in fields(PendulumParams)}
_LFO_KEYS = {f.name for f in fields(LfoConfig)}


def _params(v) -> PendulumParams:
    if not isinstance(v, dict) or set(v) - _PARAM_KEYS:
        raise ValueError(f"params takes only {sorted(_PARAM_KEYS)}")
    return PendulumParams(**{k: _finite(x) for k, x in v.items()})


def load_lfo_config(path, seed: int | None = None) -> LfoConfig:
    data, lines = load_document(path)
    doc = _Doc(path, data, lines, _LFO_KEYS)
    conv = {
        "demos": _count,
        "demo_duration": _finite,
        "eval_duration": _finite,
        "window": _count,
        "process_noise": _finite,
        "measurement_noise": _finite,
        "ratio": _finite,
        "estimators": _str_list,
        "seed": _count,
        "params": _params,
        "metric": _metric,
    }
    kwargs = {k: doc.get(k, conv[k]) for k in conv if k in data}
    if seed is not None:
        kwargs["seed"] = seed
    try:
        return LfoConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _matrix_stack(v, T: int) -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim not in (2, 3) or not np.all(np.isfinite(arr)):
        raise ValueError("expected a finite matrix or a list of T+1 matrices")
    if arr.ndim == 3 and arr.shape[0] != T + 1:
        raise ValueError(f"time-varying stack needs T+1={T + 1} matrices, got {arr.shape[0]}")
    return arr


def load_system(path, T: int | None = None):
    """System document: either ``builtin: <catalog name>`` or explicit ``A``, ``B``, ``C``.

    ``T`` overrides the document's horizon (used when measurements fix it).
    Returns an :class:`LtvSystem` or a :class:`NonlinearSystem`.
    """
    data, lines = load_document(path)
    doc = _Doc(path, data, lines, {"name", "builtin", "T", "seed", "A", "B", "C"})
    horizon = T if T is not None else doc.get("T", _count, 100)
    if horizon < 1:
        doc.fail("T", "T must be positive")
    name = doc.get("name", str, "")
    if "builtin" in data:
        explicit = [k for k in ("A", "B", "C") if k in data]
        if explicit:
            doc.fail(explicit[0], "give either builtin or explicit matrices, not both")
        builtin = doc.get("builtin", str)
        if builtin not in SYSTEMS:
            doc.fail("builtin", f"unknown builtin {builtin!r}")
        return make_system(builtin, horizon, doc.get("seed", _count, 0))
    missing = [k for k in ("A", "B", "C") if k not in data]
    if missing:
        raise ConfigError(path, f"missing matrices {missing} (or give builtin)")
    mats = {k: doc.get(k, lambda v: _matrix_stack(v, horizon)) for k in ("A", "B", "C")}
    try:
        return LtvSystem(mats["A"], mats["B"], mats["C"], horizon, name)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from exc


def read_measurements(path) -> tuple[np.ndarray, np.ndarray | None]:
    """CSV with header ``t, y0, y1, ...`` (``u*`` columns allowed and returned).

    Rows must cover ``t = 0..T`` in order. Returns ``(Y, U)`` with ``Y`` of
    shape ``(T+1, n_y)``; ``U`` is ``None`` without input columns.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(path, exc.strerror or str(exc)) from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(path, "empty file", 1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise ConfigError(path, "first column must be 't'", 1)
    ycols = [i for i, h in enumerate(header) if h.startswith("y")]
    ucols = [i for i, h in enumerate(header) if h.startswith("u")]
    other = [h for i, h in enumerate(header[1:], 1) if i not in ycols and i not in ucols]
    if other:
        raise ConfigError(path, f"unexpected columns {other}", 1)
    if not ycols:
        raise ConfigError(path, "no y columns", 1)
    Y, U = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ConfigError(path, f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            t = int(row[0])
            y = [float(row[i]) for i in ycols]
            u = [float(row[i]) if row[i].strip() else math.nan for i in ucols]
        except ValueError as exc:
            raise ConfigError(path, f"not a number: {exc}", lineno) from exc
        if t != len(Y):
            raise ConfigError(path, f"expected t={len(Y)}, got t={t}", lineno)
        if not all(math.isfinite(v) for v in y):
            raise ConfigError(path, "non-finite measurement", lineno)
        Y.append(y)
        U.append(u)
    if len(Y) < 2:
        raise ConfigError(path, "need measurements for at least t=0 and t=1")
    return np.array(Y), (np.array(U) if ucols else None)

