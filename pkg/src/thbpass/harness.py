"""Experiment runner: JSON configs, seeded scenarios, dispatch, sweeps, persistence.

A run is fully determined by ``(config, seed)``: users, initial points and
every optimizer draw come from generators seeded off the run seed, and
records are emitted in a fixed order regardless of how many worker
threads computed them.  Wall-clock times are only written when timing is
switched on, so default outputs are byte-stable.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .baselines import grid_position_update, grid_search_positions, mimo_optimize, sc_pass_optimize
from .fp import fp_optimize, pinching_objective, random_init, update_aux
from .manifold import RcgConfig
from .model import ConfigError, SystemConfig, config_energy_efficiency, effective_channel
from .model import feasibility_residuals
from .model import sample_users as _sample_users
from .shade import FeasibleBox, ShadeConfig, shade_maximize
from .zf import zf_pipeline, zf_wsr

log = logging.getLogger(__name__)

ALGORITHMS = ("fp", "zf", "sc", "mimo", "grid")
CSV_COLUMNS = ("run_id", "seed", "algorithm", "outer_iter", "wsr_bits_per_hz", "elapsed_ms")
THREADS_ENV = "PASS_THB_THREADS"

_ARCHITECTURE = {"fp": "fc", "zf": "fc", "grid": "fc", "sc": "sc", "mimo": "mimo"}


@dataclass
class StopRule:
    max_outer: int = 20
    rel_tol: float = 1e-4


@dataclass
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    algorithm: str = "fp"
    seeds: list = field(default_factory=lambda: [0])
    sweep: dict | None = None
    shade: dict = field(default_factory=dict)
    rcg: dict = field(default_factory=dict)
    stop: StopRule = field(default_factory=StopRule)
    grid_step: float = 5e-3
    output_dir: str = "results"
    timing: bool = False
    landscape: dict = field(default_factory=dict)

    def shade_config(self, system: SystemConfig | None = None) -> ShadeConfig:
        system = system or self.system
        return ShadeConfig.for_layout(system.M * system.N, **self.shade)

    def rcg_config(self) -> RcgConfig:
        return RcgConfig(**self.rcg)


def _warn_unknown(block: dict, known, where: str):
    for key in block:
        if key not in known:
            warnings.warn(f"ignoring unknown key {key!r} in {where}", stacklevel=3)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Validate a parsed config and fill defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _warn_unknown(data, {f.name for f in fields(ExperimentConfig)}, "config")
    system = dict(data.get("system", {}))
    sys_known = {f.name for f in fields(SystemConfig)} | {"transmit_power_dbm", "noise_power_dbm"}
    _warn_unknown(system, sys_known, "system")
    system = {k: v for k, v in system.items() if k in sys_known}
    try:
        sys_cfg = SystemConfig.from_dict(system)
    except TypeError as exc:
        raise ConfigError(f"system: {exc}") from exc

    algorithm = data.get("algorithm", "fp")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or any(not isinstance(s, int) or s < 0 for s in seeds):
        raise ConfigError(f"seeds must be a non-empty list of non-negative integers, got {seeds!r}")

    sweep = data.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict) or "parameter" not in sweep or "values" not in sweep:
            raise ConfigError("sweep needs 'parameter' and 'values'")
        if sweep["parameter"] not in sys_known:
            raise ConfigError(f"sweep parameter {sweep['parameter']!r} is not a system field")
        for value in sweep["values"]:
            _sweep_system(sys_cfg, sweep["parameter"], value)  # validate every point up front

    shade = dict(data.get("shade", {}))
    _warn_unknown(shade, {f.name for f in fields(ShadeConfig)}, "shade")
    shade = {k: v for k, v in shade.items() if k in {f.name for f in fields(ShadeConfig)}}
    rcg = dict(data.get("rcg", {}))
    _warn_unknown(rcg, {f.name for f in fields(RcgConfig)}, "rcg")
    rcg = {k: v for k, v in rcg.items() if k in {f.name for f in fields(RcgConfig)}}
    stop = dict(data.get("stop", {}))
    _warn_unknown(stop, {"max_outer", "rel_tol"}, "stop")
    stop = StopRule(**{k: v for k, v in stop.items() if k in ("max_outer", "rel_tol")})

    cfg = ExperimentConfig(system=sys_cfg, algorithm=algorithm, seeds=list(seeds), sweep=sweep,
                           shade=shade, rcg=rcg, stop=stop,
                           grid_step=float(data.get("grid_step", 5e-3)),
                           output_dir=str(data.get("output_dir", "results")),
                           timing=bool(data.get("timing", False)),
                           landscape=dict(data.get("landscape", {})))
    try:
        cfg.shade_config()
        cfg.rcg_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.stop.max_outer < 1 or not cfg.stop.rel_tol > 0:
        raise ConfigError("stop.max_outer must be >= 1 and stop.rel_tol > 0")
    if not cfg.grid_step > 0:
        raise ConfigError("grid_step must be positive")
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON experiment config."""
    text = Path(path).read_text()
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return config_from_dict(data)


def _sweep_system(system: SystemConfig, parameter: str, value) -> SystemConfig:
    data = system.to_dict()
    if parameter in ("transmit_power_dbm", "noise_power_dbm"):
        data.pop("noise_powers" if parameter == "noise_power_dbm" else "transmit_power")
    if parameter == "num_users":
        data["noise_powers"] = ()
        data["priorities"] = ()
        if len(set(system.noise_powers)) == 1:
            data["noise_powers"] = (system.noise_powers[0],) * int(value)
    data[parameter] = value
    return SystemConfig.from_dict(data)


def sample_users(cfg: SystemConfig, seed: int) -> np.ndarray:
    """Users uniform on the ground rectangle, deterministic per seed."""
    return _sample_users(cfg, np.random.default_rng([seed, 0]))


@dataclass
class RunRecord:
    run_id: str
    seed: int
    algorithm: str
    rows: list
    wsr: float
    energy_efficiency: float
    layout: list | None
    feasibility: dict
    params: dict = field(default_factory=dict)
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def finite(self) -> bool:
        return self.error is None and math.isfinite(self.wsr)


def run_single(exp: ExperimentConfig, system: SystemConfig, seed: int, run_id: str,
               params: dict | None = None) -> RunRecord:
    """One algorithm on one seeded scenario."""
    alg = exp.algorithm
    users = sample_users(system, seed)
    algo_seed = [seed, 1]
    shade_cfg = exp.shade_config(system)
    rcg_cfg = exp.rcg_config()
    stop = exp.stop
    extra = {}
    layout = None
    if alg == "fp":
        res = fp_optimize(system, users, shade_cfg, rcg_cfg, stop.max_outer, stop.rel_tol,
                          seed=algo_seed)
    elif alg == "grid":
        res = fp_optimize(system, users, rcg_cfg=rcg_cfg, max_outer=stop.max_outer,
                          rel_tol=stop.rel_tol, seed=algo_seed,
                          position_update=grid_position_update(users, system, exp.grid_step))
    elif alg == "sc":
        res = sc_pass_optimize(system, users, shade_cfg, stop.max_outer, stop.rel_tol,
                               seed=algo_seed)
    elif alg == "mimo":
        res = mimo_optimize(system, users, rcg_cfg, stop.max_outer, stop.rel_tol, seed=algo_seed)
    elif alg == "zf":
        res = zf_pipeline(system, users, shade_cfg, rcg_cfg, seed=algo_seed)
    else:
        raise ConfigError(f"unknown algorithm {alg!r}")

    if alg == "zf":
        rows = [(0, res.wsr, 0.0)]
        rate = res.wsr
        layout = res.layout
        extra = {"ideal_wsr": res.ideal_wsr, "residual": res.residual}
    else:
        times = res.elapsed_ms if exp.timing else [0.0] * len(res.trace)
        rows = list(zip(range(len(res.trace)), res.trace, times))
        rate = res.wsr
        layout = res.layout
        extra = {"iterations": res.iterations, "converged": res.converged}
    feas = feasibility_residuals(layout, system) if layout is not None else {}
    ee = config_energy_efficiency(rate, system, _ARCHITECTURE[alg])
    return RunRecord(run_id=run_id, seed=seed, algorithm=alg, rows=rows, wsr=float(rate),
                     energy_efficiency=float(ee),
                     layout=None if layout is None else np.asarray(layout).tolist(),
                     feasibility=feas, params=params or {}, extra=extra)


def _threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", THREADS_ENV, value)
        return 1


def _jobs(exp: ExperimentConfig):
    points = [(None, exp.system)]
    if exp.sweep is not None:
        name = exp.sweep["parameter"]
        points = [({name: v}, _sweep_system(exp.system, name, v)) for v in exp.sweep["values"]]
    for params, system in points:
        for seed in exp.seeds:
            suffix = "" if params is None else "-" + "-".join(f"{k}={v}" for k, v in params.items())
            yield f"{exp.algorithm}-s{seed}{suffix}", seed, system, params


def run(exp: ExperimentConfig) -> list:
    """All (sweep point, seed) runs; failures are recorded and do not stop the batch."""
    jobs = list(_jobs(exp))

    def one(job):
        run_id, seed, system, params = job
        try:
            return run_single(exp, system, seed, run_id, params)
        except Exception as exc:  # recorded per run, the rest of the batch goes on
            log.error("run %s failed: %s", run_id, exc)
            return RunRecord(run_id=run_id, seed=seed, algorithm=exp.algorithm, rows=[],
                             wsr=float("nan"), energy_efficiency=float("nan"), layout=None,
                             feasibility={}, params=params or {}, error=repr(exc))

    workers = min(_threads(), len(jobs)) or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, jobs))
    return [one(job) for job in jobs]


# ---- persistence ------------------------------------------------------------------

def _fmt(x) -> str:
    return format(float(x), ".12g")


def records_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        for it, value, ms in rec.rows:
            writer.writerow([rec.run_id, rec.seed, rec.algorithm, it, _fmt(value), _fmt(ms)])
    return buf.getvalue()


def summarize(records) -> dict:
    """Final-WSR mean / median / 95% t-interval per algorithm (and sweep point)."""
    groups = {}
    for rec in records:
        key = rec.algorithm
        if rec.params:
            key += "[" + ",".join(f"{k}={v}" for k, v in rec.params.items()) + "]"
        groups.setdefault(key, []).append(rec)
    out = {}
    for key, recs in groups.items():
        finals = np.array([r.wsr for r in recs if r.finite])
        entry = {"runs": len(recs), "failed": sum(not r.finite for r in recs)}
        if finals.size:
            mean = float(finals.mean())
            if finals.size > 1:
                half = float(stats.t.ppf(0.975, finals.size - 1) * finals.std(ddof=1)
                             / np.sqrt(finals.size))
            else:
                half = 0.0
            entry.update(mean=mean, median=float(np.median(finals)), ci95=[mean - half, mean + half],
                         mean_energy_efficiency=float(np.mean([r.energy_efficiency
                                                               for r in recs if r.finite])))
        out[key] = entry
    return out


def _round_floats(obj):
    if isinstance(obj, float):
        return float(_fmt(obj)) if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return _round_floats(obj.item())
    return obj


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def emit(records, out_dir, prefix: str = "run") -> dict:
    """Write ``<prefix>.csv`` (per-iteration rows), ``<prefix>_summary.json`` and
    ``<prefix>_records.json`` (finals, layouts, feasibility) to ``out_dir``."""
    out_dir = Path(out_dir)
    paths = {"csv": out_dir / f"{prefix}.csv", "summary": out_dir / f"{prefix}_summary.json",
             "records": out_dir / f"{prefix}_records.json"}
    _atomic_write(paths["csv"], records_csv(records))
    _atomic_write(paths["summary"],
                  json.dumps(_round_floats(summarize(records)), indent=2, sort_keys=True) + "\n")
    detail = [{"run_id": r.run_id, "seed": r.seed, "algorithm": r.algorithm, "params": r.params,
               "wsr": r.wsr, "energy_efficiency": r.energy_efficiency, "layout": r.layout,
               "feasibility": r.feasibility, "error": r.error, **r.extra} for r in records]
    _atomic_write(paths["records"], json.dumps(_round_floats(detail), indent=2) + "\n")
    return paths


# ---- objective landscapes ----------------------------------------------------------

@dataclass
class LandscapeResult:
    x1: np.ndarray
    x2: np.ndarray
    values: np.ndarray
    local_maxima: int
    users: np.ndarray


def count_strict_local_maxima(values) -> int:
    """Grid points strictly above all of their (up to four) axis neighbours."""
    V = np.asarray(values, dtype=float)
    P = np.pad(V, 1, constant_values=-np.inf)
    c = P[1:-1, 1:-1]
    peak = (c > P[:-2, 1:-1]) & (c > P[2:, 1:-1]) & (c > P[1:-1, :-2]) & (c > P[1:-1, 2:])
    return int(np.count_nonzero(peak & np.isfinite(c)))


def toy_config(base: SystemConfig | None = None) -> SystemConfig:
    """Two waveguides with one PA each, two users."""
    base = base or SystemConfig()
    return base.with_(num_waveguides=2, pas_per_waveguide=1, num_users=2, num_rf_chains=2)


def landscape_objective(cfg: SystemConfig, users, objective: str = "zf", seed: int = 0):
    """Stack-evaluable objective for landscape scans.

    ``"pinching"`` is the position sub-problem objective at a random
    beamformer / auxiliary state drawn from ``seed``; ``"zf"`` is the
    closed-form ZF rate.
    """
    users = np.asarray(users, dtype=float)
    if objective == "zf":
        return lambda X: zf_wsr(X, users, cfg)
    if objective == "pinching":
        layout, W_RF, W_BB = random_init(cfg, np.random.default_rng([seed, 2]))
        aux = update_aux(effective_channel(layout, users, cfg), W_RF, W_BB, cfg)
        V = W_RF @ W_BB
        return lambda X: pinching_objective(X, users, cfg, V, aux)
    raise ConfigError(f"unknown landscape objective {objective!r}")


def landscape_scan(cfg: SystemConfig, users, grid_step: float = 5e-3, objective="zf",
                   seed: int = 0, csv_path=None) -> LandscapeResult:
    """Evaluate a two-PA objective on the full ``(x_1, x_2)`` grid.

    ``objective`` is a name understood by :func:`landscape_objective` or a
    callable taking ``(B, 1, 2)`` layouts.  With ``csv_path`` the grid is
    written as ``x1,x2,value`` rows.
    """
    if cfg.M != 2 or cfg.N != 1:
        raise ConfigError("landscape scans need M = 2 waveguides with N = 1 PA each")
    fn = objective if callable(objective) else landscape_objective(cfg, users, objective, seed)
    L = cfg.waveguide_length
    count = int(round(L / grid_step)) + 1
    x = np.linspace(0.0, L, count)
    values = np.empty((count, count))
    for i, x1 in enumerate(x):
        stack = np.empty((count, 1, 2))
        stack[:, 0, 0] = x1
        stack[:, 0, 1] = x
        values[i] = fn(stack)
    if csv_path is not None:
        X1, X2 = np.meshgrid(x, x, indexing="ij")
        table = np.column_stack([X1.ravel(), X2.ravel(), values.ravel()])
        buf = io.StringIO()
        buf.write("x1,x2,value\n")
        np.savetxt(buf, table, fmt="%.12g", delimiter=",")
        _atomic_write(Path(csv_path), buf.getvalue())
    return LandscapeResult(x1=x, x2=x, values=values,
                           local_maxima=count_strict_local_maxima(values),
                           users=np.asarray(users, dtype=float))


def grid_vs_shade(cfg: SystemConfig, users, objective, shade_cfg: ShadeConfig, grid_step=5e-3,
                  seed: int = 0):
    """Grid search from a random start and SHADE on the same objective; returns both values."""
    box = FeasibleBox.from_config(cfg)
    grid = grid_search_positions(cfg, objective, grid_step, rng=np.random.default_rng([seed, 3]))
    shade = shade_maximize(objective, ShadeConfig(**{**shade_cfg.__dict__, "seed": seed}), box,
                           vectorized=True)
    return grid.value, shade.fitness
