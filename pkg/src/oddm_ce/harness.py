"""Seeded Monte-Carlo experiments producing CSV metrics.

Every trial draws its channel and pilots from ``default_rng(seed + trial)``
and its noise from ``default_rng([seed + trial, sweep_index])``, so results
depend only on the configuration, never on worker scheduling.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .angles import estimate_angles
from .baselines import OmpConfig, genie_support_lmmse, lmmse_oracle, omp_estimate
from .channel import ChannelError, ChannelSpec, get_profile, sample_paths, to_grid
from .mamp import MampConfig, mamp_estimate
from .modem import (CONSTELLATIONS, DEFAULT_ELEMENT_BUDGET, DimensionError,
                    build_effective_operator, build_h_tilde, complex_noise, nmse, pilot_frames,
                    shift_frame)
from .operators import DenseOperator, dense_matrix

logger = logging.getLogger(__name__)

ESTIMATORS = ("mamp", "omp", "lmmse", "genie")
SWEEPS = ("snr", "speed", "antennas", "paths", "iterations")

RUN_HEADER = ["sweep", "value", "estimator", "seed", "nmse", "nmse_db", "iterations", "ber",
              "wall_time_s"]
CONVERGE_HEADER = ["sweep", "value", "iteration", "nmse_mean", "nmse_median", "trials"]
RANDOM_REF_HEADER = ["antennas", "seed", "nmse_oddm", "nmse_random", "gap_db"]
ANGLES_HEADER = ["value", "seed", "path", "theta_deg", "theta_hat_deg", "error_deg"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # scenario
    M: int = 32
    N: int = 16
    antennas: int = 8
    L: int = 5
    K: int = 2
    paths: int = 4
    constellation: str = "4qam"
    speed_kmh: float = 250.0
    carrier_freq_hz: float = 5e9
    subcarrier_spacing_hz: float = 15e3
    profile: str = "eva"
    antenna_spacing: float = 0.5
    delay_scale: float | None = None
    complex_gains: bool = False
    # experiment
    estimators: tuple = ("mamp", "omp")
    snr_db: tuple = (10.0,)
    trials: int = 10
    seed: int = 0
    sweep: str = "snr"
    sweep_values: tuple = ()
    operator_mode: str = "auto"
    element_budget: int = DEFAULT_ELEMENT_BUDGET
    timing: bool = False
    ber: bool = False
    angle_cells: str = "true"  # true | estimated
    # mamp
    mamp_max_iterations: int = 50
    mamp_damping_window: int = 3
    mamp_tol: float = 1e-6
    mamp_memory: int | None = None
    mamp_sparsity: float | None = None   # None: P / ((2K+1) L)
    mamp_prior_var: float | None = None  # None: 1 / P
    mamp_moments: str = "auto"
    # omp
    omp_sparsity: int | None = None      # None: P * N_t
    omp_residual: str = "0"              # number, or "noise" for MN * noise variance

    def validate(self) -> "ExperimentConfig":
        for name in ("M", "N", "antennas", "L", "paths", "trials"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.K < 0:
            raise ConfigError("K must be non-negative")
        if not self.snr_db:
            raise ConfigError("SNR grid is empty")
        if self.sweep not in SWEEPS:
            raise ConfigError(f"unknown sweep {self.sweep!r}; choose from {', '.join(SWEEPS)}")
        if self.sweep not in ("snr", "iterations") and not self.sweep_values:
            raise ConfigError(f"sweep {self.sweep!r} needs sweep_values")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}; choose from {', '.join(ESTIMATORS)}")
        if self.constellation.lower() not in CONSTELLATIONS:
            raise ConfigError(f"unknown constellation {self.constellation!r}")
        if self.operator_mode not in ("auto", "dense", "matrix_free"):
            raise ConfigError("operator_mode must be auto, dense or matrix_free")
        if self.angle_cells not in ("true", "estimated"):
            raise ConfigError("angle_cells must be true or estimated")
        if self.omp_residual != "noise":
            try:
                float(self.omp_residual)
            except ValueError:
                raise ConfigError("omp residual must be a number or 'noise'") from None
        try:
            get_profile(self.profile)
            self.channel_spec().validate_for_sampling()
            for v in self.points():
                self.channel_spec(**self._overrides(v)).validate_for_sampling()
        except (ChannelError, ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    # sweep handling ---------------------------------------------------------
    def points(self) -> list:
        if self.sweep == "snr":
            return list(self.snr_db)
        if self.sweep == "iterations":
            return list(self.sweep_values) or [self.mamp_max_iterations]
        return list(self.sweep_values)

    def _overrides(self, value) -> dict:
        if self.sweep == "speed":
            return {"speed_kmh": float(value)}
        if self.sweep == "antennas":
            return {"num_antennas": int(value)}
        if self.sweep == "paths":
            return {"num_paths": int(value)}
        return {}

    def at(self, value) -> tuple["ExperimentConfig", float]:
        """Scenario for one sweep point and its SNR."""
        snr = float(value) if self.sweep == "snr" else float(self.snr_db[0])
        cfg = self
        if self.sweep == "speed":
            cfg = replace(self, speed_kmh=float(value))
        elif self.sweep == "antennas":
            cfg = replace(self, antennas=int(value))
        elif self.sweep == "paths":
            cfg = replace(self, paths=int(value))
        elif self.sweep == "iterations":
            cfg = replace(self, mamp_max_iterations=int(value))
        return cfg, snr

    def channel_spec(self, **over) -> ChannelSpec:
        kw = dict(num_paths=self.paths, max_delay_index=self.L, max_doppler_index=self.K,
                  num_antennas=self.antennas, num_delay_bins=self.M, num_doppler_bins=self.N,
                  carrier_freq_hz=self.carrier_freq_hz,
                  subcarrier_spacing_hz=self.subcarrier_spacing_hz, speed_kmh=self.speed_kmh,
                  antenna_spacing=self.antenna_spacing, profile=get_profile(self.profile),
                  delay_scale=self.delay_scale, complex_gains=self.complex_gains)
        kw.update(over)
        return ChannelSpec(**kw)

    def mamp_config(self, noise_var: float) -> MampConfig:
        cells = (2 * self.K + 1) * self.L
        p = self.mamp_sparsity if self.mamp_sparsity is not None else min(1.0, self.paths / cells)
        v = self.mamp_prior_var if self.mamp_prior_var is not None else 1.0 / self.paths
        return MampConfig(noise_var=noise_var, sparsity=p, prior_var=v,
                          max_iterations=self.mamp_max_iterations,
                          damping_window=self.mamp_damping_window, tol=self.mamp_tol,
                          memory=self.mamp_memory, moments=self.mamp_moments)

    def omp_config(self, noise_var: float) -> OmpConfig:
        k = self.omp_sparsity if self.omp_sparsity is not None else self.paths * self.antennas
        tol = self.M * self.N * noise_var if self.omp_residual == "noise" else float(
            self.omp_residual)
        return OmpConfig(k, tol)


PRESETS = {
    "desk": ExperimentConfig(),
    "full": ExperimentConfig(M=512, N=32, antennas=128, L=21, K=3, paths=6, delay_scale=1.0,
                             estimators=("mamp",), trials=5,
                             snr_db=(0.0, 5.0, 10.0, 15.0, 20.0), operator_mode="matrix_free",
                             mamp_moments="hutchinson"),
}

_SECTIONS = {
    "scenario": ["M", "N", "antennas", "L", "K", "paths", "constellation", "speed_kmh",
                 "carrier_freq_hz", "subcarrier_spacing_hz", "profile", "antenna_spacing",
                 "delay_scale", "complex_gains"],
    "experiment": ["estimators", "snr_db", "trials", "seed", "sweep", "sweep_values",
                   "operator_mode", "element_budget", "timing", "ber", "angle_cells"],
    "mamp": ["max_iterations", "damping_window", "tol", "memory", "sparsity", "prior_var",
             "moments"],
    "omp": ["sparsity", "residual"],
}


def _field_name(section: str, key: str) -> str:
    return f"{section}_{key}" if section in ("mamp", "omp") else key


def _convert(name: str, raw: str, default):
    raw = raw.strip()
    ftype = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    try:
        if name in ("estimators",):
            return tuple(s.strip().lower() for s in raw.split(",") if s.strip())
        if name in ("snr_db", "sweep_values"):
            return tuple(float(s) for s in raw.split(",") if s.strip())
        if "None" in str(ftype) and raw.lower() in ("", "none", "auto"):
            return None
        if "bool" in str(ftype):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "int" in str(ftype) and "float" not in str(ftype):
            return int(raw)
        if "float" in str(ftype):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {name}") from None


def load_config(path: str | Path | None = None, preset: str = "desk",
                text: str | None = None) -> ExperimentConfig:
    """Read an INI-style config on top of a preset."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]
    if path is None and text is None:
        return replace(cfg).validate()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path) as fh:
                parser.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    updates = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        known = {k.lower(): k for k in _SECTIONS[section]}
        for key, raw in parser.items(section):
            if key.lower() not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            name = _field_name(section, known[key.lower()])
            updates[name] = _convert(name, raw, getattr(cfg, name))
    return replace(cfg, **updates).validate()


def config_to_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    values = asdict(cfg)
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            v = values[_field_name(section, key)]
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            parser[section][key] = "auto" if v is None else str(v)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# --- scenario construction ----------------------------------------------------

@dataclass
class Scenario:
    paths: object
    grid: object
    frames: np.ndarray
    op: object
    h: np.ndarray
    y: np.ndarray
    noise_var: float
    signal: np.ndarray = field(repr=False, default=None)


def noise_variance(signal: np.ndarray, snr_db: float) -> float:
    """Per-entry noise variance giving ``||signal||^2 / (len * var) = SNR``."""
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return float(np.vdot(signal, signal).real / signal.size / 10 ** (snr_db / 10))


def build_scenario(cfg: ExperimentConfig, snr_db: float, trial: int, sweep_index: int = 0,
                   dense: bool | None = None) -> Scenario:
    rng = np.random.default_rng(cfg.seed + trial)
    spec = cfg.channel_spec()
    paths = sample_paths(spec, rng)
    grid = to_grid(paths, spec)
    frames = pilot_frames(cfg.antennas, cfg.M, cfg.N, rng, cfg.constellation)
    mode = cfg.operator_mode
    if dense is True:
        mode = "dense"
    op = build_effective_operator(frames, cfg.K, cfg.L, mode=mode, budget=cfg.element_budget)
    h = build_h_tilde(grid, cfg.antennas)
    signal = op.matvec(h)
    op.reset_counts()
    nv = noise_variance(signal, snr_db)
    noise_rng = np.random.default_rng([cfg.seed + trial, sweep_index])
    y = signal + (complex_noise(signal.shape, nv, noise_rng) if nv > 0 else 0)
    return Scenario(paths, grid, frames, op, h, y, nv, signal)


def _require_dense(op, name: str):
    A = dense_matrix(op)
    if A is None:
        raise DimensionError(f"estimator {name!r} needs the dense matrix, which exceeds the "
                             "element budget; run MAMP alone in matrix_free mode")
    return A


def run_estimator(name: str, cfg: ExperimentConfig, sc: Scenario):
    """Returns ``(estimate, iterations)``."""
    if name == "mamp":
        res = mamp_estimate(sc.op, sc.y, cfg.mamp_config(sc.noise_var))
        return res.estimate, res.iterations
    A = _require_dense(sc.op, name)
    v_g = 1.0 / cfg.paths
    if name == "omp":
        ocfg = cfg.omp_config(sc.noise_var)
        x = omp_estimate(A, sc.y, ocfg)
        return x, int(np.count_nonzero(x))
    if name == "lmmse":
        cells = (2 * cfg.K + 1) * cfg.L
        p = min(1.0, cfg.paths / cells)
        return lmmse_oracle(A, sc.y, p * v_g, max(sc.noise_var, 0.0)), 1
    if name == "genie":
        return genie_support_lmmse(A, sc.y, np.flatnonzero(sc.h), v_g, sc.noise_var), 1
    raise ConfigError(f"unknown estimator {name!r}")


def bit_error_rate(cfg: ExperimentConfig, sc: Scenario, h_est: np.ndarray, trial: int,
                      sweep_index: int) -> float:
    """Bit error rate of a per-frame LMMSE equalizer using the estimated channel.

    A random data frame is sent from the first antenna through the true
    channel and equalized with the first-antenna block of ``h_est``.  Only a
    sanity check; no coding or iterative detection.
    """
    rng = np.random.default_rng([cfg.seed + trial, sweep_index, 7])
    M, N, K, L = cfg.M, cfg.N, cfg.K, cfg.L
    points = CONSTELLATIONS[cfg.constellation.lower()]
    idx = rng.integers(len(points), size=(M, N))
    X = points[idx]
    cells = (2 * K + 1) * L

    src_index = np.arange(M * N, dtype=complex).reshape(M, N) + 1
    ones = np.ones((M, N), dtype=complex)
    rows = np.arange(M * N)

    def channel_matrix(block):
        # each shift is a phased permutation: recover it from two probe frames
        H = np.zeros((M * N, M * N), dtype=complex)
        for c in np.flatnonzero(block):
            d1, r = divmod(int(c), 2 * K + 1)
            phase = shift_frame(ones, d1, r - K).ravel()
            src = np.rint((shift_frame(src_index, d1, r - K).ravel() / phase).real).astype(int) - 1
            H[rows, src] += block[c] * phase
        return H

    H_true = channel_matrix(sc.h[:cells])
    H_est = channel_matrix(np.where(np.abs(h_est[:cells]) > 0, h_est[:cells], 0))
    y = H_true @ X.ravel()
    if sc.noise_var > 0:
        y = y + complex_noise(y.shape, sc.noise_var, rng)
    x_hat = lmmse_oracle(H_est, y, 1.0, max(sc.noise_var, 1e-12))
    det = np.argmin(np.abs(x_hat[:, None] - points[None, :]), axis=1)
    bits = max(1, int(round(math.log2(len(points)))))
    errors = sum(bin(int(a) ^ int(b)).count("1") for a, b in zip(det, idx.ravel()))
    return errors / (bits * M * N)


def _run_trial(args):
    cfg, sweep_index, value, trial = args
    point_cfg, snr = cfg.at(value)
    sc = build_scenario(point_cfg, snr, trial, sweep_index)
    rows = []
    for name in cfg.estimators:
        t0 = time.perf_counter()
        est, iters = run_estimator(name, point_cfg, sc)
        wall = time.perf_counter() - t0
        err = nmse(est, sc.h)
        ber = bit_error_rate(point_cfg, sc, est, trial, sweep_index) if cfg.ber else None
        rows.append({
            "sweep": cfg.sweep, "value": _fmt(value), "estimator": name,
            "seed": cfg.seed + trial, "nmse": f"{err:.10e}",
            "nmse_db": f"{10 * math.log10(max(err, 1e-300)):.4f}", "iterations": iters,
            "ber": "" if ber is None else f"{ber:.6e}",
            "wall_time_s": f"{wall:.4f}" if cfg.timing else "",
        })
    return sweep_index, trial, rows


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def _map(fn, tasks, workers: int):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """One row per (sweep point, trial, estimator), ordered deterministically."""
    tasks = [(cfg, i, v, t) for i, v in enumerate(cfg.points()) for t in range(cfg.trials)]
    results = sorted(_map(_run_trial, tasks, workers), key=lambda r: (r[0], r[1]))
    return [row for _, _, rows in results for row in rows]


def _converge_trial(args):
    cfg, sweep_index, value, trial = args
    point_cfg, snr = cfg.at(value)
    sc = build_scenario(point_cfg, snr, trial, sweep_index)
    mc = replace(point_cfg.mamp_config(sc.noise_var))
    res = mamp_estimate(sc.op, sc.y, mc, truth=sc.h)
    trace = list(res.nmse_trace)
    trace += [trace[-1]] * (mc.max_iterations - len(trace))  # converged runs stay flat
    return sweep_index, trial, trace


def convergence_trace(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """Per-iteration MAMP NMSE averaged over trials, for each sweep point."""
    points = cfg.points() if cfg.sweep != "iterations" else [cfg.mamp_max_iterations]
    tasks = [(cfg, i, v, t) for i, v in enumerate(points) for t in range(cfg.trials)]
    results = sorted(_map(_converge_trial, tasks, workers), key=lambda r: (r[0], r[1]))
    rows = []
    for i, v in enumerate(points):
        traces = np.array([tr for si, _, tr in results if si == i])
        for it in range(traces.shape[1]):
            col = traces[:, it]
            rows.append({"sweep": cfg.sweep, "value": _fmt(v), "iteration": it + 1,
                         "nmse_mean": f"{col.mean():.10e}",
                         "nmse_median": f"{np.median(col):.10e}", "trials": len(col)})
    return rows


def _random_ref_trial(args):
    cfg, sweep_index, value, trial = args
    point_cfg = replace(cfg, antennas=int(value))
    snr = float(cfg.snr_db[0])
    sc = build_scenario(point_cfg, snr, trial, sweep_index)
    mc = point_cfg.mamp_config(sc.noise_var)
    nm_oddm = nmse(mamp_estimate(sc.op, sc.y, mc).estimate, sc.h)
    rng = np.random.default_rng([cfg.seed + trial, sweep_index, 1])
    shape = sc.op.shape
    A = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)
    rop = DenseOperator(A)
    s = A @ sc.h
    nv = noise_variance(s, snr)
    y = s + (complex_noise(s.shape, nv, rng) if nv > 0 else 0)
    nm_rand = nmse(mamp_estimate(rop, y, point_cfg.mamp_config(nv)).estimate, sc.h)
    return sweep_index, trial, {
        "antennas": int(value), "seed": cfg.seed + trial, "nmse_oddm": f"{nm_oddm:.10e}",
        "nmse_random": f"{nm_rand:.10e}",
        "gap_db": f"{10 * math.log10(nm_oddm / nm_rand):.4f}"}


def random_matrix_reference(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """MAMP on the ODDM matrix versus an i.i.d. Gaussian matrix of the same shape.

    The antenna counts come from ``sweep_values`` (or the scenario's single
    value); the first SNR of the grid is used.
    """
    values = cfg.sweep_values if cfg.sweep == "antennas" and cfg.sweep_values else (cfg.antennas,)
    tasks = [(cfg, i, v, t) for i, v in enumerate(values) for t in range(cfg.trials)]
    results = sorted(_map(_random_ref_trial, tasks, workers), key=lambda r: (r[0], r[1]))
    return [row for _, _, row in results]


def median_gaps(rows: list[dict]) -> dict[int, float]:
    out: dict[int, list] = {}
    for r in rows:
        out.setdefault(int(r["antennas"]), []).append(float(r["gap_db"]))
    return {k: float(np.median(v)) for k, v in sorted(out.items())}


def _angles_trial(args):
    cfg, sweep_index, value, trial = args
    point_cfg, snr = cfg.at(value)
    sc = build_scenario(point_cfg, snr, trial, sweep_index)
    cells = (2 * point_cfg.K + 1) * point_cfg.L
    Nt = point_cfg.antennas
    corr = sc.op.rmatvec(sc.y).reshape(Nt, cells) / (point_cfg.M * point_cfg.N)
    if point_cfg.angle_cells == "true":
        # grid column index d1 * (2K+1) + (d2 + K) for each path
        targets = [(int(p.delay_index) * (2 * point_cfg.K + 1) + int(p.doppler_index)
                    + point_cfg.K, p.angle) for p in sc.paths]
    else:
        est = mamp_estimate(sc.op, sc.y, point_cfg.mamp_config(sc.noise_var)).estimate
        energy = np.sum(np.abs(est.reshape(Nt, cells)) ** 2, axis=0)
        strongest = np.argsort(-energy)[:point_cfg.paths]
        truth = {int(p.delay_index) * (2 * point_cfg.K + 1) + int(p.doppler_index)
                 + point_cfg.K: p.angle for p in sc.paths}
        targets = [(int(c), truth.get(int(c), math.nan)) for c in strongest]
    rows = []
    for k, (cell, theta) in enumerate(targets):
        est = estimate_angles(corr[:, cell], 1, point_cfg.antenna_spacing)
        th_hat = est[0].angle if est else math.nan
        rows.append({"value": _fmt(value), "seed": cfg.seed + trial, "path": k,
                     "theta_deg": f"{math.degrees(theta):.6f}",
                     "theta_hat_deg": f"{math.degrees(th_hat):.6f}",
                     "error_deg": f"{abs(math.degrees(th_hat - theta)):.6f}"})
    return sweep_index, trial, rows


def angle_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """True versus estimated departure angle per path.

    The spatial snapshot of a path is the matched-filter output of its
    delay-Doppler cell across antennas: the received frame correlated with
    each antenna's shifted pilot and averaged over the frame.
    """
    tasks = [(cfg, i, v, t) for i, v in enumerate(cfg.points()) for t in range(cfg.trials)]
    results = sorted(_map(_angles_trial, tasks, workers), key=lambda r: (r[0], r[1]))
    return [row for _, _, rows in results for row in rows]


def write_csv(rows: list[dict], header: list[str], out=None) -> str:
    """Serialize rows; writes to ``out`` (path or file) when given."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    text = buf.getvalue()
    if out is not None:
        if hasattr(out, "write"):
            out.write(text)
        else:
            Path(out).write_text(text)
    return text


def validate_rows(text: str, header: list[str]) -> int:
    """Checks a CSV against ``header``; returns the row count."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != header:
        raise ValueError(f"header {reader.fieldnames} != {header}")
    n = 0
    for row in reader:
        if None in row or any(v is None for v in row.values()):
            raise ValueError(f"malformed row {n + 1}")
        if "nmse" in row and float(row["nmse"]) < 0:
            raise ValueError("negative NMSE")
        n += 1
    return n
