"""Config-driven experiment runs with JSONL records, CSV tables and SVG plots.

One JSON config per run; all randomness flows from its master seed.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .brownian import exit_decay_rate, simulate_path
from .coarse_grain import MoeParams, coarse_grain, scaled_unit_field, volume_control_diagnostic
from .constants import Constants, optimal_radius
from .estimators import (
    NAIVE_FLOOR,
    conditioned_sausage_stats,
    estimate_survival_clearing,
    estimate_survival_naive,
    exponential_tightness_scan,
    ldp_curve,
    naive_guard,
)
from .obstacles import ObstacleGeometry
from .rng import seed_sequence
from .sausage import sausage_volume_grid, sausage_volume_mc
from .spectral import GridDomain, capacity, eigen_dirichlet, eigen_shift_vs_capacity, faber_krahn_check

EXPERIMENTS = ("constants", "survive", "sausage", "lln", "ldp", "confine", "tightness", "spectral", "capacity", "moe")
RUNS_FILE = "runs.jsonl"
SUMMARY_FILE = "summary.csv"


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every violated condition."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class ExperimentConfig:
    experiment: str
    d: int = 2
    nu: float = 1.0
    mu: float = 0.0
    t: float | None = None
    t_grid: list | None = None
    dt: float | None = None
    geometry: dict = field(default_factory=dict)
    n_fields: int = 100
    n_paths: int = 100
    n_samples: int = 100
    n_particles: int = 100_000
    h: float | None = None
    tol: float = 1e-8
    radii: list | None = None
    slack: float = 0.0
    eta: float = 1.0
    domain: str = "disk"
    size: float = 1.0
    epsilons: list | None = None
    centers: list | None = None
    method: str = "grid_solve"
    moe: dict = field(default_factory=dict)
    kappa: float | None = None
    n_trials: int = 100
    seed: int = 0
    out: str = "runs"

    @property
    def times(self) -> list:
        if self.t_grid:
            return [float(v) for v in self.t_grid]
        return [float(self.t)] if self.t is not None else []

    def obstacle_geometry(self) -> ObstacleGeometry:
        return ObstacleGeometry(**self.geometry)

    def problems(self) -> list[str]:
        out = []
        if self.experiment not in EXPERIMENTS:
            out.append(f"experiment: unknown name {self.experiment!r}, expected one of {', '.join(EXPERIMENTS)}")
        if not isinstance(self.d, int) or not 1 <= self.d <= 10:
            out.append(f"d: must be an integer in [1, 10], got {self.d!r}")
        for name in ("nu", "mu"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                out.append(f"{name}: must be finite and >= 0, got {v!r}")
        for v in self.times:
            if not (math.isfinite(v) and v > 0):
                out.append(f"t: horizons must be positive, got {v!r}")
        if self.dt is not None and not self.dt > 0:
            out.append(f"dt: must be positive, got {self.dt!r}")
        if self.dt is not None and self.times and self.dt > min(self.times):
            out.append("dt: exceeds the smallest horizon")
        try:
            self.obstacle_geometry()
        except (TypeError, ValueError) as err:
            out.append(f"geometry: {err}")
        for name in ("n_fields", "n_paths", "n_samples", "n_particles", "n_trials"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                out.append(f"{name}: must be a positive integer, got {v!r}")
        if self.h is not None and not self.h > 0:
            out.append(f"h: must be positive, got {self.h!r}")
        if self.eta < 0:
            out.append("eta: must be >= 0")
        if self.slack < 0:
            out.append("slack: must be >= 0")
        if not isinstance(self.seed, int) or self.seed < 0:
            out.append(f"seed: must be a nonnegative integer, got {self.seed!r}")
        exp = self.experiment
        if exp in ("survive", "sausage", "lln", "confine", "tightness") and not self.times:
            out.append(f"t: {exp} needs t or t_grid")
        if exp in ("survive", "lln", "confine", "tightness", "ldp") and self.mu + self.nu <= 0:
            out.append(f"nu: {exp} needs mu + nu > 0")
        if exp in ("lln", "confine", "tightness", "ldp", "spectral", "capacity", "moe") and self.d not in (2, 3):
            out.append(f"d: {exp} supports d = 2 or 3")
        if exp == "ldp":
            if not self.radii or any(not r > 0 for r in self.radii):
                out.append("radii: ldp needs positive radii, in units of R0")
            if len(self.times) != 1:
                out.append("t: ldp needs a single t")
        if exp == "sausage" and self.n_samples < 1000:
            out.append("n_samples: hit-or-miss sausage volumes need at least 1000 samples")
        if exp == "spectral" and self.domain not in ("disk", "square"):
            out.append(f"domain: expected 'disk' or 'square', got {self.domain!r}")
        if exp == "capacity":
            if not self.centers or not self.radii:
                out.append("centers, radii: capacity needs both")
            elif any(len(c) != self.d for c in self.centers):
                out.append("centers: every center needs d coordinates")
            if self.method not in ("grid_solve", "hitting_mc"):
                out.append(f"method: unknown capacity method {self.method!r}")
            elif self.method == "hitting_mc" and self.d != 3:
                out.append("method: hitting_mc needs d = 3")
        if exp == "moe":
            eps = self.epsilons or []
            if not eps:
                out.append("epsilons: moe needs a decreasing epsilon sweep")
            elif any(b >= a for a, b in zip(eps, eps[1:])):
                out.append("epsilons: must be decreasing")
            else:
                try:
                    for e in eps:
                        MoeParams(e, **{**self.moe, "d": self.d})
                except (TypeError, ValueError) as err:
                    out.append(f"moe: {err}")
            if self.kappa is not None and not self.kappa > 0:
                out.append("kappa: must be positive")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def canonical(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        if "experiment" not in data:
            raise ConfigError(["experiment: missing"])
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


def content_hash(text: str) -> str:
    """Git blob hash of the text."""
    raw = text.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


@dataclass
class RunRecord:
    experiment: str
    config_hash: str
    input_hash: str
    seed: int
    version: str
    started: float
    finished: float
    metrics: dict
    assertions: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, default=_json_default)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def stable(self) -> dict:
        """Record without wall-clock fields."""
        data = dataclasses.asdict(self)
        data.pop("started")
        data.pop("finished")
        return data


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def append_jsonl(path, line: str) -> None:
    """Append one line with a single O_APPEND write, so readers never see a
    partial record."""
    data = (line.rstrip("\n") + "\n").encode("utf-8")
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, data)
        os.fsync(fd)
    finally:
        os.close(fd)


def read_records(path) -> list[RunRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                out.append(RunRecord.from_json(line))
            except (json.JSONDecodeError, TypeError):
                # a torn trailing line from a killed writer is skipped
                continue
    return out


def _metric(value, stderr=0.0) -> list:
    return [float(value), float(stderr)]


def _run_constants(cfg, outdir, metrics, assertions, workers):
    const = Constants.compute(cfg.d, cfg.nu)
    for k, v in const.as_dict().items():
        if k not in ("d", "nu") and v is not None:
            metrics[k] = _metric(v)


def _run_survive(cfg, outdir, metrics, assertions, workers):
    geometry = cfg.obstacle_geometry()
    from .constants import variational_constant

    rows = []
    for t in cfg.times:
        r = optimal_radius(cfg.d, cfg.mu + cfg.nu) * t ** (1.0 / (cfg.d + 2))
        clear = estimate_survival_clearing(
            cfg.mu, cfg.nu, t, r, cfg.n_paths, cfg.dt, cfg.seed, cfg.d, geometry, cfg.n_fields, cfg.n_particles,
            workers=workers,
        )
        norm = variational_constant(cfg.d, cfg.mu + cfg.nu) * t ** (cfg.d / (cfg.d + 2))
        metrics[f"clearing_log_mean[t={t:g}]"] = _metric(clear.log_mean)
        metrics[f"clearing_log_ratio[t={t:g}]"] = _metric(-clear.log_mean / norm)
        row = {"t": t, "clearing": clear.mean, "clearing_stderr": clear.stderr, "log_ratio": -clear.log_mean / norm}
        if naive_guard(cfg.mu, cfg.nu, t, cfg.d) >= NAIVE_FLOOR:
            naive = estimate_survival_naive(
                cfg.mu, cfg.nu, t, cfg.n_fields, cfg.n_paths, cfg.dt, cfg.seed, cfg.d, geometry, workers=workers
            )
            metrics[f"naive_mean[t={t:g}]"] = _metric(naive.mean, naive.stderr)
            metrics[f"clearing_mean[t={t:g}]"] = _metric(clear.mean, clear.stderr)
            gap = abs(naive.mean - clear.mean)
            assertions[f"naive_vs_clearing[t={t:g}]"] = gap <= 3 * math.hypot(naive.stderr, clear.stderr)
            row["naive"] = naive.mean
        rows.append(row)
    _write_csv(outdir / "survive.csv", rows)


def _run_sausage(cfg, outdir, metrics, assertions, workers):
    geometry = cfg.obstacle_geometry()
    rho = geometry.sausage_radius
    rows = []
    for t in cfg.times:
        dt = cfg.dt or min(1e-2, t)
        grid, mc = [], []
        for i in range(min(cfg.n_paths, 20)):
            path = simulate_path(t, dt, cfg.d, seed=seed_sequence(cfg.seed, "sausage", "path", t, i))
            g = sausage_volume_grid(path, rho, cfg.h).volume
            m = sausage_volume_mc(path, rho, cfg.n_samples, seed=seed_sequence(cfg.seed, "sausage", "mc", t, i))
            grid.append(g)
            mc.append(m)
            rows.append({"t": t, "path": i, "grid": g, "mc": m.volume, "mc_stderr": m.stderr})
        metrics[f"grid_mean[t={t:g}]"] = _metric(np.mean(grid), np.std(grid, ddof=1) / math.sqrt(len(grid)))
        assertions[f"grid_vs_mc[t={t:g}]"] = all(abs(g - m.volume) <= 3 * m.stderr + 1e-12 for g, m in zip(grid, mc))
    _write_csv(outdir / "sausage.csv", rows)


def _run_lln(cfg, outdir, metrics, assertions, workers):
    geometry = cfg.obstacle_geometry()
    means = []
    samples = {}
    rows = []
    for t in cfg.times:
        s = conditioned_sausage_stats(
            cfg.mu, cfg.nu, t, cfg.dt, cfg.n_samples, cfg.seed, cfg.slack, cfg.d, geometry, workers=workers
        )
        mean = s.weighted_mean()
        means.append(mean)
        samples[t] = s.scaled_volume_samples
        metrics[f"scaled_volume[t={t:g}]"] = _metric(mean, s.weighted_stderr())
        metrics[f"scaled_volume_ratio[t={t:g}]"] = _metric(mean / s.limit_volume, s.weighted_stderr() / s.limit_volume)
        metrics[f"exceedance[t={t:g}]"] = _metric(s.exceedance_probability(s.limit_volume + 0.1))
        metrics[f"ess[t={t:g}]"] = _metric(s.effective_sample_size)
        rows.append({"t": t, "mean": mean, "stderr": s.weighted_stderr(), "limit": s.limit_volume, "ess": s.effective_sample_size})
        limit = s.limit_volume
    if len(means) > 1:
        assertions["lln_increasing"] = all(b > a for a, b in zip(means, means[1:]))
    _write_csv(outdir / "lln.csv", rows)
    from .plots import plot_volume_histogram

    plot_volume_histogram(samples, limit, outdir / "lln_histogram.svg")


def _run_ldp(cfg, outdir, metrics, assertions, workers):
    r0 = optimal_radius(cfg.d, cfg.nu)
    pts = ldp_curve(
        cfg.nu, cfg.times[0], [q * r0 for q in cfg.radii], cfg.d, n_particles=cfg.n_particles, seed=cfg.seed,
        geometry=cfg.obstacle_geometry(),
    )
    rows = []
    for q, p in zip(cfg.radii, pts):
        metrics[f"empirical_rate[r/R0={q:g}]"] = _metric(p.empirical_rate)
        metrics[f"I[r/R0={q:g}]"] = _metric(p.I_of_x)
        rows.append(p._asdict())
    _write_csv(outdir / "ldp.csv", rows)
    from .plots import plot_ldp

    plot_ldp(pts, cfg.d, cfg.nu, outdir / "ldp.svg")


def _run_confine(cfg, outdir, metrics, assertions, workers):
    rows = []
    for t in cfg.times:
        s = conditioned_sausage_stats(
            cfg.mu, cfg.nu, t, cfg.dt, cfg.n_samples, cfg.seed, cfg.slack, cfg.d, cfg.obstacle_geometry(),
            with_volume=False, workers=workers,
        )
        metrics[f"confinement_fraction[t={t:g}]"] = _metric(s.confinement_fraction)
        rows.append({"t": t, "confinement_fraction": s.confinement_fraction, "r0": s.r0, "slack": s.slack})
    _write_csv(outdir / "confine.csv", rows)


def _run_tightness(cfg, outdir, metrics, assertions, workers):
    pts = exponential_tightness_scan(
        cfg.mu, cfg.nu, cfg.times, cfg.eta, cfg.d, cfg.n_samples, cfg.seed, cfg.slack, cfg.dt,
        cfg.obstacle_geometry(), workers,
    )
    for p in pts:
        metrics[f"moment[t={p.t:g}]"] = _metric(p.moment, p.stderr)
    assertions["moment_bounded"] = all(p.moment <= p.bound for p in pts)
    _write_csv(outdir / "tightness.csv", [p._asdict() for p in pts])


def _run_spectral(cfg, outdir, metrics, assertions, workers):
    h = cfg.h or 1 / 128
    if cfg.domain == "square":
        dom = GridDomain.cube(cfg.size, cfg.d, h)
    else:
        dom = GridDomain.ball(cfg.size, cfg.d, h)
    res = eigen_dirichlet(dom, tol=cfg.tol)
    metrics["lambda1"] = _metric(res.lambda1)
    metrics["lambda2"] = _metric(res.lambda2)
    metrics["residual"] = _metric(res.residual)
    _, lam_ball, ratio = faber_krahn_check(dom)
    metrics["faber_krahn_ratio"] = _metric(ratio)
    assertions["faber_krahn"] = ratio >= 1 - 0.01
    for eps in cfg.epsilons or []:
        shift, scaled = eigen_shift_vs_capacity(cfg.size, eps, cfg.d, h)
        metrics[f"shift[eps={eps:g}]"] = _metric(shift)
        metrics[f"shift_over_cap[eps={eps:g}]"] = _metric(shift / scaled)
    from .plots import plot_exit_decay

    fit = exit_decay_rate(cfg.d, n_particles=cfg.n_particles, seed=cfg.seed)
    metrics["exit_decay_rate"] = _metric(fit.rate)
    plot_exit_decay(fit, outdir / "exit_decay.svg")
    (outdir / "phi1.csv").write_text(res.to_csv(dom))


def _run_capacity(cfg, outdir, metrics, assertions, workers):
    radii = cfg.radii if len(cfg.radii) > 1 else cfg.radii * len(cfg.centers)
    cap, se = capacity(
        cfg.centers, radii, cfg.d, cfg.method, h=cfg.h, n_walkers=cfg.n_particles, seed=cfg.seed, return_stderr=True
    )
    metrics["capacity"] = _metric(cap, se)


def _run_moe(cfg, outdir, metrics, assertions, workers):
    params = MoeParams(cfg.epsilons[0], **{**cfg.moe, "d": cfg.d})
    beta = params.beta
    kappa = cfg.kappa if cfg.kappa is not None else (1 - beta) * cfg.d / 2
    rows = volume_control_diagnostic(cfg.nu, cfg.epsilons, kappa, cfg.n_trials, params, cfg.seed, workers)
    for r in rows:
        metrics[f"max_statistic[eps={r['epsilon']:g}]"] = _metric(r["max_statistic"])
        metrics[f"mean_statistic[eps={r['epsilon']:g}]"] = _metric(r["mean_statistic"])
    assertions["disjoint"] = all(r["disjoint"] for r in rows)
    assertions["covered"] = all(r["covered"] for r in rows)
    assertions["mean_statistic_nonincreasing"] = all(
        b["mean_statistic"] <= a["mean_statistic"] for a, b in zip(rows, rows[1:])
    )
    _write_csv(outdir / "moe_volume_control.csv", rows)
    from .plots import plot_moe

    buf = io.StringIO()
    for eps in cfg.epsilons:
        p = params.with_epsilon(eps)
        res = coarse_grain(scaled_unit_field(cfg.nu, eps, cfg.d, cfg.seed, 0, 1 / min(cfg.epsilons)), p)
        text = res.to_csv()
        buf.write(text if not buf.tell() else text.split("\n", 1)[1])
        if cfg.d == 2:
            plot_moe(res, outdir / f"moe_eps{eps:g}.svg")
    (outdir / "moe_classes.csv").write_text(buf.getvalue())


_RUNNERS = {
    "constants": _run_constants,
    "survive": _run_survive,
    "sausage": _run_sausage,
    "lln": _run_lln,
    "ldp": _run_ldp,
    "confine": _run_confine,
    "tightness": _run_tightness,
    "spectral": _run_spectral,
    "capacity": _run_capacity,
    "moe": _run_moe,
}


def _write_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    for r in rows[1:]:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def run(config: ExperimentConfig, workers: int | None = None, out: str | os.PathLike | None = None) -> RunRecord:
    """Validate, dispatch, and append the record to ``<out>/runs.jsonl``."""
    config.validate()
    outdir = Path(out or config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    text = config.to_json()
    record = RunRecord(
        experiment=config.experiment,
        config_hash=hashlib.sha256(text.encode("utf-8")).hexdigest(),
        input_hash=content_hash(text + "\n" + __version__),
        seed=config.seed,
        version=__version__,
        started=time.time(),
        finished=0.0,
        metrics={},
        config=config.canonical(),
    )
    try:
        _RUNNERS[config.experiment](config, outdir, record.metrics, record.assertions, workers)
    except Exception as err:  # partial failures are recorded, not lost
        record.errors.append(f"{type(err).__name__}: {err}")
        record.metrics["error"] = _metric(1.0)
    record.finished = time.time()
    append_jsonl(outdir / RUNS_FILE, record.to_json())
    return record


@dataclass
class Report:
    csv_text: str
    lines: list
    failed: list

    @property
    def exit_code(self) -> int:
        return 1 if self.failed else 0


def report(records: list[RunRecord]) -> Report:
    """Merge metrics across records into one CSV; summarize lln trends and
    collect failed assertions."""
    if not records:
        raise ValueError("no records to report")
    kinds = {r.experiment for r in records}
    if len(kinds) > 1:
        raise ValueError(f"refusing to merge different experiments: {', '.join(sorted(kinds))}")
    names = []
    for r in records:
        names += [k for k in r.metrics if k not in names]
    params = ["d", "nu", "mu", "t", "t_grid"]
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["config_hash", "seed"] + params + [c for k in names for c in (k, k + "_stderr")])
    for r in records:
        row = [r.config_hash[:12], r.seed] + [json.dumps(r.config.get(k)) if isinstance(r.config.get(k), list) else r.config.get(k, "") for k in params]
        for k in names:
            row += [repr(v) for v in r.metrics[k]] if k in r.metrics else ["", ""]
        w.writerow(row)
    lines = []
    failed = [f"{r.config_hash[:12]}:{k}" for r in records for k, ok in r.assertions.items() if not ok]
    failed += [f"{r.config_hash[:12]}:error" for r in records if r.errors]
    if kinds == {"lln"}:
        series = []
        for r in records:
            for k, (v, se) in r.metrics.items():
                if k.startswith("scaled_volume_ratio[t="):
                    series.append((float(k[len("scaled_volume_ratio[t=") : -1]), v, se))
        series.sort()
        for t, v, se in series:
            lines.append(f"t = {t:<10g} mean scaled volume / (omega_d R0^d) = {v:.4f} +- {se:.4f}")
        monotone = all(b[1] > a[1] for a, b in zip(series, series[1:]))
        lines.append(f"monotone increasing in t: {'yes' if monotone else 'NO'}")
        if not monotone:
            failed.append("lln_trend")
    return Report(buf.getvalue(), lines, failed)
