"""Annealed survival estimates, statistics of the conditioned path, and the
strategy-cost rate curve.

Survival is ``S_t = E[exp(-int_0^t V(Z_s) ds) 1{no hard trap hit by t}]``
averaged over paths and trap fields. The clearing estimator splits off the
event G = {no trap within r + a of 0} x {path stays in B(0, r) up to t}, on
which the integrand is exactly 1:

    S_t = P(G) + E[f 1{G^c}],

with ``P(G)`` in closed form up to the unit-ball survival prefactor. When the
residual term is beyond plain Monte Carlo the estimate keeps only ``P(G)``
and is flagged as a lower bound.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .brownian import (
    _n_steps,
    ball_survival_mc,
    exit_decay_rate,
    exit_prefactor,
    hard_kill_steps,
    sample_conditioned_in_ball,
)
from .constants import lambda_ball, optimal_radius, rate_function, unit_ball_volume, variational_constant
from .obstacles import Box, ObstacleGeometry, sample_field
from .rng import derive_rng, map_tasks, seed_sequence
from .sausage import sausage_volume_grid

NAIVE_FLOOR = 1e-4
ESS_FLOOR = 30
PREFACTOR_HORIZON = 1.0


@dataclass(frozen=True)
class SurvivalEstimate:
    t: float
    mu: float
    nu: float
    mean: float
    stderr: float
    n_fields: int
    n_paths: int
    estimator: str
    d: int = 2
    log_mean: float = 0.0
    lower_bound: bool = False
    radius: float | None = None
    parts: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "estimator": self.estimator,
            "params": {"d": self.d, "t": self.t, "mu": self.mu, "nu": self.nu, "radius": self.radius},
            "result": self.mean,
            "log_result": self.log_mean,
            "stderr": self.stderr,
            "lower_bound": self.lower_bound,
            "n_fields": self.n_fields,
            "n_paths": self.n_paths,
            "parts": self.parts,
        }


def naive_guard(mu: float, nu: float, t: float, d: int = 2) -> float:
    """``exp(-c(d, mu + nu) t^{d/(d+2)})``, the leading-order size of S_t."""
    if mu + nu == 0:
        return 1.0
    return math.exp(-variational_constant(d, mu + nu) * t ** (d / (d + 2)))


def default_dt(geometry: ObstacleGeometry, scale: float = 1.0) -> float:
    """``min(1e-3, (scale min(a_K, rho_C) / 4)^2)`` over the positive radii."""
    radii = [r for r in (geometry.hard_radius, geometry.sausage_radius) if r > 0]
    return min(1e-3, (scale * min(radii) / 4) ** 2)


def _field_task(task):
    """Integrand ``f`` and the clearing indicator for each path of one field."""
    mu, nu, t, dt, d, geometry, half_width, n_paths, radius, seed, f_index, bridge = task
    box = Box.cube(half_width, d)
    fld = sample_field(nu, mu, box, geometry, seed=seed_sequence(seed, "field", f_index))
    n, dt = _n_steps(t, dt)
    pos = np.empty((n + 1, n_paths, d))
    u = np.empty((n, n_paths))
    for p in range(n_paths):
        rng = derive_rng(seed, "path", f_index, p)
        steps = math.sqrt(dt) * rng.standard_normal((n, d))
        pos[0, p] = 0.0
        np.cumsum(steps, axis=0, out=pos[1:, p])
        u[:, p] = derive_rng(seed, "bridge", f_index, p).random(n)
    alive = hard_kill_steps(pos, fld, dt, u if bridge else None) < 0
    weight = np.ones(n_paths)
    if mu > 0 and geometry.soft_height > 0 and len(fld.soft_points):
        v = fld.potential(pos[:-1].reshape(-1, d)).reshape(n, n_paths)
        weight = np.exp(-v.sum(axis=0) * dt)
    f = weight * alive
    cleared = np.zeros(n_paths, dtype=bool)
    if radius > 0:
        reach = radius + geometry.a
        pts = fld.points
        field_clear = not len(pts) or bool(np.min(np.sum(pts * pts, axis=1)) > reach * reach)
        if field_clear:
            # exit tested on recorded positions, as in the plain survival test
            r2 = np.max(np.sum(pos * pos, axis=2), axis=0)
            cleared = r2 <= radius * radius
    return f, cleared


def _batch_stats(values: list) -> tuple[float, float]:
    means = np.array([math.fsum(v) / len(v) for v in values])
    mean = math.fsum(means) / len(means)
    if len(means) < 2:
        return mean, 0.0
    return mean, float(np.std(means, ddof=1) / math.sqrt(len(means)))


def estimate_survival_naive(
    mu: float,
    nu: float,
    t: float,
    n_fields: int,
    n_paths: int,
    dt: float | None = None,
    seed: int = 0,
    d: int = 2,
    geometry: ObstacleGeometry | None = None,
    half_width: float | None = None,
    bridge: bool = True,
    workers: int | None = None,
) -> SurvivalEstimate:
    """Plain average of the survival integrand over fields x paths, with
    batch-means stderr over fields.

    Refuses when ``exp(-c(d, mu+nu) t^{d/(d+2)}) < 1e-4``. The trap box is the
    cube of half width ``6 sqrt(t) + a`` unless given; fixing it couples runs
    at different t.
    """
    geometry = geometry or ObstacleGeometry()
    if mu < 0 or nu < 0:
        raise ValueError("intensities must be nonnegative")
    if naive_guard(mu, nu, t, d) < NAIVE_FLOOR:
        raise ValueError(
            f"survival at t = {t} is below {NAIVE_FLOOR:g}; plain sampling cannot resolve it, "
            "use estimate_survival_clearing"
        )
    if mu == 0 and nu == 0:
        return SurvivalEstimate(t, mu, nu, 1.0, 0.0, n_fields, n_paths, "naive", d)
    dt = default_dt(geometry) if dt is None else dt
    half_width = 6 * math.sqrt(t) + geometry.a if half_width is None else half_width
    tasks = [(mu, nu, t, dt, d, geometry, half_width, n_paths, 0.0, seed, i, bridge) for i in range(n_fields)]
    out = map_tasks(_field_task, tasks, workers)
    mean, se = _batch_stats([f for f, _ in out])
    return SurvivalEstimate(
        t, mu, nu, mean, se, n_fields, n_paths, "naive", d, math.log(mean) if mean > 0 else -math.inf
    )


@functools.lru_cache(maxsize=64)
def _prefactor(d: int, s0: float, n_paths: int, seed: int) -> tuple[float, float]:
    return exit_prefactor(d, s0, 1e-3, n_paths, seed)


def ball_survival(d: int, s: float, n_paths: int = 100_000, seed: int = 0, s0: float = PREFACTOR_HORIZON):
    """``P_0(T_{B(0,1)} > s)`` and its stderr: direct simulation below the
    horizon ``s0``, beyond it ``A exp(-lambda_d s)`` with the prefactor A
    simulated once at ``s0`` and cached."""
    if s <= s0:
        p, se = ball_survival_mc(d, s, min(1e-3, s), n_paths, 1.0, seed_sequence(seed, "direct"))
        return p, se, math.log(p) if p > 0 else -math.inf
    a, a_se = _prefactor(d, s0, n_paths, seed)
    log_p = math.log(a) - lambda_ball(d) * s
    return math.exp(log_p), math.exp(log_p) * a_se / a, log_p


def estimate_survival_clearing(
    mu: float,
    nu: float,
    t: float,
    r: float,
    n_paths: int,
    dt: float | None = None,
    seed: int = 0,
    d: int = 2,
    geometry: ObstacleGeometry | None = None,
    n_fields: int = 100,
    n_ball_paths: int = 100_000,
    half_width: float | None = None,
    bridge: bool = True,
    workers: int | None = None,
) -> SurvivalEstimate:
    """``P(G) + E[f 1{G^c}]`` for the clearing event G of radius r.

    ``P(G) = exp(-(mu+nu) omega_d (r+a)^d) P_0(T_{B(0,r)} > t)``. The
    residual term runs only where the naive guard allows; otherwise the
    estimate is ``P(G)`` alone, a stochastic lower bound flagged as such. With
    ``r = 0`` the result equals the naive estimator on the same streams.
    """
    geometry = geometry or ObstacleGeometry()
    if r < 0:
        raise ValueError("clearing radius must be nonnegative")
    a = geometry.a
    if r > 0:
        s = t / (r * r)
        p_ball, se_ball, log_ball = ball_survival(d, s, n_ball_paths, seed)
        log_clear = -(mu + nu) * unit_ball_volume(d) * (r + a) ** d
        log_g = log_clear + log_ball
    else:
        p_ball, se_ball, log_ball, log_clear, log_g = 0.0, 0.0, -math.inf, 0.0, -math.inf
    p_g = math.exp(log_g)
    se_g = math.exp(log_clear) * se_ball
    parts = {"log_clear": log_clear, "log_ball": log_ball, "p_g": p_g}
    residual_ok = naive_guard(mu, nu, t, d) >= NAIVE_FLOOR
    if not residual_ok:
        return SurvivalEstimate(
            t, mu, nu, p_g, se_g, 0, n_ball_paths, "clearing", d, log_g, True, r, parts
        )
    if mu == 0 and nu == 0 and r == 0:
        return SurvivalEstimate(t, mu, nu, 1.0, 0.0, n_fields, n_paths, "clearing", d, 0.0, False, r, parts)
    dt = default_dt(geometry) if dt is None else dt
    half_width = 6 * math.sqrt(t) + a if half_width is None else half_width
    tasks = [(mu, nu, t, dt, d, geometry, half_width, n_paths, r, seed, i, bridge) for i in range(n_fields)]
    out = map_tasks(_field_task, tasks, workers)
    resid, resid_se = _batch_stats([f * ~c for f, c in out])
    parts["residual"] = resid
    mean = min(1.0, p_g + resid)
    se = math.hypot(se_g, resid_se)
    return SurvivalEstimate(
        t, mu, nu, mean, se, n_fields, n_paths, "clearing", d, math.log(mean) if mean > 0 else -math.inf, False, r, parts
    )


@dataclass(frozen=True)
class ConditionedStats:
    t: float
    d: int
    nu: float
    mu: float
    r0: float
    slack: float
    scaled_volume_samples: np.ndarray
    weights: np.ndarray
    scaled_sup_norms: np.ndarray
    confinement_fraction: float
    sup_norm_exp_moment: float
    resampled: int

    @property
    def effective_sample_size(self) -> float:
        w = self.weights
        return math.fsum(w) ** 2 / math.fsum(w * w)

    @property
    def flagged(self) -> bool:
        return self.effective_sample_size < ESS_FLOOR

    @property
    def limit_volume(self) -> float:
        """``omega_d R0^d``, the large-t value of the scaled volume."""
        return unit_ball_volume(self.d) * self.r0**self.d

    def weighted_mean(self, values=None) -> float:
        values = self.scaled_volume_samples if values is None else np.asarray(values)
        return math.fsum(self.weights * values) / math.fsum(self.weights)

    def weighted_stderr(self, values=None) -> float:
        values = self.scaled_volume_samples if values is None else np.asarray(values)
        m = self.weighted_mean(values)
        w = self.weights / math.fsum(self.weights)
        return math.sqrt(math.fsum(w * w * (values - m) ** 2))

    def exceedance_probability(self, threshold: float) -> float:
        return self.weighted_mean((self.scaled_volume_samples > threshold).astype(float))

    def to_record(self) -> dict:
        return {
            "estimator": "conditioned",
            "params": {"d": self.d, "t": self.t, "mu": self.mu, "nu": self.nu, "slack": self.slack},
            "result": self.weighted_mean(),
            "stderr": self.weighted_stderr(),
            "ess": self.effective_sample_size,
            "ess_flag": self.flagged,
            "limit_volume": self.limit_volume,
            "confinement_fraction": self.confinement_fraction,
            "sup_norm_exp_moment": self.sup_norm_exp_moment,
            "resampled": self.resampled,
        }


def _conditioned_task(task):
    tau, dt, r0, d, seed, i, rho, with_volume = task
    path = sample_conditioned_in_ball(tau, dt, r0, d, seed=seed_sequence(seed, "conditioned", i))
    vol = sausage_volume_grid(path, rho).volume if with_volume else math.nan
    return vol, path.sup_norm, path.resampled


def conditioned_sausage_stats(
    mu: float,
    nu: float,
    t: float,
    dt: float | None = None,
    n_samples: int = 100,
    seed: int = 0,
    slack: float = 0.0,
    d: int = 2,
    geometry: ObstacleGeometry | None = None,
    eta: float = 1.0,
    with_volume: bool = True,
    workers: int | None = None,
) -> ConditionedStats:
    """Scaled sausage volumes ``t^{-d/(d+2)} |W_t^C|`` of paths confined to
    the ball of radius ``R0(d, mu+nu) t^{1/(d+2)}``.

    Runs in the scaled picture: the conditioned sampler in B(0, R0) for
    ``tau = t^{d/(d+2)}`` with sausage radius ``rho_C eps``. Paths carry unit
    weights since the sampler is itself the proxy for the conditioned law.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    if mu + nu <= 0:
        raise ValueError("mu + nu must be positive to set the confinement radius")
    geometry = geometry or ObstacleGeometry()
    eps = t ** (-1.0 / (d + 2))
    tau = t * eps * eps
    r0 = optimal_radius(d, mu + nu)
    dt = min(default_dt(geometry, eps), tau) if dt is None else dt
    rho = geometry.sausage_radius * eps
    tasks = [(tau, dt, r0, d, seed, i, rho, with_volume) for i in range(n_samples)]
    out = map_tasks(_conditioned_task, tasks, workers)
    vols = np.array([o[0] for o in out])
    sups = np.array([o[1] for o in out])
    w = np.ones(n_samples)
    conf = math.fsum(w * (sups <= r0 + slack)) / math.fsum(w)
    moment = math.fsum(w * np.exp(eta * sups)) / math.fsum(w)
    return ConditionedStats(
        t, d, nu, mu, r0, slack, vols, w, sups, conf, moment, int(sum(o[2] for o in out))
    )


class LdpPoint(NamedTuple):
    x: float
    empirical_rate: float
    I_of_x: float
    r: float
    lambda_hat: float


def ldp_curve(
    nu: float,
    t: float,
    radii,
    d: int = 2,
    a: float | None = None,
    n_particles: int = 100_000,
    dt: float = 1e-3,
    window=(2.0, 6.0),
    seed: int = 0,
    geometry: ObstacleGeometry | None = None,
) -> list[LdpPoint]:
    """Normalized cost of the ball strategy at each scaled radius r:
    ``nu omega_d (r + a eps)^d + lambda_hat(r) - c(d, nu)``, next to I(omega_d r^d).

    ``lambda_hat(r)`` is the simulated exit-decay rate of B(0, r), with the
    time step and fit window scaled by r^2.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    a = (geometry or ObstacleGeometry()).a if a is None else a
    eps = t ** (-1.0 / (d + 2))
    omega = unit_ball_volume(d)
    c = variational_constant(d, nu)
    out = []
    for i, r in enumerate(radii):
        if not r > 0:
            raise ValueError("radii must be positive")
        fit = exit_decay_rate(
            d, (window[0] * r * r, window[1] * r * r), dt * r * r, n_particles, r, seed_sequence(seed, "ldp", i)
        )
        x = omega * r**d
        emp = nu * omega * (r + a * eps) ** d + fit.rate - c
        out.append(LdpPoint(x, emp, float(rate_function(x, d, nu)), r, fit.rate))
    return out


class TightnessPoint(NamedTuple):
    t: float
    moment: float
    stderr: float
    bound: float


def exponential_tightness_scan(
    mu: float,
    nu: float,
    t_grid,
    eta: float,
    d: int = 2,
    n_samples: int = 100,
    seed: int = 0,
    slack: float = 0.0,
    dt: float | None = None,
    geometry: ObstacleGeometry | None = None,
    workers: int | None = None,
) -> list[TightnessPoint]:
    """``E exp(eta t^{-1/(d+2)} sup_{s<=t} |Z_s|)`` under the confined
    sampler for each t, with the sampler's exact bound ``exp(eta (R0 + slack))``."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    out = []
    for t in t_grid:
        stats = conditioned_sausage_stats(
            mu, nu, t, dt, n_samples, seed, slack, d, geometry, eta, with_volume=False, workers=workers
        )
        vals = np.exp(eta * stats.scaled_sup_norms)
        out.append(
            TightnessPoint(
                float(t), stats.sup_norm_exp_moment, stats.weighted_stderr(vals), math.exp(eta * (stats.r0 + slack))
            )
        )
    return out


def timed(fn, *args, **kwargs):
    """``(result, wall seconds)``."""
    start = time.perf_counter()
    res = fn(*args, **kwargs)
    return res, time.perf_counter() - start
