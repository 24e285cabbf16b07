"""Discretized Brownian paths: hard kills, soft weights, exit times, and a
sampler for Brownian motion conditioned to stay inside a ball.

Normal increments are drawn time-major, so a path of ``n`` steps is a prefix of
the path of ``n + 1`` steps under the same stream.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .constants import lambda_ball, radial_log_derivative
from .obstacles import ObstacleField
from .rng import derive_rng

_DRIFT_TABLE = 20001
_CHUNK_STEPS = 1 << 20
_BRIDGE_REACH = 5.0


class NumericalInstabilityError(RuntimeError):
    """Raised when the conditioned sampler needs too many resampled steps."""


@dataclass
class PathSample:
    """A path recorded at ``times = dt * arange(len(positions))``."""

    positions: np.ndarray
    dt: float
    killed_at: float | None = None
    soft_integral: float = 0.0
    exited_at: dict = field(default_factory=dict)
    resampled: int = 0
    seed: int | None = None

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @property
    def n_steps(self) -> int:
        return len(self.positions) - 1

    @property
    def t(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.positions))

    @property
    def sup_norm(self) -> float:
        return float(np.sqrt(np.max(np.einsum("ij,ij->i", self.positions, self.positions))))

    def to_csv(self) -> str:
        buf = io.StringIO()
        header = ",".join(["t"] + [f"x{i + 1}" for i in range(self.d)])
        np.savetxt(buf, np.column_stack([self.times, self.positions]), delimiter=",", header=header, comments="")
        return buf.getvalue()


def _n_steps(t: float, dt: float) -> tuple[int, float]:
    if not (t > 0 and math.isfinite(t)):
        raise ValueError(f"t must be positive and finite, got {t}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if dt > t * (1 + 1e-12):
        raise ValueError(f"dt = {dt} exceeds the horizon t = {t}")
    n = max(1, int(round(t / dt)))
    # a uniform grid ending exactly at t
    return n, t / n


def simulate_paths(t: float, dt: float, d: int, n_paths: int, start=None, seed=0) -> np.ndarray:
    """Array of shape ``(n_steps + 1, n_paths, d)`` of Brownian positions."""
    n, dt = _n_steps(t, dt)
    rng = derive_rng(seed, "increments")
    start = np.zeros(d) if start is None else np.asarray(start, dtype=float)
    steps = math.sqrt(dt) * rng.standard_normal((n, n_paths, d))
    out = np.empty((n + 1, n_paths, d))
    out[0] = start
    np.cumsum(steps, axis=0, out=out[1:])
    out[1:] += start
    return out


def simulate_path(t: float, dt: float, d: int, start=None, seed=0) -> PathSample:
    """Euler path of standard Brownian motion on a uniform grid of step ``dt``."""
    n, dt_eff = _n_steps(t, dt)
    pos = simulate_paths(t, dt, d, 1, start, seed)[:, 0, :]
    return PathSample(positions=pos, dt=dt_eff, seed=seed if isinstance(seed, int) else None)


def _bridge_uniforms(seed, shape) -> np.ndarray:
    return derive_rng(seed, "bridge").random(shape)


def hard_kill_steps(
    positions: np.ndarray, field: ObstacleField, dt: float, uniforms: np.ndarray | None = None
) -> np.ndarray:
    """First kill step per path for positions of shape ``(n + 1, m, d)``.

    Returns ``-1`` for survivors. A step index ``k`` means the path is killed
    at time ``k dt``: either ``Z_k`` lies in a hard ball, or (with
    ``uniforms``) the bridge from ``Z_{k-1}`` to ``Z_k`` is declared to cross
    one with probability ``max_i exp(-2 dx_i dy_i / dt)`` over traps near the
    step. Using the max over traps keeps kills monotone in the trap set.
    """
    n1, m, d = positions.shape
    kill = np.full(m, n1, dtype=np.int64)
    a_k = field.geometry.hard_radius
    if len(field.hard_points) == 0:
        return np.full(m, -1, dtype=np.int64)
    index = field.hard_index
    flat = positions.reshape(-1, d)
    inside = index.count_within(flat, a_k).reshape(n1, m) > 0
    hit_step = np.where(inside.any(axis=0), np.argmax(inside, axis=0), n1)
    kill = np.minimum(kill, hit_step)
    if uniforms is not None and n1 > 1:
        reach = a_k + _BRIDGE_REACH * math.sqrt(dt)
        prob = np.zeros(((n1 - 1) * m))
        for offset in (0, m):
            # offset 0 queries step starts, offset m queries step ends
            pts = flat[offset : offset + (n1 - 1) * m]
            q, p, _ = index.pairs_within(pts, reach)
            if not len(q):
                continue
            x = flat[q]
            y = flat[q + m]
            c = field.hard_points[p]
            dx = np.maximum(np.sqrt(np.sum((x - c) ** 2, axis=1)) - a_k, 0.0)
            dy = np.maximum(np.sqrt(np.sum((y - c) ** 2, axis=1)) - a_k, 0.0)
            np.maximum.at(prob, q, np.exp(-2.0 * dx * dy / dt))
        crossed = (uniforms.reshape(-1) < prob).reshape(n1 - 1, m)
        cross_step = np.where(crossed.any(axis=0), np.argmax(crossed, axis=0) + 1, n1)
        kill = np.minimum(kill, cross_step)
    return np.where(kill < n1, kill, -1)


def first_hit_hard(path: PathSample, field: ObstacleField, bridge_correction: bool = True, seed=None) -> float | None:
    """First time the path enters the hard set, or None.

    The bridge test draws one uniform per step from the stream
    ``(seed, "bridge")``; ``seed`` defaults to the path's own seed.
    """
    if path.d != field.d:
        raise ValueError("path and field dimensions differ")
    pos = path.positions[:, None, :]
    u = None
    if bridge_correction:
        seed = path.seed if seed is None else seed
        u = _bridge_uniforms(0 if seed is None else seed, (path.n_steps, 1))
    k = int(hard_kill_steps(pos, field, path.dt, u)[0])
    path.killed_at = None if k < 0 else k * path.dt
    return path.killed_at


def soft_survival_weight(path: PathSample, field: ObstacleField, dt: float | None = None) -> float:
    """``exp(-sum_k V(Z_k) dt)`` with the left-endpoint rule."""
    if path.d != field.d:
        raise ValueError("path and field dimensions differ")
    dt = path.dt if dt is None else dt
    v = field.potential(path.positions[:-1])
    path.soft_integral = float(math.fsum(v) * dt)
    return math.exp(-path.soft_integral)


def exit_time(path: PathSample, center, radius: float, name: str | None = None) -> float | None:
    """First recorded time with ``|Z - center| > radius``, or None."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    diff = path.positions - np.asarray(center, dtype=float)
    out = np.einsum("ij,ij->i", diff, diff) > radius * radius
    k = int(np.argmax(out)) if out.any() else -1
    result = None if k < 0 else k * path.dt
    if name is not None:
        path.exited_at[name] = result
    return result


@numba.njit(cache=True)
def _ball_step(x, z, u, dt, radius, bridge, resample, alive_idx):
    """Advance particles one step inside B(0, radius); kill on exit or on a
    bridge crossing. Killed particles are replaced by copies of survivors
    when ``resample`` is set, otherwise flagged with NaN."""
    n, d = x.shape
    sq = math.sqrt(dt)
    n_dead = 0
    n_alive = 0
    dead = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        if x[i, 0] != x[i, 0]:
            dead[i] = True
            continue
        rx = 0.0
        ry = 0.0
        for j in range(d):
            rx += x[i, j] * x[i, j]
            x[i, j] += sq * z[i, j]
            ry += x[i, j] * x[i, j]
        rx = math.sqrt(rx)
        ry = math.sqrt(ry)
        killed = ry >= radius
        if not killed and bridge:
            killed = u[i, 0] < math.exp(-2.0 * (radius - rx) * (radius - ry) / dt)
        if killed:
            dead[i] = True
            n_dead += 1
        else:
            alive_idx[n_alive] = i
            n_alive += 1
    for i in range(n):
        if dead[i]:
            if resample and n_alive > 0:
                src = alive_idx[min(int(u[i, 1] * n_alive), n_alive - 1)]
                for j in range(d):
                    x[i, j] = x[src, j]
            else:
                x[i, 0] = np.nan
    return n_dead, n_alive


@dataclass(frozen=True)
class ExitDecayFit:
    d: int
    rate: float
    log_prefactor: float
    window: tuple
    n_particles: int
    dt: float
    radius: float
    times: np.ndarray = field(repr=False)
    log_survival: np.ndarray = field(repr=False)

    @property
    def exact_rate(self) -> float:
        return lambda_ball(self.d) / self.radius**2

    @property
    def relative_error(self) -> float:
        return self.rate / self.exact_rate - 1


def ball_survival_curve(
    d: int, s_max: float, dt: float = 1e-3, n_particles: int = 100_000, radius: float = 1.0, seed=0, bridge=True
) -> tuple[np.ndarray, np.ndarray]:
    """``log P_0(T_{B(0,radius)} > s)`` on the grid ``s = k dt`` by a
    resampled particle system: at each step killed particles restart from
    the position of a uniformly chosen survivor, and the log survival
    accumulates ``log(1 - killed / n)``. Reaches survival levels far below
    ``1 / n_particles``."""
    n, dt = _n_steps(s_max, dt)
    rng = derive_rng(seed, "exit")
    x = np.zeros((n_particles, d))
    idx = np.empty(n_particles, dtype=np.int64)
    log_s = np.zeros(n + 1)
    acc = 0.0
    for k in range(n):
        z = rng.standard_normal((n_particles, d))
        u = rng.random((n_particles, 2))
        n_dead, n_alive = _ball_step(x, z, u, dt, radius, bridge, True, idx)
        if n_alive == 0:
            log_s[k + 1 :] = -np.inf
            break
        acc += math.log1p(-n_dead / n_particles)
        log_s[k + 1] = acc
    return dt * np.arange(n + 1), log_s


def exit_decay_rate(
    d: int = 2,
    window=(2.0, 6.0),
    dt: float = 1e-3,
    n_particles: int = 100_000,
    radius: float = 1.0,
    seed=0,
    bridge=True,
) -> ExitDecayFit:
    """Least-squares log-slope of the ball survival curve over ``window``."""
    lo, hi = window
    if not 0 <= lo < hi:
        raise ValueError("window must satisfy 0 <= lo < hi")
    s, log_s = ball_survival_curve(d, hi, dt, n_particles, radius, seed, bridge)
    m = (s >= lo - 1e-12) & np.isfinite(log_s)
    slope, icpt = np.polyfit(s[m], log_s[m], 1)
    return ExitDecayFit(d, float(-slope), float(icpt), (lo, hi), n_particles, dt, radius, s, log_s)


def ball_survival_mc(
    d: int, s: float, dt: float = 1e-3, n_paths: int = 100_000, radius: float = 1.0, seed=0, bridge=True
) -> tuple[float, float]:
    """Plain Monte Carlo ``P_0(T_{B(0,radius)} > s)`` with binomial stderr."""
    n, dt = _n_steps(s, dt)
    rng = derive_rng(seed, "ball-mc")
    x = np.zeros((n_paths, d))
    idx = np.empty(n_paths, dtype=np.int64)
    for _ in range(n):
        z = rng.standard_normal((n_paths, d))
        u = rng.random((n_paths, 2))
        _ball_step(x, z, u, dt, radius, bridge, False, idx)
    p = float(np.mean(~np.isnan(x[:, 0])))
    return p, math.sqrt(max(p * (1 - p), 0.0) / n_paths)


def exit_prefactor(d: int, s0: float = 1.0, dt: float = 1e-3, n_paths: int = 100_000, seed=0) -> tuple[float, float]:
    """``A = P_0(T_{B(0,1)} > s0) exp(lambda_d s0)`` and its stderr: the
    non-exponential factor of the unit-ball survival, stable once the higher
    modes have died out."""
    p, se = ball_survival_mc(d, s0, dt, n_paths, 1.0, seed)
    g = math.exp(lambda_ball(d) * s0)
    return p * g, se * g


@numba.njit(cache=True)
def _conditioned_kernel(x, z, pool, pool_pos, table, dr, dt, radius, out):
    n, d = z.shape
    sq = math.sqrt(dt)
    r2max = radius * radius
    m = table.shape[0]
    y = np.empty(d)
    for s in range(n):
        r = 0.0
        for i in range(d):
            r += x[i] * x[i]
        r = math.sqrt(r)
        u = r / dr
        k = int(u)
        if k >= m - 1:
            g = table[m - 1]
        else:
            f = u - k
            g = table[k] * (1 - f) + table[k + 1] * f
        scale = g / r if r > 0 else 0.0
        zi = z[s]
        while True:
            rr = 0.0
            for i in range(d):
                y[i] = x[i] + scale * x[i] * dt + sq * zi[i]
                rr += y[i] * y[i]
            if rr < r2max:
                break
            if pool_pos >= pool.shape[0]:
                return -1
            zi = pool[pool_pos]
            pool_pos += 1
        for i in range(d):
            x[i] = y[i]
            out[s, i] = y[i]
    return pool_pos


def drift_table(d: int, radius: float, dt: float, n: int = _DRIFT_TABLE) -> tuple[np.ndarray, float]:
    """Radial drift ``d/dr log phi`` on a uniform grid of [0, radius], capped
    at ``1/sqrt(dt)`` in magnitude."""
    r = np.linspace(0.0, radius, n)
    g = radial_log_derivative(d, radius, r)
    g = np.maximum(g, -1.0 / math.sqrt(dt))
    g[0] = 0.0
    return g, r[1] - r[0]


def sample_conditioned_in_ball(
    tau: float,
    dt: float,
    radius: float,
    d: int,
    seed=0,
    max_resample_fraction: float = 0.1,
) -> PathSample:
    """Brownian motion from 0 conditioned to stay in B(0, radius) up to tau.

    Euler scheme for ``dZ = grad log phi(Z) dt + dB`` with phi the principal
    Dirichlet eigenfunction of the ball. A step that would leave the ball is
    redrawn; more than ``max_resample_fraction`` redraws per step raise
    NumericalInstabilityError.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    n, dt = _n_steps(tau, dt)
    table, dr = drift_table(d, radius, dt)
    rng = derive_rng(seed, "conditioned")
    out = np.empty((n + 1, d))
    out[0] = 0.0
    x = np.zeros(d)
    pool_size = int(max_resample_fraction * n) + 64
    pool = rng.standard_normal((pool_size, d))
    used = 0
    for lo in range(0, n, _CHUNK_STEPS):
        hi = min(n, lo + _CHUNK_STEPS)
        z = rng.standard_normal((hi - lo, d))
        used = _conditioned_kernel(x, z, pool, used, table, dr, dt, radius, out[lo + 1 : hi + 1])
        if used < 0:
            raise NumericalInstabilityError(
                f"more than {pool_size} resampled steps over tau = {tau}; reduce dt (now {dt:.3g})"
            )
    return PathSample(positions=out, dt=dt, resampled=int(used), seed=seed if isinstance(seed, int) else None)
