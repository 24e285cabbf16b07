"""L-adic coarse-graining of a scaled trap configuration: skeleton
capacities, density boxes, bad boxes, and the volume-control diagnostic.

A box at level k is keyed by ``(k, m)`` with ``m`` an integer d-vector; it is
``m L^-k + L^-k [0, 1)^d``. Boxes are half-open so each point lies in exactly
one box per level.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .obstacles import Box, ObstacleField, poisson_points
from .rng import map_tasks
from .spectral import capacity


def _level(eps_power: float, L: int) -> int:
    """The n with ``L^{-n-1} <= eps_power < L^{-n}``."""
    n = max(0, int(math.floor(-math.log(eps_power) / math.log(L))))
    # guard the floor against rounding at exact powers of L
    while n > 0 and not eps_power < float(L) ** (-n):
        n -= 1
    while not eps_power >= float(L) ** (-n - 1):
        n += 1
    while not eps_power < float(L) ** (-n):
        n -= 1
    return n


@dataclass(frozen=True)
class MoeParams:
    epsilon: float
    alpha: float = 0.2
    gamma: float = 0.5
    beta: float = 0.8
    delta: float = 5.0
    L: int = 2
    a: float = 1.0
    d: int = 2

    def __post_init__(self):
        if not 0 < self.alpha < self.gamma < self.beta < 1:
            raise ValueError("need 0 < alpha < gamma < beta < 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if int(self.L) != self.L or self.L < 2:
            raise ValueError("L must be an integer >= 2")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.d not in (2, 3):
            raise ValueError("coarse-graining supports d = 2 and d = 3")
        if not 4 * self.a * self.epsilon < float(self.L) ** (-self.n_gamma):
            raise ValueError(
                f"scales not separated: 4 a eps = {4 * self.a * self.epsilon:.3g} "
                f">= L^-n_gamma = {float(self.L) ** -self.n_gamma:.3g}"
            )
        if not self.n_gamma > self.n_alpha:
            raise ValueError(f"n_gamma = {self.n_gamma} must exceed n_alpha = {self.n_alpha}")

    @property
    def n_alpha(self) -> int:
        return _level(self.epsilon**self.alpha, self.L)

    @property
    def n_gamma(self) -> int:
        return _level(self.epsilon**self.gamma, self.L)

    @property
    def n_beta(self) -> int:
        return _level(self.epsilon**self.beta, self.L)

    def with_epsilon(self, epsilon: float) -> "MoeParams":
        return MoeParams(epsilon, self.alpha, self.gamma, self.beta, self.delta, self.L, self.a, self.d)

    def as_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "beta": self.beta,
            "delta": self.delta,
            "L": self.L,
            "a": self.a,
            "d": self.d,
            "n_alpha": self.n_alpha,
            "n_gamma": self.n_gamma,
            "n_beta": self.n_beta,
        }


def index_key(index, L: int = 2, d: int | None = None) -> tuple[int, tuple]:
    """``(i0, i1, ..., ik)`` to the box key ``(k, m)`` with
    ``m = L^k i0 + L^{k-1} i1 + ... + ik``."""
    index = list(index)
    if not index:
        raise ValueError("index needs at least the integer part i0")
    if d is None:
        d = next((len(np.atleast_1d(v)) for v in index if np.ndim(v) > 0), 2)
    parts = []
    for j, v in enumerate(index):
        v = np.broadcast_to(np.asarray(v), (d,))
        if not np.all(np.asarray(v) == np.round(v)):
            raise ValueError(f"index entry {j} is not integral")
        v = v.astype(np.int64)
        if j > 0 and (np.any(v < 0) or np.any(v >= L)):
            raise ValueError(f"index entry {j} must lie in {{0, ..., {L - 1}}}^d")
        parts.append(v)
    m = parts[0].copy()
    for v in parts[1:]:
        m = m * L + v
    return len(parts) - 1, tuple(int(x) for x in m)


def key_box(key, L: int = 2) -> Box:
    k, m = key
    side = float(L) ** (-k)
    lower = tuple(side * v for v in m)
    return Box(lower, tuple(v + side for v in lower))


def l_adic_box(index, L: int = 2, d: int | None = None) -> Box:
    """The box ``q + L^-k [0,1]^d`` with ``q = i0 + L^-1 i1 + ... + L^-k ik``."""
    return key_box(index_key(index, L, d), L)


def truncate(key, level: int, L: int = 2) -> tuple[int, tuple]:
    """Key of the level-``level`` ancestor of a box."""
    k, m = key
    if not 0 <= level <= k:
        raise ValueError(f"cannot truncate level {k} to level {level}")
    f = L ** (k - level)
    return level, tuple(v // f for v in m)


def box_of(points: np.ndarray, k: int, L: int = 2) -> np.ndarray:
    """Integer coordinates of the level-k boxes holding each point."""
    return np.floor(np.asarray(points, dtype=float) * float(L) ** k).astype(np.int64)


def _points(field) -> np.ndarray:
    if isinstance(field, ObstacleField):
        return field.hard_points
    return np.asarray(field, dtype=float)


def skeleton_capacity(
    field, key, a: float, epsilon: float, L: int = 2, h_fraction: float = 0.25, n_walkers: int = 20_000, seed=0
) -> float:
    """Capacity of the rescaled skeleton ``L^k (union of closed balls
    B(x, a eps) over points x in the box)``; 0 for an empty box.

    d = 2 uses the massive grid solve with spacing ``h_fraction`` times the
    rescaled radius; d = 3 uses walk-on-spheres.
    """
    k, m = key
    pts = _points(field)
    d = pts.shape[1] if pts.ndim == 2 and pts.shape[0] else len(m)
    if len(pts) == 0:
        return 0.0
    inside = np.all(box_of(pts, k, L) == np.asarray(m), axis=1)
    if not inside.any():
        return 0.0
    scale = float(L) ** k
    corner = np.asarray(m, dtype=float) / scale
    centers = scale * (pts[inside] - corner)
    radius = scale * a * epsilon
    if d == 2:
        return capacity(centers, radius, d=2, method="grid_solve", h=h_fraction * radius)
    return capacity(centers, radius, d=3, method="hitting_mc", n_walkers=n_walkers, seed=seed)


@dataclass
class CoarseGrainResult:
    params: MoeParams
    unit_box: tuple
    density_boxes: set
    bad_boxes: set
    skeleton_caps: dict
    points: np.ndarray = field(repr=False)

    @property
    def bad_volume(self) -> float:
        return len(self.bad_boxes) * float(self.params.L) ** (-self.params.d * self.params.n_beta)

    @property
    def density_volume(self) -> float:
        return len(self.density_boxes) * float(self.params.L) ** (-self.params.d * self.params.n_gamma)

    def disjoint(self) -> bool:
        """No bad box lies in a density box. Boxes are nested L-adic cubes, so
        the sets are disjoint iff no bad box has a density ancestor."""
        p = self.params
        return all(truncate(b, p.n_gamma, p.L) not in self.density_boxes for b in self.bad_boxes)

    def covered(self) -> bool:
        """Every point of the unit box lies in a density or bad box."""
        p = self.params
        for m in map(tuple, box_of(self.points, p.n_beta, p.L)):
            key = (p.n_beta, m)
            if key not in self.bad_boxes and truncate(key, p.n_gamma, p.L) not in self.density_boxes:
                return False
        return True

    def rows(self) -> list[tuple]:
        """``(epsilon, level, index, class)`` for every box at the gamma and
        beta levels of the unit box."""
        p = self.params
        out = []
        for key in _children(self.unit_box, p.n_gamma, p.L, p.d):
            cls = "density" if key in self.density_boxes else "neutral"
            out.append((p.epsilon, key[0], key[1], cls))
        for key in sorted(self.bad_boxes):
            out.append((p.epsilon, key[0], key[1], "bad"))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["epsilon", "level", "index", "class"])
        for eps, k, m, cls in self.rows():
            w.writerow([eps, k, " ".join(str(v) for v in m), cls])
        return buf.getvalue()


def _children(unit_box, k: int, L: int, d: int):
    base = np.asarray(unit_box, dtype=np.int64) * L**k
    for off in itertools.product(range(L**k), repeat=d):
        yield k, tuple(int(v) for v in base + np.asarray(off))


def _unit_points(field, unit_box) -> np.ndarray:
    pts = _points(field)
    if len(pts) == 0:
        return pts.reshape(0, len(unit_box))
    keep = np.all(np.floor(pts).astype(np.int64) == np.asarray(unit_box), axis=1)
    return pts[keep]


def classify_density_boxes(field, params: MoeParams, unit_box=None, cache: dict | None = None) -> set:
    """Level-n_gamma boxes of the unit box whose skeleton capacities satisfy
    ``sum_{n_alpha < k <= n_gamma} cap(K_[i]_k) >= delta (n_gamma - n_alpha)``.

    ``cache`` maps box keys to skeleton capacities and is filled in place;
    every box of the intermediate levels is visited, empty ones included.
    """
    p = params
    unit_box = (0,) * p.d if unit_box is None else tuple(unit_box)
    pts = _unit_points(field, unit_box)
    cache = {} if cache is None else cache
    for k in range(p.n_alpha + 1, p.n_gamma + 1):
        occupied = {tuple(m) for m in box_of(pts, k, p.L)} if len(pts) else set()
        for key in _children(unit_box, k, p.L, p.d):
            if key not in cache:
                cache[key] = skeleton_capacity(pts, key, p.a, p.epsilon, p.L) if key[1] in occupied else 0.0
    threshold = p.delta * (p.n_gamma - p.n_alpha)
    dense = set()
    for key in _children(unit_box, p.n_gamma, p.L, p.d):
        total = math.fsum(cache[truncate(key, k, p.L)] for k in range(p.n_alpha + 1, p.n_gamma + 1))
        if total >= threshold:
            dense.add(key)
    return dense


def classify_bad_boxes(field, params: MoeParams, density_set: set, unit_box=None) -> set:
    """Occupied level-n_beta boxes not contained in the density set."""
    p = params
    unit_box = (0,) * p.d if unit_box is None else tuple(unit_box)
    pts = _unit_points(field, unit_box)
    if not len(pts):
        return set()
    bad = set()
    for m in {tuple(int(v) for v in row) for row in box_of(pts, p.n_beta, p.L)}:
        key = (p.n_beta, m)
        if truncate(key, p.n_gamma, p.L) not in density_set:
            bad.add(key)
    return bad


def coarse_grain(field, params: MoeParams, unit_box=None) -> CoarseGrainResult:
    unit_box = (0,) * params.d if unit_box is None else tuple(unit_box)
    cache: dict = {}
    dense = classify_density_boxes(field, params, unit_box, cache)
    bad = classify_bad_boxes(field, params, dense, unit_box)
    return CoarseGrainResult(params, unit_box, dense, bad, cache, _unit_points(field, unit_box))


def scaled_unit_field(nu: float, epsilon: float, d: int, seed, trial: int = 0, extent: float | None = None) -> np.ndarray:
    """Points in [0, 1)^d of the eps-rescaled Poisson field of intensity nu.

    The original-units field lives on ``[0, extent)^d`` (default ``1/eps``);
    passing the extent of the smallest eps in a sweep makes every eps see
    the same realization.
    """
    extent = 1.0 / epsilon if extent is None else extent
    pts = poisson_points(nu, Box((0.0,) * d, (extent,) * d), seed, "moe", trial)
    pts = pts * epsilon
    return pts[np.all(pts < 1.0, axis=1)]


def _trial(task):
    nu, eps_list, kappa, template, seed, trial = task
    extent = 1.0 / min(eps_list)
    out = []
    for eps in eps_list:
        params = template.with_epsilon(eps)
        pts = scaled_unit_field(nu, eps, params.d, seed, trial, extent)
        res = coarse_grain(pts, params)
        out.append((res.bad_volume, eps ** (-kappa) * res.bad_volume, res.disjoint(), res.covered(), len(pts)))
    return out


def volume_control_diagnostic(
    nu: float,
    epsilons,
    kappa: float,
    n_trials: int,
    params: MoeParams | None = None,
    seed: int = 0,
    workers: int | None = None,
) -> list[dict]:
    """Per epsilon, ``eps^-kappa |bad set in [0,1)^d|`` over n_trials Poisson
    fields: max and mean, plus the invariant checks.

    Each trial is one original-units field viewed at every eps of the sweep.
    """
    eps_list = [float(e) for e in epsilons]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("epsilon sweep must be decreasing")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    template = params or MoeParams(eps_list[0])
    for eps in eps_list:
        template.with_epsilon(eps)
    if nu == 0:
        seeds = [[(0.0, 0.0, True, True, 0)] * len(eps_list)] * n_trials
    else:
        seeds = map_tasks(_trial, [(nu, eps_list, kappa, template, seed, i) for i in range(n_trials)], workers)
    rows = []
    for j, eps in enumerate(eps_list):
        vals = [trial[j] for trial in seeds]
        stats = [v[1] for v in vals]
        rows.append(
            {
                "epsilon": eps,
                "kappa": kappa,
                "n_trials": n_trials,
                "max_statistic": max(stats),
                "mean_statistic": math.fsum(stats) / n_trials,
                "mean_bad_volume": math.fsum(v[0] for v in vals) / n_trials,
                "mean_points": math.fsum(v[4] for v in vals) / n_trials,
                "disjoint": all(v[2] for v in vals),
                "covered": all(v[3] for v in vals),
            }
        )
    return rows
