"""Poissonian trap configurations, the hard trap set and the soft potential.

Traps are closed balls: a hard trap of radius ``hard_radius`` kills on contact,
a soft trap adds ``soft_height`` to the potential inside radius ``soft_radius``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .rng import derive_rng

_ARRIVAL_CHUNK = 4096
_MAX_CELLS = 2_000_000


@dataclass(frozen=True)
class ObstacleGeometry:
    hard_radius: float = 1.0
    soft_radius: float = 0.0
    soft_height: float = 0.0
    sausage_radius: float = 0.5

    def __post_init__(self):
        for name in ("hard_radius", "soft_radius", "soft_height"):
            val = getattr(self, name)
            if not (val >= 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if not (self.sausage_radius > 0 and math.isfinite(self.sausage_radius)):
            raise ValueError("sausage_radius must be > 0")

    @property
    def a(self) -> float:
        """Envelope radius: the smallest closed ball holding K, supp W and C."""
        return max(self.hard_radius, self.soft_radius, self.sausage_radius)

    def scaled(self, eps: float) -> "ObstacleGeometry":
        """Geometry of the eps-rescaled picture: radii times eps, soft height
        times eps^-2."""
        return ObstacleGeometry(
            self.hard_radius * eps, self.soft_radius * eps, self.soft_height / eps**2, self.sausage_radius * eps
        )

    def as_dict(self) -> dict:
        return {
            "hard_radius": self.hard_radius,
            "soft_radius": self.soft_radius,
            "soft_height": self.soft_height,
            "sausage_radius": self.sausage_radius,
        }


@dataclass(frozen=True)
class Box:
    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not lo:
            raise ValueError("box corners must have equal nonzero length")
        if not all(math.isfinite(v) for v in lo + hi) or any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate box {lo} -> {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, half_width: float, d: int) -> "Box":
        return cls((-half_width,) * d, (half_width,) * d)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def volume(self) -> float:
        return math.prod(h - l for l, h in zip(self.lower, self.upper))

    def padded(self, pad: float) -> "Box":
        return Box(tuple(v - pad for v in self.lower), tuple(v + pad for v in self.upper))

    def contains(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=-1)


def _pad3(x: np.ndarray) -> np.ndarray:
    out = np.zeros((len(x), 3))
    out[:, : x.shape[1]] = x
    return out


@numba.njit(cache=True)
def _scan_pairs(x, r, lower, cell, shape, starts, order, points, offsets, q_out, p_out, d_out, fill):
    """Count (fill=False) or write (fill=True) the pairs within r of each
    query, visiting only the cells the query's radius box overlaps."""
    n = x.shape[0]
    counts = np.zeros(n, dtype=np.int64)
    lo = np.empty(3, dtype=np.int64)
    hi = np.empty(3, dtype=np.int64)
    r2 = r * r
    for i in range(n):
        empty = False
        for a in range(3):
            lo[a] = max(int(np.floor((x[i, a] - r - lower[a]) / cell)), 0)
            hi[a] = min(int(np.floor((x[i, a] + r - lower[a]) / cell)), shape[a] - 1)
            if lo[a] > hi[a]:
                empty = True
        if empty:
            continue
        k = offsets[i] if fill else 0
        for c0 in range(lo[0], hi[0] + 1):
            for c1 in range(lo[1], hi[1] + 1):
                for c2 in range(lo[2], hi[2] + 1):
                    key = (c0 * shape[1] + c1) * shape[2] + c2
                    for s in range(starts[key], starts[key + 1]):
                        j = order[s]
                        dd = 0.0
                        for a in range(3):
                            diff = x[i, a] - points[j, a]
                            dd += diff * diff
                        if dd <= r2:
                            if fill:
                                q_out[k] = i
                                p_out[k] = j
                                d_out[k] = np.sqrt(dd)
                                k += 1
                            else:
                                counts[i] += 1
    return counts


class GridIndex:
    """Uniform-grid bucket map from cell to point indices.

    Points are sorted by cell key so a cell's members are a contiguous slice;
    batch queries loop over neighbour offsets and bucket occupancy, vectorized
    over the query points.
    """

    def __init__(self, points: np.ndarray, lower, upper, cell: float):
        self.points = np.asarray(points, dtype=float).reshape(-1, len(lower))
        self.d = len(lower)
        self.lower = np.asarray(lower, dtype=float)
        extent = np.asarray(upper, dtype=float) - self.lower
        cell = float(cell) if cell > 0 else float(extent.max())
        # cap the cell count; a coarser grid only costs speed, never correctness
        while np.prod(np.maximum(1, np.ceil(extent / cell))) > _MAX_CELLS:
            cell *= 2.0
        self.cell = cell
        self.shape = tuple(int(v) for v in np.maximum(1, np.ceil(extent / cell)))
        n_cells = int(np.prod(self.shape))
        if len(self.points):
            keys = self._keys(self._cells(self.points))
        else:
            keys = np.zeros(0, dtype=np.int64)
        self.order = np.argsort(keys, kind="stable")
        self.starts = np.searchsorted(keys[self.order], np.arange(n_cells + 1))
        counts = np.diff(self.starts)
        self.max_occupancy = int(counts.max()) if len(counts) else 0

    def _cells(self, x: np.ndarray) -> np.ndarray:
        c = np.floor((x - self.lower) / self.cell).astype(np.int64)
        return np.clip(c, 0, np.asarray(self.shape) - 1)

    def _keys(self, cells: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(cells.T), self.shape)

    def pairs_within(self, x: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All ``(query, point)`` pairs with ``|x_q - p| <= r``, plus distances,
        ordered by query."""
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        if len(self.points) == 0 or len(x) == 0:
            e = np.zeros(0, dtype=np.int64)
            return e, e, np.zeros(0)
        args = (
            _pad3(x),
            float(r),
            _pad3(self.lower[None, :])[0],
            self.cell,
            np.asarray(tuple(self.shape) + (1,) * (3 - self.d), dtype=np.int64),
            self.starts,
            self.order,
            _pad3(self.points),
        )
        e = np.zeros(0, dtype=np.int64)
        counts = _scan_pairs(*args, e, e, e, np.zeros(0), False)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        total = int(offsets[-1])
        q = np.empty(total, dtype=np.int64)
        p = np.empty(total, dtype=np.int64)
        dist = np.empty(total)
        _scan_pairs(*args, offsets, q, p, dist, True)
        return q, p, dist

    def query_radius(self, x, r: float) -> np.ndarray:
        """Sorted indices of points within distance r of a single point x."""
        _, p, _ = self.pairs_within(np.asarray(x, dtype=float).reshape(1, self.d), r)
        return np.sort(p)

    def count_within(self, x: np.ndarray, r: float) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        q, _, _ = self.pairs_within(x, r)
        return np.bincount(q, minlength=len(x))

    def nearest_within(self, x: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
        """Distance to and index of the nearest point within r (inf, -1 if none)."""
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        dist = np.full(len(x), np.inf)
        idx = np.full(len(x), -1, dtype=np.int64)
        q, p, dd = self.pairs_within(x, r)
        if len(q):
            order = np.lexsort((dd, q))
            q, p, dd = q[order], p[order], dd[order]
            first = np.ones(len(q), dtype=bool)
            first[1:] = q[1:] != q[:-1]
            dist[q[first]] = dd[first]
            idx[q[first]] = p[first]
        return dist, idx


@dataclass(frozen=True)
class ObstacleField:
    hard_points: np.ndarray
    soft_points: np.ndarray
    box: Box
    nu: float
    mu: float
    geometry: ObstacleGeometry
    seed: int | None = None
    padded: bool = True
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def sample_box(self) -> Box:
        """The region the Poisson points were drawn in."""
        return self.box.padded(self.geometry.a) if self.padded else self.box

    @property
    def points(self) -> np.ndarray:
        """All trap centers, hard then soft."""
        return np.concatenate([self.hard_points, self.soft_points], axis=0)

    def _grid(self, kind: str) -> GridIndex:
        if kind not in self._index:
            pts = self.hard_points if kind == "hard" else self.soft_points
            sb = self.sample_box
            self._index[kind] = GridIndex(pts, sb.lower, sb.upper, self.geometry.a)
        return self._index[kind]

    @property
    def hard_index(self) -> GridIndex:
        return self._grid("hard")

    @property
    def soft_index(self) -> GridIndex:
        return self._grid("soft")

    def hard_mask(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        return self.hard_index.count_within(x, self.geometry.hard_radius) > 0

    def potential(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        g = self.geometry
        if g.soft_height == 0 or len(self.soft_points) == 0:
            return np.zeros(len(x))
        return g.soft_height * self.soft_index.count_within(x, g.soft_radius)

    def shifted(self, v) -> "ObstacleField":
        v = np.asarray(v, dtype=float)
        box = Box(tuple(np.asarray(self.box.lower) + v), tuple(np.asarray(self.box.upper) + v))
        return replace(self, hard_points=self.hard_points + v, soft_points=self.soft_points + v, box=box, _index={})

    def with_points(self, hard_points=None, soft_points=None) -> "ObstacleField":
        return replace(
            self,
            hard_points=self.hard_points if hard_points is None else np.asarray(hard_points, dtype=float),
            soft_points=self.soft_points if soft_points is None else np.asarray(soft_points, dtype=float),
            _index={},
        )

    def to_dict(self) -> dict:
        return {
            "box": {"lower": list(self.box.lower), "upper": list(self.box.upper)},
            "nu": self.nu,
            "mu": self.mu,
            "geometry": self.geometry.as_dict(),
            "seed": self.seed,
            "padded": self.padded,
            "points": self.hard_points.tolist(),
            "soft_points": self.soft_points.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ObstacleField":
        box = Box(tuple(data["box"]["lower"]), tuple(data["box"]["upper"]))
        d = box.d
        return cls(
            hard_points=np.asarray(data["points"], dtype=float).reshape(-1, d),
            soft_points=np.asarray(data.get("soft_points", []), dtype=float).reshape(-1, d),
            box=box,
            nu=float(data["nu"]),
            mu=float(data["mu"]),
            geometry=ObstacleGeometry(**data["geometry"]),
            seed=data.get("seed"),
            padded=bool(data.get("padded", True)),
        )

    @classmethod
    def from_json(cls, text: str) -> "ObstacleField":
        return cls.from_dict(json.loads(text))


def poisson_points(intensity: float, box: Box, seed, *key) -> np.ndarray:
    """Poisson points in a box, built from unit-rate arrivals in "intensity
    time": the points for intensity nu are those whose arrival is below
    ``nu |box|``. Fixed chunk sizes make the configurations for any two
    intensities nested under one seed."""
    if not (intensity >= 0 and math.isfinite(intensity)):
        raise ValueError(f"intensity must be finite and >= 0, got {intensity}")
    d = box.d
    mean = intensity * box.volume
    if mean == 0:
        return np.zeros((0, d))
    arrivals = derive_rng(seed, *key, "arrivals")
    places = derive_rng(seed, *key, "positions")
    elapsed = 0.0
    chunks = []
    while True:
        cum = elapsed + np.cumsum(arrivals.standard_exponential(_ARRIVAL_CHUNK))
        pos = places.random((_ARRIVAL_CHUNK, d))
        k = int(np.searchsorted(cum, mean, side="right"))
        chunks.append(pos[:k])
        if k < _ARRIVAL_CHUNK:
            break
        elapsed = cum[-1]
    unit = np.concatenate(chunks, axis=0)
    lo = np.asarray(box.lower)
    return lo + unit * (np.asarray(box.upper) - lo)


def sample_field(
    nu: float,
    mu: float,
    box,
    geometry: ObstacleGeometry | None = None,
    seed: int = 0,
    pad: bool = True,
) -> ObstacleField:
    """Sample hard (intensity nu) and soft (intensity mu) Poisson traps.

    With ``pad`` the sampling region is the box grown by the envelope radius
    on every side, so traps reaching into the box are never missed.
    """
    for name, val in (("nu", nu), ("mu", mu)):
        if not (val >= 0 and math.isfinite(val)):
            raise ValueError(f"{name} must be finite and >= 0, got {val}")
    if not isinstance(box, Box):
        box = Box(*box)
    geometry = geometry or ObstacleGeometry()
    region = box.padded(geometry.a) if pad else box
    return ObstacleField(
        hard_points=poisson_points(nu, region, seed, "hard"),
        soft_points=poisson_points(mu, region, seed, "soft"),
        box=box,
        nu=float(nu),
        mu=float(mu),
        geometry=geometry,
        seed=seed if isinstance(seed, int) else None,
        padded=pad,
    )


def in_hard_set(field: ObstacleField, x) -> bool:
    """Whether x lies in the union of closed hard balls."""
    return bool(field.hard_mask(np.asarray(x, dtype=float))[0])


def soft_potential(field: ObstacleField, x) -> float:
    """``V(x) = soft_height * #{soft traps within soft_radius of x}``."""
    return float(field.potential(np.asarray(x, dtype=float))[0])


def scaled_parameters(t: float, d: int) -> tuple[float, float, float]:
    """``(eps, tau, eps^-d)`` with ``eps = t^{-1/(d+2)}`` and ``tau = t eps^2``."""
    if not t > 0:
        raise ValueError("t must be positive")
    eps = t ** (-1.0 / (d + 2))
    return eps, t * eps * eps, eps ** (-d)
