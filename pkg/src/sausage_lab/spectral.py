"""Dirichlet eigenvalues of -1/2 Laplacian (plus potential) on masked grids,
capacities of unions of balls, and related numerical checks.

Grids are node based: node ``i`` of a GridDomain sits at ``lower + h i`` and
the mask marks the interior nodes; every unmasked node carries the Dirichlet
value 0.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .constants import lambda_ball, unit_ball_volume
from .rng import derive_rng

RESIDUAL_TOL = 1e-8
_GOLDEN = (math.sqrt(5) - 1) / 2


class ConvergenceError(RuntimeError):
    """Raised when an eigen-solve misses its residual target."""


@dataclass(frozen=True)
class GridDomain:
    h: float
    mask: np.ndarray
    lower: tuple
    nominal_volume: float | None = None

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim not in (2, 3):
            raise ValueError("only d = 2 and d = 3 grids are supported")
        if not mask.any():
            raise ValueError("mask has no interior node")
        edge = np.zeros_like(mask)
        for ax in range(mask.ndim):
            sl = [slice(None)] * mask.ndim
            sl[ax] = 0
            edge[tuple(sl)] = True
            sl[ax] = -1
            edge[tuple(sl)] = True
        if (mask & edge).any():
            raise ValueError("the outer layer of the grid must lie outside the domain")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))

    @property
    def d(self) -> int:
        return self.mask.ndim

    @property
    def volume(self) -> float:
        """Nominal volume if known, else the node count times h^d."""
        if self.nominal_volume is not None:
            return self.nominal_volume
        return float(self.mask.sum()) * self.h**self.d

    def coordinates(self) -> list[np.ndarray]:
        return [self.lower[i] + self.h * np.arange(n) for i, n in enumerate(self.mask.shape)]

    def node_points(self) -> np.ndarray:
        grids = np.meshgrid(*self.coordinates(), indexing="ij")
        return np.stack(grids, axis=-1)

    @classmethod
    def from_predicate(cls, inside, lower, upper, h: float, nominal_volume=None) -> "GridDomain":
        """Nodes of the grid over [lower, upper] (plus one guard layer) where
        ``inside(points)`` holds, points having shape (..., d)."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = np.round((upper - lower) / h).astype(int)
        lo = lower - h
        shape = tuple(int(k) + 3 for k in n)
        grids = np.meshgrid(*[lo[i] + h * np.arange(shape[i]) for i in range(len(shape))], indexing="ij")
        pts = np.stack(grids, axis=-1)
        mask = np.asarray(inside(pts), dtype=bool)
        for ax in range(mask.ndim):
            sl = [slice(None)] * mask.ndim
            sl[ax] = 0
            mask[tuple(sl)] = False
            sl[ax] = -1
            mask[tuple(sl)] = False
        return cls(h=h, mask=mask, lower=tuple(lo), nominal_volume=nominal_volume)

    @classmethod
    def cube(cls, side: float, d: int, h: float) -> "GridDomain":
        """Open cube (0, side)^d; h is adjusted so the sides fall on nodes."""
        n = max(2, int(round(side / h)))
        h = side / n

        def inside(p):
            return np.all((p > h / 2) & (p < side - h / 2), axis=-1)

        return cls.from_predicate(inside, (0.0,) * d, (side,) * d, h, nominal_volume=side**d)

    @classmethod
    def ball(cls, radius: float, d: int, h: float, center=None) -> "GridDomain":
        center = np.zeros(d) if center is None else np.asarray(center, dtype=float)

        def inside(p):
            return np.sum((p - center) ** 2, axis=-1) < radius * radius

        return cls.from_predicate(
            inside, center - radius, center + radius, h, nominal_volume=unit_ball_volume(d) * radius**d
        )

    def without_ball(self, center, radius: float) -> "GridDomain":
        """Remove the closed ball: nodes whose position lies in it are excluded."""
        pts = self.node_points()
        keep = np.sum((pts - np.asarray(center, dtype=float)) ** 2, axis=-1) > radius * radius
        vol = None
        if self.nominal_volume is not None:
            vol = self.nominal_volume - unit_ball_volume(self.d) * radius**self.d
        return GridDomain(h=self.h, mask=self.mask & keep, lower=self.lower, nominal_volume=vol)

    def to_json(self) -> str:
        flat = self.mask.ravel().astype(np.int8)
        change = np.flatnonzero(np.diff(flat)) + 1
        starts = np.concatenate([[0], change])
        lengths = np.diff(np.concatenate([starts, [len(flat)]]))
        return json.dumps(
            {
                "h": self.h,
                "lower": list(self.lower),
                "shape": list(self.mask.shape),
                "first": int(flat[0]),
                "runs": lengths.tolist(),
                "nominal_volume": self.nominal_volume,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "GridDomain":
        data = json.loads(text)
        runs = np.asarray(data["runs"], dtype=np.int64)
        values = (np.arange(len(runs)) + data["first"]) % 2
        mask = np.repeat(values, runs).astype(bool).reshape(data["shape"])
        return cls(h=data["h"], mask=mask, lower=tuple(data["lower"]), nominal_volume=data.get("nominal_volume"))


@dataclass(frozen=True)
class SpectralResult:
    lambda1: float
    lambda2: float
    phi1: np.ndarray
    iterations: int
    residual: float

    def to_csv(self, domain: GridDomain) -> str:
        """Interior nodes as rows ``x1..xd, phi``."""
        pts = domain.node_points()[domain.mask]
        buf = io.StringIO()
        header = ",".join([f"x{i + 1}" for i in range(domain.d)] + ["phi"])
        np.savetxt(buf, np.column_stack([pts, self.phi1[domain.mask]]), delimiter=",", header=header, comments="")
        return buf.getvalue()


def dirichlet_operator(domain: GridDomain, potential=None) -> sp.csr_matrix:
    """Sparse ``-1/2 Delta_h + V`` on the masked nodes (5/7-point stencil)."""
    mask = domain.mask
    d, h = domain.d, domain.h
    n = int(mask.sum())
    idx = np.full(mask.shape, -1, dtype=np.int64)
    idx[mask] = np.arange(n)
    coords = np.argwhere(mask)
    diag = np.full(n, d / h**2)
    if potential is not None:
        v = np.broadcast_to(np.asarray(potential, dtype=float), mask.shape)[mask]
        if not np.all(np.isfinite(v)):
            raise ValueError("potential must be finite")
        diag = diag + v
    rows, cols = [np.arange(n)], [np.arange(n)]
    vals = [diag]
    for ax in range(d):
        # the guard layer keeps neighbour indices inside the array
        nb = coords.copy()
        nb[:, ax] += 1
        j = idx[tuple(nb.T)]
        ok = j >= 0
        i = np.flatnonzero(ok)
        rows += [i, j[ok]]
        cols += [j[ok], i]
        vals += [np.full(2 * len(i), -0.5 / h**2)]
    vals = [np.concatenate(vals[1:])] if len(vals) > 1 else []
    return sp.csr_matrix(
        (np.concatenate([diag] + vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def eigen_dirichlet(domain: GridDomain, potential=None, tol: float = RESIDUAL_TOL, max_iter: int = 5000) -> SpectralResult:
    """Two smallest eigenpairs by shift-invert Lanczos about 0 with a sparse
    LU factorization; a few inverse-iteration sweeps polish phi1 if needed."""
    A = dirichlet_operator(domain, potential).tocsc()
    n = A.shape[0]
    h, d = domain.h, domain.d
    count = [0]
    if n <= 2:
        w, v = np.linalg.eigh(A.toarray())
        vals, vecs = np.concatenate([w, [np.inf] * (2 - n)]), v
    else:
        lu = spla.splu(A)

        def solve(x):
            count[0] += 1
            return lu.solve(np.asarray(x, dtype=float).ravel())

        op = spla.LinearOperator((n, n), matvec=solve, dtype=float)
        try:
            vals, vecs = spla.eigsh(A, k=2, sigma=0.0, which="LM", OPinv=op, maxiter=max_iter)
        except spla.ArpackNoConvergence as err:
            raise ConvergenceError(f"eigensolver did not converge after {count[0]} solves: {err}") from err
    order = np.argsort(vals)
    lam1, lam2 = float(vals[order[0]]), float(vals[order[1]]) if len(order) > 1 else math.inf
    phi = vecs[:, order[0]]
    phi = phi / math.sqrt(float(phi @ phi) * h**d)

    def residual(p, lam):
        r = A @ p - lam * p
        return math.sqrt(float(r @ r) * h**d)

    res = residual(phi, lam1)
    sweeps = 0
    while res > tol and n > 2 and sweeps < 20:
        phi = solve(phi)
        phi /= math.sqrt(float(phi @ phi) * h**d)
        lam1 = float(phi @ (A @ phi)) * h**d
        res = residual(phi, lam1)
        sweeps += 1
    if res > tol:
        raise ConvergenceError(f"residual {res:.3e} above {tol:.1e} after {count[0]} solves (lambda1 = {lam1:.8g})")
    # a principal eigenvector has one sign on each component of the mask
    phi = np.abs(phi)
    grid = np.zeros(domain.mask.shape)
    grid[domain.mask] = phi
    return SpectralResult(lam1, max(lam2, lam1), grid, count[0], res)


def faber_krahn_check(domain: GridDomain) -> tuple[float, float, float]:
    """``(lambda(domain), lambda(ball of equal volume), ratio)``."""
    lam = eigen_dirichlet(domain).lambda1
    r = (domain.volume / unit_ball_volume(domain.d)) ** (1.0 / domain.d)
    lam_ball = lambda_ball(domain.d) / r**2
    return lam, lam_ball, lam / lam_ball


def _as_balls(centers, radii) -> tuple[np.ndarray, np.ndarray]:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (len(centers),)).copy()
    if len(centers) == 0:
        raise ValueError("compact set is empty")
    if not np.all(radii > 0):
        raise ValueError("radii must be positive")
    return centers, radii


def _graded_axis(lo: float, hi: float, h: float, far: float, growth: float = 1.25) -> np.ndarray:
    """Uniform nodes of spacing about h on [lo, hi], then geometrically
    growing spacing out to distance ``far`` on both sides."""
    n = max(1, int(math.ceil((hi - lo) / h)))
    core = lo + (hi - lo) * np.arange(n + 1) / n
    step = (hi - lo) / n
    left, right = [lo], [hi]
    s = step
    while left[-1] > lo - far:
        s *= growth
        left.append(left[-1] - s)
    s = step
    while right[-1] < hi + far:
        s *= growth
        right.append(right[-1] + s)
    return np.concatenate([left[::-1][:-1], core, right[1:]])


def _grid_capacity(centers, radii, h: float, far: float, mass: float) -> float:
    """Finite-volume equilibrium problem ``(mass - 1/2 Delta) u = 0`` off K,
    ``u = 1`` on K, ``u = 0`` on the far boundary; returns the total charge
    ``sum_{K} (M u)``."""
    d = centers.shape[1]
    lo = (centers - radii[:, None]).min(axis=0) - 4 * h
    hi = (centers + radii[:, None]).max(axis=0) + 4 * h
    axes = [_graded_axis(lo[i], hi[i], h, far) for i in range(d)]
    shape = tuple(len(a) for a in axes)
    # control-volume widths per axis
    widths = []
    for a in axes:
        w = np.zeros(len(a))
        gaps = np.diff(a)
        w[1:] += gaps / 2
        w[:-1] += gaps / 2
        widths.append(w)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    in_k = np.zeros(shape, dtype=bool)
    for c, r in zip(centers, radii):
        in_k |= np.sum((pts - c) ** 2, axis=-1) <= r * r
    del pts
    N = int(np.prod(shape))
    idx = np.arange(N).reshape(shape)

    def outer(parts):
        out = parts[0]
        for p in parts[1:]:
            out = np.multiply.outer(out, p)
        return out

    diag = mass * outer(widths).ravel()
    rows, cols, vals = [], [], []
    for ax in range(d):
        gaps = np.diff(axes[ax])
        face = [widths[k] if k != ax else 0.5 / gaps for k in range(d)]
        w = outer(face).ravel()
        a = np.take(idx, np.arange(shape[ax] - 1), axis=ax).ravel()
        b = np.take(idx, np.arange(1, shape[ax]), axis=ax).ravel()
        rows += [a, b]
        cols += [b, a]
        vals += [-w, -w]
        np.add.at(diag, a, w)
        np.add.at(diag, b, w)
    M = sp.csr_matrix(
        (np.concatenate(vals + [diag]), (np.concatenate(rows + [np.arange(N)]), np.concatenate(cols + [np.arange(N)]))),
        shape=(N, N),
    )
    edge = np.zeros(shape, dtype=bool)
    for ax in range(d):
        sl = [slice(None)] * d
        sl[ax] = 0
        edge[tuple(sl)] = True
        sl[ax] = -1
        edge[tuple(sl)] = True
    k_flat = in_k.ravel()
    free = ~(k_flat | edge.ravel())
    u = np.zeros(N)
    u[k_flat] = 1.0
    rhs = -(M[free][:, k_flat] @ np.ones(int(k_flat.sum())))
    A = M[free][:, free]
    if d == 2:
        u[free] = spla.spsolve(A.tocsc(), rhs)
    else:
        # a 3-d direct factorization fills in badly; Jacobi-preconditioned CG
        pre = sp.diags(1.0 / A.diagonal())
        sol, info = spla.cg(A, rhs, rtol=1e-10, maxiter=20_000, M=pre)
        if info != 0:
            raise ConvergenceError(f"capacity solve did not converge (info={info})")
        u[free] = sol
    return float((M @ u)[k_flat].sum())


def _wos_hits(centers, radii, n_walkers: int, seed, shell: float) -> tuple[np.ndarray, float]:
    """Walk-on-spheres in d = 3 from uniform points on the sphere of radius
    2 R_enc about the set's center; returns the hit indicators and that radius."""
    rng = derive_rng(seed, "walk-on-spheres")
    c0 = 0.5 * ((centers - radii[:, None]).min(axis=0) + (centers + radii[:, None]).max(axis=0))
    r_enc = float(np.max(np.linalg.norm(centers - c0, axis=1) + radii))
    r_far = 2.0 * r_enc

    def sphere(n):
        v = rng.standard_normal((n, 3))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    x = c0 + r_far * sphere(n_walkers)
    hit = np.zeros(n_walkers, dtype=bool)
    live = np.arange(n_walkers)
    while len(live):
        y = x[live] - c0
        rho = np.linalg.norm(y, axis=1)
        outside = rho > r_enc * (1 + 1e-12)
        if outside.any():
            o = live[outside]
            ro = rho[outside]
            back = rng.random(len(o)) < r_enc / ro
            # exact harmonic measure on the enclosing sphere seen from outside
            ob, rb = o[back], ro[back]
            s = 1 / (rb + r_enc) + rng.random(len(ob)) * (1 / (rb - r_enc) - 1 / (rb + r_enc))
            cos_t = np.clip((rb * rb + r_enc * r_enc - s ** -2) / (2 * rb * r_enc), -1.0, 1.0)
            axis = (x[ob] - c0) / rb[:, None]
            ref = np.where(np.abs(axis[:, :1]) < 0.9, np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))
            e1 = np.cross(axis, ref)
            e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
            e2 = np.cross(axis, e1)
            phi = 2 * np.pi * rng.random(len(ob))
            sin_t = np.sqrt(1 - cos_t**2)
            dirn = cos_t[:, None] * axis + sin_t[:, None] * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
            x[ob] = c0 + r_enc * dirn
            live = np.setdiff1d(live, o[~back], assume_unique=True)
            continue
        dist = np.min(np.linalg.norm(x[live][:, None, :] - centers[None], axis=2) - radii[None], axis=1)
        done = dist < shell
        hit[live[done]] = True
        live = live[~done]
        step = dist[~done]
        x[live] += step[:, None] * sphere(len(live))
    return hit, r_far


def capacity(
    centers,
    radii,
    d: int | None = None,
    method: str = "grid_solve",
    h: float | None = None,
    far: float | None = None,
    n_walkers: int = 100_000,
    seed=0,
    return_stderr: bool = False,
):
    """Capacity of a union of closed balls.

    d = 3: Newtonian capacity for -1/2 Delta (a ball of radius r has 2 pi r),
    by walk-on-spheres hitting probabilities (``hitting_mc``) or a graded-grid
    finite-volume solve (``grid_solve``). d = 2: capacity for 1 - 1/2 Delta,
    ``grid_solve`` only.
    """
    centers, radii = _as_balls(centers, radii)
    d = centers.shape[1] if d is None else d
    if centers.shape[1] != d or d not in (2, 3):
        raise ValueError("capacity supports d = 2 and d = 3 with matching centers")
    if method == "hitting_mc":
        if d != 3:
            raise ValueError("hitting_mc needs a transient walk; use grid_solve for d = 2")
        hits, r_far = _wos_hits(centers, radii, n_walkers, seed, 1e-4 * float(radii.min()))
        p = float(hits.mean())
        cap = 2 * math.pi * r_far * p
        se = 2 * math.pi * r_far * math.sqrt(p * (1 - p) / n_walkers)
        return (cap, se) if return_stderr else cap
    if method != "grid_solve":
        raise ValueError(f"unknown capacity method {method!r}")
    if d == 2:
        h = float(radii.min()) / 16 if h is None else h
        cap = _grid_capacity(centers, radii, h, 10.0 if far is None else far, mass=1.0)
    else:
        extent = float(np.max(radii) + np.ptp(centers, axis=0).max())
        h = float(radii.min()) / 6 if h is None else h
        cap = _grid_capacity(centers, radii, h, 200.0 * extent if far is None else far, mass=0.0)
    return (cap, 0.0) if return_stderr else cap


def eigen_shift_vs_capacity(R: float, eps: float, d: int = 2, h: float | None = None) -> tuple[float, float]:
    """``(lambda(B(0,R) minus closed B(x0, eps)) - lambda(B(0,R)), cap_scaled)``
    with ``x0 = R/2 e1`` and ``cap_scaled = 1/log(1/eps)`` (d = 2) or
    ``eps^{d-2}``."""
    if not 0 < eps <= R / 10:
        raise ValueError("need 0 < eps <= R/10")
    h = (R / 256 if d == 2 else R / 40) if h is None else h
    if eps < 2 * h:
        raise ValueError(f"grid spacing {h:.3g} cannot resolve an obstacle of radius {eps:.3g}")
    base = GridDomain.ball(R, d, h)
    x0 = np.zeros(d)
    x0[0] = R / 2
    lam0 = eigen_dirichlet(base).lambda1
    lam = eigen_dirichlet(base.without_ball(x0, eps)).lambda1
    scaled = 1 / math.log(1 / eps) if d == 2 else eps ** (d - 2)
    return lam - lam0, scaled


def variational_minimize(d: int, nu: float, tol: float = 1e-14) -> tuple[float, float]:
    """Golden-section search of ``nu omega_d r^d + lambda_d / r^2`` over r.

    Comparisons use the factored difference
    ``f(a) - f(b) = (a - b)[nu omega sum_k a^{d-1-k} b^k - lambda (a + b)/(a^2 b^2)]``
    which stays accurate when a and b are close.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    w = nu * unit_ball_volume(d)
    lam = lambda_ball(d)

    def less(a, b):
        poly = math.fsum(a ** (d - 1 - k) * b**k for k in range(d))
        return (a - b) * (w * poly - lam * (a + b) / (a * a * b * b)) < 0

    scale = nu ** (-1.0 / (d + 2))
    lo, hi = 1e-3 * scale, 1e3 * scale
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    while hi - lo > tol * hi:
        if less(x1, x2):
            hi, x2 = x2, x1
            x1 = hi - _GOLDEN * (hi - lo)
        else:
            lo, x1 = x1, x2
            x2 = lo + _GOLDEN * (hi - lo)
    r = 0.5 * (lo + hi)
    return w * r**d + lam / r**2, r
