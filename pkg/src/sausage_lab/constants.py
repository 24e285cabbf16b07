"""Closed-form constants: ball volumes, Bessel zeros, ball eigenvalues and the
variational problem ``inf_U {nu |U| + lambda(U)}`` attained by balls."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

MAX_ORDER = 10.0
MAX_DIM = 10
SERIES_MAX_ARG = 16.0
ZERO_TOL = 1e-13


def unit_ball_volume(d: int) -> float:
    """Volume of the unit ball in R^d, ``pi^{d/2} / Gamma(d/2 + 1)``.

    Gamma at the integer or half-integer point is built by the recurrence
    ``Gamma(x + 1) = x Gamma(x)`` from Gamma(1) = 1 or Gamma(1/2) = sqrt(pi).
    ``d = 0`` returns 1 (the volume of a point, used for cross sections).
    """
    if int(d) != d or d < 0:
        raise ValueError(f"dimension must be a nonnegative integer, got {d}")
    d = int(d)
    if d % 2 == 0:
        gamma, x = 1.0, 1.0
    else:
        gamma, x = math.sqrt(math.pi), 0.5
    target = d / 2 + 1
    while x < target - 1e-12:
        gamma *= x
        x += 1.0
    return math.pi ** (d / 2) / gamma


def bessel_j(order: float, x, n_terms: int | None = None):
    """Bessel function of the first kind by its power series.

    Accurate to roughly 1e-12 relative for ``|x| <= 16`` and ``order >= -1/2``;
    larger arguments lose digits to cancellation and are rejected.
    """
    arr = np.asarray(x, dtype=float)
    if np.any(np.abs(arr) > SERIES_MAX_ARG):
        raise ValueError(f"power series limited to |x| <= {SERIES_MAX_ARG}")
    if order < -0.5:
        raise ValueError("order must be >= -1/2")
    if n_terms is None:
        n_terms = 30 + 2 * int(np.ceil(np.max(np.abs(arr), initial=0.0)))
    half = 0.5 * arr
    q = half * half
    with np.errstate(divide="ignore"):
        term = np.power(half, order) / math.gamma(order + 1.0)
    total = term.copy()
    for m in range(1, n_terms + 1):
        term = -term * q / (m * (m + order))
        total = total + term
    if np.ndim(x) == 0:
        return float(total)
    return total


def _bisect_sign_change(f, lo: float, hi: float, tol: float = ZERO_TOL) -> float:
    flo = f(lo)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fmid = f(mid)
        if fmid == 0.0:
            return mid
        if (fmid > 0) == (flo > 0):
            lo, flo = mid, fmid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@lru_cache(maxsize=None)
def bessel_zeros(order: float, count: int) -> tuple[float, ...]:
    """First ``count`` positive zeros of J_order, bracketed by a scan and
    refined by bisection. Only zeros below the series range are reachable."""
    if order < -0.5:
        raise ValueError("order must be >= -1/2")
    f = lambda x: bessel_j(order, x)  # noqa: E731
    zeros: list[float] = []
    step = 0.05
    x = step
    fx = f(x)
    while len(zeros) < count:
        nxt = x + step
        if nxt > SERIES_MAX_ARG:
            raise ValueError(f"zero #{len(zeros) + 1} of J_{order} lies beyond the series range")
        fn = f(nxt)
        if (fn > 0) != (fx > 0):
            zeros.append(_bisect_sign_change(f, x, nxt))
        x, fx = nxt, fn
    return tuple(zeros)


def bessel_first_zero(order: float) -> float:
    """First positive zero of the Bessel function J_order, for order in [0, 10].

    >>> round(bessel_first_zero(0.5), 12) == round(math.pi, 12)
    True
    """
    if not (0.0 <= order <= MAX_ORDER) or not math.isfinite(order):
        raise ValueError(f"order must lie in [0, {MAX_ORDER}], got {order}")
    return bessel_zeros(float(order), 1)[0]


def lambda_ball(d: int) -> float:
    """Principal Dirichlet eigenvalue of -1/2 Laplacian on the unit ball of R^d."""
    if int(d) != d or d < 1 or d > MAX_DIM:
        raise ValueError(f"dimension must be an integer in [1, {MAX_DIM}], got {d}")
    j = bessel_zeros(d / 2 - 1, 1)[0]
    return 0.5 * j * j


def variational_constant(d: int, nu: float) -> float:
    """``c(d, nu) = (d+2)/2 (nu w_d)^{2/(d+2)} (2 lambda_d / d)^{d/(d+2)}``."""
    if nu < 0 or not math.isfinite(nu):
        raise ValueError(f"intensity must be finite and >= 0, got {nu}")
    if nu == 0:
        return 0.0
    w = unit_ball_volume(d)
    lam = lambda_ball(d)
    return (d + 2) / 2 * (nu * w) ** (2 / (d + 2)) * (2 * lam / d) ** (d / (d + 2))


def optimal_radius(d: int, nu: float) -> float:
    """Radius ``(2 lambda_d / (d nu w_d))^{1/(d+2)}`` of the minimizing ball."""
    if not nu > 0 or not math.isfinite(nu):
        raise ValueError(f"optimal radius needs nu > 0 (infimum not attained at nu = {nu})")
    return (2 * lambda_ball(d) / (d * nu * unit_ball_volume(d))) ** (1 / (d + 2))


def ball_cost(r, d: int, nu: float):
    """``nu w_d r^d + lambda_d / r^2``, the cost of a ball of radius r."""
    return nu * unit_ball_volume(d) * np.power(r, d) + lambda_ball(d) / np.square(r)


def rate_function(x, d: int, nu: float):
    """Large deviation rate ``nu x + lambda_d (w_d/x)^{2/d} - c(d, nu)`` of the
    scaled sausage volume."""
    xa = np.asarray(x, dtype=float)
    if np.any(xa <= 0):
        raise ValueError("rate function is defined for x > 0 only")
    if not nu > 0:
        raise ValueError("rate function needs nu > 0")
    w = unit_ball_volume(d)
    val = nu * xa + lambda_ball(d) * np.power(w / xa, 2 / d) - variational_constant(d, nu)
    return float(val) if np.ndim(x) == 0 else val


def derivative_identity_check(d: int, nu: float, h: float | None = None) -> float:
    """Gap between the central difference of c(d, .) at nu and w_d R0(d, nu)^d.

    The gap is O(h^2); the default step is ``1e-4 * nu``.
    """
    if h is None:
        h = 1e-4 * nu
    if not (nu > h > 0):
        raise ValueError("need nu > h > 0")
    fd = (variational_constant(d, nu + h) - variational_constant(d, nu - h)) / (2 * h)
    return abs(fd - unit_ball_volume(d) * optimal_radius(d, nu) ** d)


def ball_exit_coefficients(d: int, n_modes: int) -> list[tuple[float, float]]:
    """Radial modes ``(A_k, lambda_k)`` of ``P_0(T_B(0,1) > s) = sum_k A_k exp(-lambda_k s)``.

    ``A_k = 2^{1-v} j_k^{v-1} / (Gamma(v+1) J_{v+1}(j_k))`` with ``v = d/2 - 1``.
    """
    v = d / 2 - 1
    out = []
    for j in bessel_zeros(v, n_modes):
        amp = 2 ** (1 - v) * j ** (v - 1) / (math.gamma(v + 1) * bessel_j(v + 1, j))
        out.append((amp, 0.5 * j * j))
    return out


def ball_exit_probability(d: int, s: float, radius: float = 1.0, n_modes: int = 4) -> float:
    """Eigenfunction expansion of the probability that Brownian motion from the
    center stays in B(0, radius) up to time s. Truncation error is below
    ``exp(-lambda_{n+1} s / radius^2)``."""
    u = s / radius**2
    return float(sum(a * math.exp(-lam * u) for a, lam in ball_exit_coefficients(d, n_modes)))


def radial_log_derivative(d: int, radius: float, r):
    """Radial derivative of log phi for the principal Dirichlet eigenfunction
    ``phi(x) = |x|^{-v} J_v(k|x|)`` of B(0, radius), ``k = j_{v,1} / radius``.

    Equals ``-k J_{v+1}(k r) / J_v(k r)``; negative on (0, radius) and -inf at the rim.
    """
    v = d / 2 - 1
    k = bessel_zeros(v, 1)[0] / radius
    r = np.asarray(r, dtype=float)
    kr = np.clip(k * r, 0.0, k * radius)
    num = bessel_j(v + 1, kr)
    den = bessel_j(v, kr)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, -k * num / np.where(den > 0, den, 1.0), -np.inf)
    if d == 1:
        out = np.where(kr == 0, 0.0, out)
    return out


def ball_eigenfunction(d: int, radius: float, r):
    """Unnormalized radial profile ``r^{-v} J_v(k r)`` (value at r = 0 by continuity)."""
    v = d / 2 - 1
    k = bessel_zeros(v, 1)[0] / radius
    r = np.asarray(r, dtype=float)
    kr = k * np.clip(r, 0.0, radius)
    # r^{-v} J_v(kr) = (k/2)^v sum_m (-1)^m (kr/2)^{2m} / (m! Gamma(m+v+1)), regular at 0
    half2 = (0.5 * kr) ** 2
    term = np.full_like(kr, (0.5 * k) ** v / math.gamma(v + 1))
    total = term.copy()
    for m in range(1, 30 + 2 * int(math.ceil(k * radius))):
        term = -term * half2 / (m * (m + v))
        total = total + term
    return np.where(r <= radius, total, 0.0)


@dataclass(frozen=True)
class Constants:
    d: int
    nu: float
    omega_d: float
    lambda_d: float
    c: float
    r0: float | None

    @classmethod
    def compute(cls, d: int, nu: float) -> "Constants":
        r0 = optimal_radius(d, nu) if nu > 0 else None
        return cls(d, float(nu), unit_ball_volume(d), lambda_ball(d), variational_constant(d, nu), r0)

    @property
    def x_star(self) -> float | None:
        """LLN limit of the scaled sausage volume, ``w_d R0^d``."""
        return None if self.r0 is None else self.omega_d * self.r0**self.d

    def as_dict(self) -> dict:
        out = asdict(self)
        out["x_star"] = self.x_star
        return out


def format_constants(const: Constants, as_json: bool = False) -> str:
    data = const.as_dict()
    keys = ["omega_d", "lambda_d", "c", "r0", "x_star"]
    if as_json:
        return json.dumps({k: data[k] for k in keys})
    return "\n".join(f"{k:<9} {data[k]!r:>22}" if data[k] is None else f"{k:<9} {data[k]:>22.15g}" for k in keys)
