"""Acceptance criteria 1-13, each at its stated tolerance and time budget.

Every test prints one ``criterion N: PASS|FAIL`` line; the lines are repeated
in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from sausage_lab.brownian import exit_decay_rate, simulate_path
from sausage_lab.coarse_grain import MoeParams, volume_control_diagnostic
from sausage_lab.constants import (
    derivative_identity_check,
    lambda_ball,
    optimal_radius,
    rate_function,
    unit_ball_volume,
    variational_constant,
)
from sausage_lab.estimators import (
    conditioned_sausage_stats,
    estimate_survival_clearing,
    estimate_survival_naive,
    exponential_tightness_scan,
    ldp_curve,
)
from sausage_lab.sausage import sausage_volume_grid, sausage_volume_mc
from sausage_lab.spectral import (
    GridDomain,
    capacity,
    eigen_dirichlet,
    eigen_shift_vs_capacity,
    faber_krahn_check,
    variational_minimize,
)

DISK_LAMBDA = 2.89159


class Clock:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_criterion_01_constants(acceptance):
    worst_c = worst_r = worst_id = 0.0
    with Clock() as clock:
        for d in (2, 3):
            for nu in (0.5, 1.0, 2.0):
                c_num, r_num = variational_minimize(d, nu)
                worst_c = max(worst_c, abs(c_num / variational_constant(d, nu) - 1))
                worst_r = max(worst_r, abs(r_num / optimal_radius(d, nu) - 1))
                worst_id = max(worst_id, derivative_identity_check(d, nu, 1e-4))
    ok = worst_c <= 1e-8 and worst_r <= 1e-8 and worst_id <= 1e-6 and clock.seconds < 1
    assert acceptance(
        1, ok, f"max rel err c {worst_c:.1e}, R0 {worst_r:.1e}; identity {worst_id:.1e}; {clock.seconds:.2f}s"
    )


def test_criterion_02_rate_function(acceptance):
    worst_zero = 0.0
    positive = convex = True
    with Clock() as clock:
        for d in (2, 3):
            for nu in (0.5, 1.0, 2.0):
                xstar = unit_ball_volume(d) * optimal_radius(d, nu) ** d
                worst_zero = max(worst_zero, abs(float(rate_function(xstar, d, nu))))
                x = np.linspace(0.2 * xstar, 5 * xstar, 100)
                vals = rate_function(x, d, nu)
                away = np.abs(x - xstar) > 1e-9 * xstar
                positive &= bool(np.all(vals[away] > 0))
                convex &= bool(np.all(vals[:-2] + vals[2:] - 2 * vals[1:-1] >= -1e-12))
    ok = worst_zero <= 1e-10 and positive and convex and clock.seconds < 1
    assert acceptance(
        2, ok, f"|I(x*)| max {worst_zero:.1e}; positive {positive}; convex {convex}; {clock.seconds:.2f}s"
    )


def test_criterion_03_spectral_solver(acceptance):
    h = 1 / 256
    with Clock() as c_sq:
        sq = eigen_dirichlet(GridDomain.cube(1.0, 2, h)).lambda1
    with Clock() as c_disk:
        disk = eigen_dirichlet(GridDomain.ball(1.0, 2, h)).lambda1
    e_sq = sq / math.pi**2 - 1
    e_disk = disk / DISK_LAMBDA - 1
    ok = abs(e_sq) <= 0.005 and abs(e_disk) <= 0.01 and max(c_sq.seconds, c_disk.seconds) < 60
    assert acceptance(
        3,
        ok,
        f"square {sq:.5f} ({e_sq:+.3%}), disk {disk:.5f} ({e_disk:+.3%}); "
        f"{c_sq.seconds:.1f}s / {c_disk.seconds:.1f}s",
    )


def test_criterion_04_faber_krahn(acceptance):
    with Clock() as clock:
        lam_sq, lam_ball, ratio = faber_krahn_check(GridDomain.cube(math.sqrt(math.pi), 2, 1 / 256))
    ok = lam_sq >= lam_ball and abs(ratio - 1.086) <= 0.02 and clock.seconds < 60
    assert acceptance(
        4, ok, f"lambda(square) {lam_sq:.5f} >= lambda(disk) {lam_ball:.5f}, ratio {ratio:.5f}; {clock.seconds:.1f}s"
    )


def test_criterion_05_capacity(acceptance):
    radii = (0.5, 1.0, 2.0)
    with Clock() as clock:
        res = [
            capacity([[0.0, 0.0, 0.0]], [r], 3, "hitting_mc", n_walkers=100_000, seed=i, return_stderr=True)
            for i, r in enumerate(radii)
        ]
    errs = [cap / (2 * math.pi * r) - 1 for (cap, _), r in zip(res, radii)]
    per_r = np.array([cap / r for (cap, _), r in zip(res, radii)])
    per_r_se = np.array([se / r for (_, se), r in zip(res, radii)])
    # linearity: cap / r agrees across radii within combined MC error
    spread = max(abs(a - b) / math.hypot(sa, sb) for a, sa in zip(per_r, per_r_se) for b, sb in zip(per_r, per_r_se) if a != b)
    ok = max(abs(e) for e in errs) <= 0.05 and spread <= 3 and clock.seconds < 60
    assert acceptance(
        5, ok, "rel err " + ", ".join(f"{e:+.2%}" for e in errs) + f"; cap/r spread {spread:.2f} sigma; {clock.seconds:.1f}s"
    )


def test_criterion_06_eigen_shift(acceptance):
    eps_list = (1 / 16, 1 / 32, 1 / 64)
    with Clock() as clock:
        vals = [shift / scaled for shift, scaled in (eigen_shift_vs_capacity(1.0, e, 2) for e in eps_list)]
    drift = max(vals) / min(vals) - 1
    ok = drift <= 0.25 and clock.seconds < 300
    assert acceptance(
        6, ok, "shift*log(1/eps) " + ", ".join(f"{v:.4f}" for v in vals) + f"; drift {drift:.1%}; {clock.seconds:.0f}s"
    )


def test_criterion_07_exit_decay(acceptance):
    with Clock() as clock:
        fit = exit_decay_rate(2, window=(2.0, 6.0), dt=1e-3, n_particles=100_000, seed=0, bridge=True)
    ok = abs(fit.relative_error) <= 0.03 and clock.seconds < 300
    assert acceptance(
        7, ok, f"rate {fit.rate:.5f} vs {lambda_ball(2):.5f} ({fit.relative_error:+.2%}); {clock.seconds:.0f}s"
    )


def test_criterion_08_sausage_geometry(acceptance):
    rho = 0.5
    h = rho / 16
    with Clock() as clock:
        disk = sausage_volume_grid(np.zeros((1, 2)), rho, h).volume / (math.pi * rho**2) - 1
        stadium = sausage_volume_grid(np.array([[0.0, 0.0], [2.0, 0.0]]), rho, h).volume / (
            2 * rho * 2 + math.pi * rho**2
        ) - 1
        capsule = sausage_volume_grid(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), rho, h).volume / (
            math.pi * rho**2 * 2 + 4 / 3 * math.pi * rho**3
        ) - 1
        worst = 0.0
        for i in range(20):
            path = simulate_path(1.0, 1e-3, 2, seed=1000 + i)
            g = sausage_volume_grid(path, rho, h).volume
            m = sausage_volume_mc(path, rho, 100_000, seed=i)
            worst = max(worst, abs(g - m.volume) / m.stderr)
    shapes = max(abs(disk), abs(stadium), abs(capsule))
    ok = shapes <= 0.02 and worst <= 3 and clock.seconds < 60
    assert acceptance(
        8,
        ok,
        f"disk {disk:+.2%}, stadium {stadium:+.2%}, capsule {capsule:+.2%}; "
        f"grid vs MC max {worst:.2f} stderr over 20 paths; {clock.seconds:.1f}s",
    )


def test_criterion_09_survival(acceptance):
    with Clock() as clock:
        naive = estimate_survival_naive(0.0, 0.2, 2.0, 100, 100, seed=0)
        r = optimal_radius(2, 0.2) * 2.0 ** 0.25
        clear = estimate_survival_clearing(0.0, 0.2, 2.0, r, 100, n_fields=100, seed=0)
        gap = abs(naive.mean - clear.mean) / math.hypot(naive.stderr, clear.stderr)
        ratios = []
        for t in (1e2, 1e3, 1e4):
            est = estimate_survival_clearing(0.0, 1.0, t, optimal_radius(2, 1.0) * t**0.25, 100, seed=0)
            ratios.append(-est.log_mean / (variational_constant(2, 1.0) * math.sqrt(t)))
    in_band = all(1 <= q <= 1.5 for q in ratios)
    decreasing = all(b < a for a, b in zip(ratios, ratios[1:]))
    ok = gap <= 3 and in_band and decreasing and clock.seconds < 600
    assert acceptance(
        9,
        ok,
        f"naive {naive.mean:.4f}+-{naive.stderr:.4f} vs clearing {clear.mean:.4f}+-{clear.stderr:.4f} "
        f"({gap:.2f} sigma); log ratios " + ", ".join(f"{q:.3f}" for q in ratios) + f"; {clock.seconds:.0f}s",
    )


def test_criterion_10_lln(acceptance):
    runs = {1e3: 100, 1e4: 100, 1e5: 40}
    with Clock() as clock:
        stats = {t: conditioned_sausage_stats(0.0, 1.0, t, n_samples=n, seed=0) for t, n in runs.items()}
    limit = unit_ball_volume(2) * optimal_radius(2, 1.0) ** 2
    means = {t: s.weighted_mean() / limit for t, s in stats.items()}
    increasing = all(means[b] > means[a] for a, b in zip(runs, list(runs)[1:]))
    s4 = stats[1e4]
    exceed = s4.exceedance_probability(limit + 0.1)
    ok = increasing and 0.6 <= means[1e4] <= 1.0 and exceed < 0.01 and clock.seconds < 1800
    assert acceptance(
        10,
        ok,
        "mean/(w R0^2) " + ", ".join(f"{means[t]:.4f}" for t in runs)
        + f"; P(>w R0^2+0.1) at t=1e4 {exceed:.3f}; {clock.seconds:.0f}s",
    )


def test_criterion_11_ldp(acceptance):
    nu = 1.0
    r0 = optimal_radius(2, nu)
    c = variational_constant(2, nu)
    with Clock() as clock:
        pts = ldp_curve(nu, 1e12, [0.8 * r0, r0, 1.3 * r0], 2, n_particles=100_000, seed=0)
    off = [abs(p.empirical_rate / p.I_of_x - 1) for p in (pts[0], pts[2])]
    centre = abs(pts[1].empirical_rate) / c
    ok = max(off) <= 0.10 and centre <= 0.05 and clock.seconds < 600
    assert acceptance(
        11,
        ok,
        f"r/R0=0.8: {pts[0].empirical_rate:.4f} vs I {pts[0].I_of_x:.4f}; "
        f"r/R0=1: {pts[1].empirical_rate:+.4f} ({centre:.2%} of c); "
        f"r/R0=1.3: {pts[2].empirical_rate:.4f} vs I {pts[2].I_of_x:.4f}; {clock.seconds:.0f}s",
    )


def test_criterion_12_tightness(acceptance):
    grid = [1e2, 1e3, 1e4, 1e5]
    with Clock() as clock:
        pts = exponential_tightness_scan(0.0, 1.0, grid, 1.0, n_samples=50, seed=0)
    moments = np.array([p.moment for p in pts])
    bounded = all(p.moment <= p.bound for p in pts)
    spread = (moments.max() - moments.min()) / moments.mean()
    ok = bounded and spread <= 0.05 and clock.seconds < 600
    assert acceptance(
        12,
        ok,
        "moments " + ", ".join(f"{m:.4f}" for m in moments)
        + f" <= bound {pts[0].bound:.4f}; relative range {spread:.2%}; {clock.seconds:.0f}s",
    )


def test_criterion_13_coarse_graining(acceptance):
    params = MoeParams(0.1, L=2, d=2)
    kappa = (1 - params.beta) * params.d / 2
    with Clock() as clock:
        rows = volume_control_diagnostic(1.0, [0.1, 0.05], kappa, 100, params, seed=0)
    invariants = all(r["disjoint"] and r["covered"] for r in rows)
    nonincreasing = rows[1]["mean_statistic"] <= rows[0]["mean_statistic"]
    ok = invariants and nonincreasing and clock.seconds < 600
    assert acceptance(
        13,
        ok,
        f"disjoint+covered on 100 fields {invariants}; mean statistic "
        f"{rows[0]['mean_statistic']:.4f} -> {rows[1]['mean_statistic']:.4f} (kappa {kappa:.2f}); {clock.seconds:.0f}s",
    )
