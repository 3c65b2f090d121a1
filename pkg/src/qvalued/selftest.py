"""Deterministic invariant checks behind ``qval selftest``.

Each check draws from its own generator seeded by (seed, index), so the
report does not depend on how checks are scheduled across threads.
Floating-point details are printed with 6 significant digits.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import aq_space as aq
from .blowup import excess, fit_tangent, rescale
from .cylindrical import (
    canonical_gauge,
    circle_distance_sq,
    cylinder,
    eval_cyl,
)
from .frequency import H_of, H_volume, N_of
from .minimizer import SolveParams, discrete_energy, minimize
from .qfield import (
    QField,
    ball,
    box_grid,
    detect_branch_points,
    dist_sq_ball,
    grad_energy_density,
    l2_sq_ball,
    sample_field,
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    details: tuple[tuple[str, float], ...]

    def line(self) -> str:
        vals = " ".join(f"{k}={v:.6g}" for k, v in self.details)
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {vals}".rstrip()


def _random_point(rng, q, m):
    return aq.make_point(rng.normal(size=(q, m)))


def _brute_metric_sq(a: np.ndarray, b: np.ndarray) -> float:
    import itertools

    return min(float(np.sum((a - b[list(p)]) ** 2)) for p in itertools.permutations(range(a.shape[0])))


def check_metric_axioms(rng) -> CheckResult:
    worst_tri, worst_sym, worst_oracle, worst_id = 0.0, 0.0, 0.0, 0.0
    for _ in range(500):
        q, m = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        a, b, c = (_random_point(rng, q, m) for _ in range(3))
        ab, ba = aq.metric(a, b), aq.metric(b, a)
        worst_sym = max(worst_sym, abs(ab - ba))
        worst_tri = min(worst_tri, aq.metric(a, c) + aq.metric(c, b) - ab)
        worst_oracle = max(worst_oracle, abs(ab**2 - _brute_metric_sq(a.values, b.values)))
        shuffled = aq.make_point(a.values[rng.permutation(q)])
        worst_id = max(worst_id, aq.metric(a, shuffled))
    ok = worst_sym == 0.0 and worst_tri >= -1e-9 and worst_oracle <= 1e-9 and worst_id <= 1e-12
    return CheckResult(
        "metric_axioms",
        ok,
        (("symmetry", worst_sym), ("triangle_slack", worst_tri), ("oracle_gap", worst_oracle), ("identity", worst_id)),
    )


def check_average_split(rng) -> CheckResult:
    worst = 0.0
    for _ in range(500):
        q, m = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        a, b = _random_point(rng, q, m), _random_point(rng, q, m)
        lhs = aq.metric(a, b) ** 2
        da = aq.average(a) - aq.average(b)
        rhs = q * float(da @ da) + aq.metric(aq.average_free(a), aq.average_free(b)) ** 2
        worst = max(worst, abs(lhs - rhs) / max(lhs, 1e-300))
    return CheckResult("average_split", worst <= 1e-10, (("rel_err", worst),))


def check_metric_symmetries(rng) -> CheckResult:
    worst = 0.0
    for _ in range(200):
        q, m = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        a, b = _random_point(rng, q, m), _random_point(rng, q, m)
        Q, _ = np.linalg.qr(rng.normal(size=(m, m)))
        lam = float(rng.normal())
        Qa, Qb = aq.apply_linear(a, Q), aq.apply_linear(b, Q)
        worst = max(
            worst,
            abs(aq.metric(Qa, Qb) - aq.metric(a, b)),
            abs(aq.norm(Qa) - aq.norm(a)),
            abs(aq.separation(Qa) - aq.separation(a)),
            abs(aq.metric(aq.scalar_mul(lam, a), aq.scalar_mul(lam, b)) - abs(lam) * aq.metric(a, b)),
            abs(aq.norm(aq.scalar_mul(lam, a)) - abs(lam) * aq.norm(a)),
        )
    return CheckResult("metric_symmetries", worst <= 1e-9, (("max_err", worst),))


def _random_cylinder(rng, n_comp=None, q0=None, m=2):
    q0 = q0 or int(rng.integers(1, 4))
    N = n_comp or int(rng.integers(1, 3))
    k0 = int(rng.integers(1, 6))
    while math.gcd(k0, q0) != 1:
        k0 += 1
    coeffs = [rng.normal(size=m) + 1j * rng.normal(size=m) for _ in range(N)]
    return cylinder(k0, q0, coeffs)


def check_cylinder_homogeneity(rng) -> CheckResult:
    worst = 0.0
    for _ in range(100):
        phi = _random_cylinder(rng)
        X = rng.normal(size=3)
        lam = float(rng.uniform(0.2, 3.0))
        lhs = eval_cyl(phi, lam * X)
        rhs = aq.scalar_mul(lam**phi.alpha, eval_cyl(phi, X))
        shifted = X.copy()
        shifted[2] += float(rng.normal())
        worst = max(worst, aq.metric(lhs, rhs) / max(1.0, aq.norm(rhs)), aq.metric(eval_cyl(phi, X), eval_cyl(phi, shifted)))
    return CheckResult("cylinder_homogeneity", worst <= 1e-9, (("max_err", worst),))


def check_gauge_zero(rng) -> CheckResult:
    worst_same, best_diff = 0.0, math.inf
    for _ in range(20):
        phi = _random_cylinder(rng, q0=int(rng.integers(2, 4)))
        coeffs = phi.coefficient_list()
        roots = np.exp(2j * np.pi * rng.integers(0, phi.q0, size=len(coeffs)) / phi.q0)
        perm = rng.permutation(len(coeffs))
        psi = phi.with_coefficients([roots[j] * coeffs[perm[j]] for j in range(len(coeffs))])
        worst_same = max(worst_same, circle_distance_sq(phi, psi), canonical_gauge(coeffs, psi.coefficient_list(), phi.q0).cost)
        other = phi.with_coefficients([c + 0.1 * rng.normal(size=c.shape) for c in coeffs])
        best_diff = min(best_diff, circle_distance_sq(phi, other))
    return CheckResult("gauge_zero", worst_same <= 1e-12 and best_diff > 1e-8, (("same", worst_same), ("distinct_min", best_diff)))


def check_a5_bracket(rng) -> CheckResult:
    ratios = []
    for _ in range(100):
        phi = _random_cylinder(rng, n_comp=int(rng.integers(1, 4)), q0=int(rng.integers(1, 4)))
        a = phi.coefficient_list()
        psi = phi.with_coefficients([c + 0.3 * (rng.normal(size=c.shape) + 1j * rng.normal(size=c.shape)) for c in a])
        b = canonical_gauge(a, psi.coefficient_list(), phi.q0).b
        denom = sum(float(np.vdot(x - y, x - y).real) for x, y in zip(a, b))
        ratios.append(circle_distance_sq(phi, psi.with_coefficients(b)) / denom)
    lo, hi = min(ratios), max(ratios)
    return CheckResult("a5_bracket", 0 < lo and hi < math.inf, (("min_ratio", lo), ("max_ratio", hi)))


def _two_sheet_field(h=1.0 / 32):
    g = box_grid(-1.0, 1.0, h, 2)

    class F:
        q, m = 2, 1

        def values(self, P):
            x, y = P[:, 0], P[:, 1]
            return np.stack([x * x - y * y + 3.0, 2.0 * x * y + x - 3.0], axis=1)[:, :, None]

    return sample_field(F(), g)


def check_qfield_integrals(rng) -> CheckResult:
    u = _two_sheet_field()
    v = u.with_data(u.data + 0.1 * rng.normal(size=u.data.shape))
    w = u.with_data(u.data + 0.1 * rng.normal(size=u.data.shape))
    B = ball((0.05, -0.1), 0.6)
    duv, dvu = dist_sq_ball(u, v, B), dist_sq_ball(v, u, B)
    tri = math.sqrt(dist_sq_ball(u, w, B)) + math.sqrt(dist_sq_ball(w, v, B)) - math.sqrt(duv)
    lam = 2.5
    scal = abs(l2_sq_ball(u.scaled(lam), B) - lam**2 * l2_sq_ball(u, B)) / l2_sq_ball(u, B)
    shift = u.with_data(u.data + rng.normal(size=u.m))
    e0, e1 = float(np.sum(grad_energy_density(u))), float(np.sum(grad_energy_density(shift)))
    clusters = detect_branch_points(u, tau=1.0)
    ok = abs(duv - dvu) <= 1e-9 and tri >= -1e-9 and scal <= 1e-12 and abs(e0 - e1) <= 1e-9 * e0 and not clusters
    return CheckResult(
        "qfield_integrals",
        ok,
        (("asym", abs(duv - dvu)), ("triangle_slack", tri), ("scaling", scal), ("shift", abs(e0 - e1) / e0), ("clusters", len(clusters))),
    )


def check_frequency(rng) -> CheckResult:
    g = box_grid(-1.0, 1.0, 1.0 / 64, 2)
    phi = cylinder(1, 2, [[1.0, 1j]])
    u = sample_field(phi, g)
    rho = float(rng.uniform(0.3, 0.5))
    N = N_of(u, (0.0, 0.0), rho)
    N2 = N_of(u.scaled(-3.0), (0.0, 0.0), rho)
    Hs, Hv = H_of(u, (0.0, 0.0), rho), H_volume(u, (0.0, 0.0), rho)
    ok = abs(N - N2) <= 1e-12 and abs(Hs - Hv) <= 0.01 * Hs and abs(N - 0.5) <= 0.05
    return CheckResult("frequency", ok, (("N", N), ("scale_gap", abs(N - N2)), ("H_rel_gap", abs(Hs - Hv) / Hs)))


def check_minimizer(rng) -> CheckResult:
    u = _two_sheet_field(1.0 / 16)
    init = u.with_data(np.where(u.boundary_mask[..., None, None], u.data, u.data + rng.normal(size=u.data.shape)))
    params = SolveParams(max_sweeps=400, energy_tol=1e-12, restarts=2, seed=int(rng.integers(1 << 30)))
    r1 = minimize(u, init=init, params=params)
    r2 = minimize(u, init=init, params=params)
    es = [e.energy for e in r1.log if e.restart == 0]
    mono = all(b <= a for a, b in zip(es, es[1:]))
    bnd = bool(np.array_equal(r1.field.data[u.boundary_mask], u.data[u.boundary_mask]))
    det = bool(np.array_equal(r1.field.data, r2.field.data))
    gap = abs(discrete_energy(r1.field) - discrete_energy(u)) / discrete_energy(u)
    ok = mono and bnd and det and gap <= 1e-3
    return CheckResult(
        "minimizer",
        ok,
        (("monotone", float(mono)), ("boundary", float(bnd)), ("deterministic", float(det)), ("harmonic_gap", gap)),
    )


def check_blowup(rng) -> CheckResult:
    g = box_grid(-1.0, 1.0, 1.0 / 32, 2)
    phi = cylinder(1, 2, [[1.0, 1j]])
    u = sample_field(phi, g)
    w = rescale(u, (0.0, 0.0), 0.5)
    fit = fit_tangent(w, 1, 2, seed=int(rng.integers(1 << 30)))
    roots = -1.0
    relabeled = fit.phi.with_coefficients([roots * c for c in fit.phi.coefficient_list()])
    gauge_gap = abs(excess(w, relabeled) - fit.excess)
    trial = fit.phi.with_coefficients([c + 0.2 for c in fit.phi.coefficient_list()])
    ok = fit.excess <= 1e-8 and gauge_gap <= 1e-10 and fit.excess <= excess(w, trial)
    return CheckResult("blowup", ok, (("fit_excess", fit.excess), ("gauge_gap", gauge_gap)))


CHECKS: tuple[Callable, ...] = (
    check_metric_axioms,
    check_average_split,
    check_metric_symmetries,
    check_cylinder_homogeneity,
    check_gauge_zero,
    check_a5_bracket,
    check_qfield_integrals,
    check_frequency,
    check_minimizer,
    check_blowup,
)


def run_checks(seed: int = 0, threads: int = 1) -> list[CheckResult]:
    """Run every check; results come back in a fixed order."""

    def one(item):
        k, fn = item
        return fn(np.random.default_rng([seed, k]))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(one, enumerate(CHECKS)))
