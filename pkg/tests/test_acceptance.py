"""Acceptance criteria 1-12, each at its stated tolerance and time budget.

A summary with one PASS/FAIL line per criterion is printed at the end of
the pytest run (see conftest.py).
"""

import itertools
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from qvalued import aq_space as aq
from qvalued.blowup import decay_report, field_offsets, fourier_tilt
from qvalued.cylindrical import (
    BranchedSeries,
    bump_field,
    canonical_gauge,
    circle_distance_sq,
    cylinder,
    example_uk,
    inner_variation_residual_closed,
    inner_variation_residual_numeric,
    micallef_white_gamma,
)
from qvalued.frequency import H_of, H_volume, N_of, weiss
from qvalued.minimizer import SolveParams, linear_reference, minimize, optimal_omega
from qvalued.qfield import ball, box_grid, detect_branch_points, dist_sq_ball, sample_field


@pytest.fixture
def measure(record_property):
    start = time.perf_counter()

    def note(text):
        record_property("measured", text)

    note.elapsed = lambda: time.perf_counter() - start
    return note


def brute_cost(a, b):
    """Minimum over all permutations, evaluated independently of aq_space."""
    perms = np.array(list(itertools.permutations(range(a.shape[0]))))
    return float(np.min(np.sum((a[None] - b[perms]) ** 2, axis=(1, 2))))


# 1 ---------------------------------------------------------------------------


def test_criterion_01_metric_axioms(measure):
    rng = np.random.default_rng(101)
    worst_sym, worst_tri, worst_id = 0.0, 0.0, 0.0
    for _ in range(10_000 // 500):
        for q in range(2, 6):
            for m in range(1, 4):
                # 500 triples per round spread over the (q, m) grid
                k = 500 // 12 + 1
                a, b, c = (rng.normal(size=(k, q, m)) for _ in range(3))
                ab = np.sqrt(aq.matching_cost_sq(a, b))
                ba = np.sqrt(aq.matching_cost_sq(b, a))
                ac = np.sqrt(aq.matching_cost_sq(a, c))
                cb = np.sqrt(aq.matching_cost_sq(c, b))
                worst_sym = max(worst_sym, float(np.max(np.abs(ab - ba))))
                worst_tri = min(worst_tri, float(np.min(ac + cb - ab)))
                shuffled = a[:, rng.permutation(q)]
                worst_id = max(worst_id, float(np.max(np.sqrt(aq.matching_cost_sq(a, shuffled)))))
    worst_oracle = 0.0
    for i in range(1000):
        q, m = 2 + i % 5, 1 + i % 3
        a, b = rng.normal(size=(q, m)), rng.normal(size=(q, m))
        got = aq.metric(aq.make_point(a), aq.make_point(b)) ** 2
        worst_oracle = max(worst_oracle, abs(got - brute_cost(a, b)) / max(1.0, got))
    elapsed = measure.elapsed()
    measure(f"symmetry {worst_sym:.1e}, triangle slack {worst_tri:.1e}, oracle gap {worst_oracle:.1e}, {elapsed:.1f}s")
    assert worst_sym == 0.0
    assert worst_tri >= -1e-9
    assert worst_id <= 1e-12
    assert worst_oracle <= 1e-12
    assert elapsed < 10


# 2 ---------------------------------------------------------------------------


def test_criterion_02_average_split_identity(measure):
    rng = np.random.default_rng(202)
    worst = 0.0
    total = 0
    for q in range(1, 6):
        for m in range(1, 4):
            k = 10_000 // 15 + 1
            a, b = rng.normal(size=(k, q, m)), rng.normal(size=(k, q, m))
            lhs = aq.matching_cost_sq(a, b)
            da = a.mean(axis=1) - b.mean(axis=1)
            af, bf = a - a.mean(axis=1, keepdims=True), b - b.mean(axis=1, keepdims=True)
            rhs = q * np.sum(da * da, axis=-1) + aq.matching_cost_sq(af, bf)
            worst = max(worst, float(np.max(np.abs(lhs - rhs) / lhs)))
            total += k
    elapsed = measure.elapsed()
    measure(f"{total} pairs, max relative error {worst:.2e}, {elapsed:.1f}s")
    assert total >= 10_000
    assert worst <= 1e-10
    assert elapsed < 5


# 3 and 4 ---------------------------------------------------------------------

DEGREES = [(1, 2), (3, 2), (2, 3)]
RADII = np.linspace(0.1, 0.5, 9)


@pytest.fixture(scope="module")
def degree_fields():
    g = box_grid(-0.75, 0.75, 1.0 / 256, 2)
    return {kq: sample_field(cylinder(kq[0], kq[1], [[1.0, 1j]]), g) for kq in DEGREES}


def test_criterion_03_frequency_recovery(degree_fields, measure):
    worst_n, worst_w = 0.0, 0.0
    for (k0, q0), u in degree_fields.items():
        alpha = k0 / q0
        for rho in RADII:
            worst_n = max(worst_n, abs(N_of(u, (0, 0), rho) - alpha))
            H = H_of(u, (0, 0), rho)
            worst_w = max(worst_w, abs(weiss(u, (0, 0), rho, alpha)) / (0.02 * max(1.0, H)))
    elapsed = measure.elapsed()
    measure(f"max |N - k0/q0| {worst_n:.2e}, max |W|/(0.02 max(1,H)) {worst_w:.2f}, {elapsed:.1f}s")
    assert worst_n <= 0.02
    assert worst_w <= 1.0
    assert elapsed < 60


def test_criterion_04_shell_vs_volume_H(degree_fields, measure):
    worst = 0.0
    for u in degree_fields.values():
        for rho in RADII:
            Hs, Hv = H_of(u, (0, 0), rho), H_volume(u, (0, 0), rho)
            worst = max(worst, abs(Hs - Hv) / Hs)
    elapsed = measure.elapsed()
    measure(f"max relative gap {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 0.01
    assert elapsed < 30


# 5 ---------------------------------------------------------------------------


class Sheets:
    def __init__(self, *fns):
        self.fns, self.q, self.m = fns, len(fns), 1

    def values(self, P):
        return np.stack([f(P[:, 0], P[:, 1]) for f in self.fns], axis=1)[:, :, None]


def _zero_interior(u):
    data = np.array(u.data)
    data[~u.boundary_mask] = 0.0
    return u.with_data(data)


def test_criterion_05_minimizer_oracles(measure):
    g = box_grid(-1.0, 1.0, 1.0 / 32, 2)
    params = SolveParams(energy_tol=0.0, delta_tol=1e-13, restarts=1, omega=optimal_omega(g.dims))

    scalar = _zero_interior(sample_field(Sheets(lambda x, y: x * x - y * y), g))
    res = minimize(scalar, params=params)
    ref = linear_reference(scalar)
    err1 = math.sqrt(np.sum((res.field.data - ref.data) ** 2) / np.sum(ref.data**2))

    sheets = Sheets(
        lambda x, y: x * x - y * y + 10.0,
        lambda x, y: 2 * x * y + 20.0,
        lambda x, y: np.exp(x) * np.cos(y) - 10.0,
    )
    three = _zero_interior(sample_field(sheets, g))
    offsets = np.array([10.0, 20.0, -10.0])[:, None]
    init = three.with_data(np.where(three.boundary_mask[..., None, None], three.data, offsets))
    res3 = minimize(three, init=init, params=params)
    want = []
    for j, f in enumerate(sheets.fns):
        single = _zero_interior(sample_field(Sheets(f), g))
        want.append(linear_reference(single).data[..., 0, 0])
    want = np.sort(np.stack(want, axis=-1), axis=-1)
    got = np.sort(res3.field.data[..., 0], axis=-1)
    err3 = math.sqrt(np.sum((got - want) ** 2) / np.sum(want**2))
    elapsed = measure.elapsed()
    measure(f"q=1 rel L2 {err1:.1e}, q=3 rel L2 {err3:.1e}, {elapsed:.1f}s")
    assert err1 <= 1e-8
    assert err3 <= 1e-8
    assert elapsed < 60


# 6 ---------------------------------------------------------------------------


def test_criterion_06_branched_minimizer(measure):
    g = box_grid(-1.0, 1.0, 1.0 / 128, 2)
    phi = cylinder(1, 2, [[1.0, 1j]])
    exact = sample_field(phi, g)
    boundary = _zero_interior(exact)
    params = SolveParams(max_sweeps=5000, energy_tol=1e-10, restarts=1, omega=optimal_omega(g.dims))
    res = minimize(boundary, params=params)
    dist = math.sqrt(dist_sq_ball(res.field, exact, ball((0, 0), 1.0)))
    es = [e.energy for e in res.log]
    monotone = all(b <= a for a, b in zip(es, es[1:]))
    elapsed = measure.elapsed()
    measure(f"L2 distance on B_1 {dist:.2e}, {len(es)} sweeps, monotone {monotone}, {elapsed:.1f}s")
    assert dist <= 5e-2
    assert monotone
    assert elapsed < 120


# 7 ---------------------------------------------------------------------------


def test_criterion_07_inner_variation_residual(measure):
    worst_rel, worst_zero = 0.0, 0.0
    for c in [(1, 1j), (1, 0), (2, 1j)]:
        for zeta0 in [(1.0, 0.0), (0.0, 1.0)]:
            num = inner_variation_residual_numeric(c, bump_field(zeta0)).value
            closed = inner_variation_residual_closed(c, zeta0)
            if micallef_white_gamma(c) == 0:
                worst_zero = max(worst_zero, abs(num))
            else:
                worst_rel = max(worst_rel, abs(num - closed) / (math.pi / 2))
    elapsed = measure.elapsed()
    measure(f"max |num - closed|/(pi/2) {worst_rel:.2e}, gamma=0 |num| {worst_zero:.2e}, {elapsed:.1f}s")
    assert worst_rel <= 0.05
    assert worst_zero <= 0.08
    assert elapsed < 30


# 8 ---------------------------------------------------------------------------


def _random_matched_pair(rng, N, q0, m, spread):
    k0 = int(rng.integers(1, 5))
    while math.gcd(k0, q0) != 1:
        k0 += 1
    a = [rng.normal(size=m) + 1j * rng.normal(size=m) for _ in range(N)]
    b_raw = [x + spread * (rng.normal(size=m) + 1j * rng.normal(size=m)) for x in a]
    b = canonical_gauge(a, b_raw, q0).b
    return cylinder(k0, q0, a), cylinder(k0, q0, b), sum(float(np.vdot(x - y, x - y).real) for x, y in zip(a, b))


def dense_circle_distance_sq(phi, psi, n_theta=20_000):
    theta = 2 * np.pi * np.arange(n_theta) / n_theta
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    A, B = phi.values(pts), psi.values(pts)
    q = phi.q
    perms = np.array(list(itertools.permutations(range(q))))
    dist = np.sum((A[:, :, None, :] - B[:, None, :, :]) ** 2, axis=-1)  # (T, q, q)
    costs = dist[:, np.arange(q), perms].sum(axis=-1)  # (T, q!)
    return float(costs.min(axis=1).sum() * 2 * np.pi / n_theta)


def test_criterion_08_a5_bracket(measure):
    rng = np.random.default_rng(808)
    ratios = []
    over = 0.0
    for _ in range(1000):
        N, q0 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        phi, psi, denom = _random_matched_pair(rng, N, q0, 2, 0.5)
        r = circle_distance_sq(phi, psi) / denom
        ratios.append(r)
        # the identity matching gives exactly pi q0 sum |a_j - b_j|^2
        over = max(over, r / (math.pi * q0) - 1.0)
    lo, hi = min(ratios), max(ratios)
    worst_oracle, worst_limit = 0.0, 0.0
    for i in range(10):
        N, q0 = 1 + i % 2, 2 + i % 2
        phi, psi, denom = _random_matched_pair(rng, N, q0, 2, 1e-3)
        dense = dense_circle_distance_sq(phi, psi)
        worst_oracle = max(worst_oracle, abs(circle_distance_sq(phi, psi) - dense) / dense)
        worst_limit = max(worst_limit, abs(dense / denom / (math.pi * q0) - 1.0))
    elapsed = measure.elapsed()
    measure(
        f"bracket [{lo:.3f}, {hi:.3f}], max excess over pi q0 {over:.1e}, "
        f"oracle gap {worst_oracle:.1e}, |ratio/(pi q0) - 1| {worst_limit:.1e}, {elapsed:.1f}s"
    )
    assert 0.0 < lo and math.isfinite(hi)
    assert over <= 1e-9
    assert worst_oracle <= 0.01
    assert worst_limit <= 0.01
    assert elapsed < 30


# 9 ---------------------------------------------------------------------------


def test_criterion_09_branch_detection(measure):
    h = 1.0 / 256
    f = example_uk(3, 8.0)
    u = sample_field(f, box_grid(-1.0, 1.0, h, 2))
    clusters = detect_branch_points(u, tau=3 * h ** (1 / 3))
    truth = f.branch_points()
    errs = sorted(min(np.linalg.norm(c.centroid - t) for c in clusters) for t in truth)
    radial = [abs(np.linalg.norm(c.centroid) - 0.5) for c in clusters]
    elapsed = measure.elapsed()
    measure(f"{len(clusters)} clusters, max position error {max(errs) / h:.2f}h, {elapsed:.1f}s")
    assert len(clusters) == 3
    assert max(errs) <= 1.5 * h
    assert max(radial) <= 1.5 * h
    assert elapsed < 30


# 10 --------------------------------------------------------------------------


def test_criterion_10_decay_exponent(measure):
    c = np.array([1.0, 1j])
    d = 0.3 * np.exp(0.4j) * np.array([1.0, 1j])
    assert micallef_white_gamma(c) == 0 and abs(micallef_white_gamma(d)) < 1e-15
    u = sample_field(BranchedSeries(2, [(1, c), (3, d)]), box_grid(-1.0, 1.0, 1.0 / 256, 2))
    rep = decay_report(u, (0.0, 0.0), theta=0.5, J=4, k0=1, q0=2)
    # closed form: at scale rho the residual rho Re(d z^{3/2}) is L2-orthogonal
    # to the tangent family, with norm rho |d| sqrt(2 pi / 5) on B_1
    oracle = rep.scales * np.linalg.norm(d) * math.sqrt(2 * math.pi / 5)
    ratio = rep.excesses / oracle
    drift = rep.records[-1].drift
    elapsed = measure.elapsed()
    measure(
        f"mu_fit {rep.mu_fit:.4f}, excess/oracle in [{ratio.min():.4f}, {ratio.max():.4f}], "
        f"drift {drift:.1e}, {elapsed:.1f}s"
    )
    assert rep.status == "fitted"
    assert abs(rep.mu_fit - 1.0) <= 0.1
    assert np.all(np.abs(ratio - 1.0) <= 0.02)
    assert drift <= 1e-3
    assert elapsed < 60


# 11 --------------------------------------------------------------------------


def test_criterion_11_tilt_extraction(measure):
    phi0 = cylinder(1, 2, [[1.0, 1j, 0.5]])
    A0 = np.array([[0.3], [-0.7]])
    a = phi0.alpha
    c = phi0.coefficient_list()[0]

    def offsets(pts):
        w = pts[:, 0] + 1j * pts[:, 1]
        r, th = np.abs(w), np.mod(np.angle(w), 2 * np.pi)
        r = np.where(r > 0, r, 1.0)  # the axis itself: value unused by the window
        lam = pts[:, 2:] @ A0.T
        out = []
        for l in range(phi0.q0):
            g = a * c[None, :] * (r ** (a - 1) * np.exp(1j * (a - 1) * (th + 2 * np.pi * l)))[:, None]
            out.append(g.real * lam[:, :1] - g.imag * lam[:, 1:2])
        return np.stack(out, axis=1)

    # the axis coordinates of a 64^3 grid over [-1, 1]^3, interior slices
    g3 = box_grid(-1.0, 1.0, 2.0 / 63, 3)
    zs = g3.axes()[2][1:-1]
    res = fourier_tilt(offsets, phi0, z_values=zs)
    err = float(np.max(np.abs(res.A - A0)))

    # the same offsets carried by a sampled 64^3 field and read back through
    # matched interpolation; slices with |z| <= 1/2 keep the branch locus of
    # phi0 + offsets (at |x| = |A0 z| / 2) inside the r < 0.3 hole of the window
    class Tilted:
        q, m = phi0.q, phi0.m

        def values(self, P):
            return phi0.values(P) + offsets(P)

    u = sample_field(Tilted(), g3)
    z_field = zs[np.abs(zs) <= 0.5]
    res_f = fourier_tilt(field_offsets(u, phi0), phi0, z_values=z_field)
    err_f = float(np.max(np.abs(res_f.A - A0)))
    elapsed = measure.elapsed()
    measure(
        f"analytic: {len(zs)} slices, max |A - A0| {err:.1e}; "
        f"grid field: {len(z_field)} slices, max |A - A0| {err_f:.1e}; {elapsed:.1f}s"
    )
    assert err <= 1e-6
    assert err_f <= 1e-6
    assert elapsed < 60


# 12 --------------------------------------------------------------------------


def _selftest(threads):
    proc = subprocess.run(
        [sys.executable, "-m", "qvalued.cli", "--threads", str(threads), "selftest", "--seed", "7"],
        capture_output=True,
    )
    return proc.returncode, proc.stdout


def test_criterion_12_determinism(measure):
    runs = [_selftest(t) for t in (1, 4, 1, 4)]
    codes = {c for c, _ in runs}
    outputs = {o for _, o in runs}
    elapsed = measure.elapsed()
    measure(f"exit codes {sorted(codes)}, {len(outputs)} distinct report(s), {elapsed:.1f}s")
    assert codes == {0}
    assert len(outputs) == 1
