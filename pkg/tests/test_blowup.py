import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qvalued.blowup import (
    BlowupError,
    Structure,
    admissible_structures,
    coefficient_drift,
    decay_report,
    decompose_sheets,
    excess,
    fit_tangent,
    fourier_tilt,
    nearest_degree,
    rescale,
    rescale_samples,
    weighted_excess,
)
from qvalued.cylindrical import BranchedSeries, canonical_gauge, cylinder
from qvalued.qfield import ball, box_grid, dist_sq_ball, l2_sq_ball, sample_field

C_HALF = np.array([1.0, 1j])


@pytest.fixture(scope="module")
def half_field():
    return sample_field(cylinder(1, 2, [C_HALF]), box_grid(-1.0, 1.0, 1.0 / 64, 2))


@pytest.fixture(scope="module")
def series_field():
    d = 0.3 * np.exp(0.4j) * C_HALF
    return sample_field(BranchedSeries(2, [(1, C_HALF), (3, d)]), box_grid(-1.0, 1.0, 1.0 / 64, 2))


def unit_field(phi, h=1.0 / 32):
    return sample_field(phi, box_grid(-1.0, 1.0, h, 2))


def test_structures():
    ss = admissible_structures(3, 1, 2)
    assert Structure(1, 2, (1,), 1) in ss and all(s.q == 3 for s in ss)
    assert nearest_degree(0.49, 2) == (1, 2)
    assert nearest_degree(0.66, 3) == (2, 3)
    with pytest.raises(BlowupError):
        admissible_structures(9, 1, 2)


def test_rescale_homogeneous(half_field):
    a = rescale(half_field, (0, 0), 0.5, h_out=1.0 / 32)
    b = rescale(half_field, (0, 0), 1.0, h_out=1.0 / 32)
    assert math.sqrt(dist_sq_ball(a, b, ball((0, 0), 1.0))) <= 1e-3
    assert l2_sq_ball(a, ball((0, 0), 1.0)) == pytest.approx(1.0, rel=0.02)


def test_rescale_composition(series_field):
    Y = (0.0, 0.0)
    direct = rescale(series_field, Y, 0.4, h_out=1.0 / 16)
    inner = rescale(series_field, Y, 0.8, h_out=1.0 / 32)
    nested = rescale(inner, (0, 0), 0.5, h_out=1.0 / 16)
    assert math.sqrt(dist_sq_ball(direct, nested, ball((0, 0), 1.0))) <= 1e-2


def test_rescale_escape(half_field):
    with pytest.raises(BlowupError):
        rescale_samples(half_field, (0.5, 0.0), 0.6)


def test_excess_examples():
    phi = cylinder(1, 2, [C_HALF])
    u = unit_field(phi)
    assert excess(u, phi) <= 1e-12
    delta = np.array([0.01, -0.02])
    shifted = u.with_data(u.data + delta)
    assert excess(shifted, phi) == pytest.approx(math.sqrt(2 * math.pi) * np.linalg.norm(delta), rel=0.01)
    lam = 3.0
    assert excess(shifted.scaled(lam), phi.scaled(lam)) == pytest.approx(lam * excess(shifted, phi), rel=1e-12)
    with pytest.raises(BlowupError):
        excess(u, cylinder(1, 3, [C_HALF]))


def test_fit_recovers_cylinder():
    phi = cylinder(3, 2, [[0.7 - 0.2j, 1.1j]])
    fit = fit_tangent(unit_field(phi), 3, 2)
    assert fit.excess <= 1e-8
    assert canonical_gauge(phi.coefficient_list(), fit.phi.coefficient_list(), 2).cost <= 1e-16


def test_fit_noise_linear_in_epsilon():
    phi = cylinder(1, 2, [C_HALF])
    u = unit_field(phi)
    rng = np.random.default_rng(0)
    noise = rng.normal(size=u.data.shape)
    errs = []
    for eps in (1e-3, 1e-2):
        fit = fit_tangent(u.with_data(u.data + eps * noise), 1, 2)
        errs.append(math.sqrt(canonical_gauge(phi.coefficient_list(), fit.phi.coefficient_list(), 2).cost) / eps)
    assert max(errs) <= 1.0 and errs[1] == pytest.approx(errs[0], rel=0.2)


def test_fit_detects_zero_component():
    phi = cylinder(1, 2, [C_HALF], zero=1)
    fit = fit_tangent(unit_field(phi), 1, 2)
    assert fit.excess <= 1e-8
    assert any(c.is_zero for c in fit.phi.components)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fit_beats_init_and_is_gauge_invariant(seed):
    rng = np.random.default_rng(seed)
    d = 0.4 * (rng.normal(size=2) + 1j * rng.normal(size=2))
    u = unit_field(BranchedSeries(2, [(1, C_HALF), (3, d)]))
    init = cylinder(1, 2, [C_HALF + 0.3 * rng.normal(size=2)])
    fit = fit_tangent(u, 1, 2, init=init, starts=2, seed=seed)
    assert fit.excess <= excess(u, init) + 1e-12
    flipped = fit.phi.with_coefficients([-c for c in fit.phi.coefficient_list()])
    assert excess(u, flipped) == pytest.approx(fit.excess, rel=1e-12)


def test_decompose_sheets():
    phi = cylinder(1, 2, [C_HALF], zero=1)
    u = unit_field(phi)
    dec = decompose_sheets(u, phi, (0.3, 0.9))
    assert np.abs(dec.offsets).max() <= 1e-15
    shift = np.array([[0.01, -0.02], [0.01, -0.02], [0.005, 0.0]])
    v = sample_field(
        type("F", (), {"q": 3, "m": 2, "values": staticmethod(lambda P: phi.values(P) + shift)})(), u.grid
    )
    dec = decompose_sheets(v, phi, (0.3, 0.9))
    assert np.allclose(dec.offsets, shift, atol=1e-12)
    assert np.array_equal(dec.reassemble().data, v.data)
    with pytest.raises(BlowupError, match="separation precondition"):
        decompose_sheets(v.with_data(v.data + 0.5), phi, (0.01, 0.9))


def branch_gradient_offsets(phi0, lam_of_z):
    """Offsets D_x phi0 . lambda(z) in phi0's slot order (single component)."""
    a = phi0.alpha
    c = phi0.coefficient_list()[0]

    def f(pts):
        w = pts[:, 0] + 1j * pts[:, 1]
        r, th = np.abs(w), np.mod(np.angle(w), 2 * np.pi)
        lam = lam_of_z(pts[:, 2:])
        out = []
        for l in range(phi0.q0):
            g = a * c[None, :] * ((r ** (a - 1)) * np.exp(1j * (a - 1) * (th + 2 * np.pi * l)))[:, None]
            out.append(g.real * lam[:, :1] - g.imag * lam[:, 1:2])
        return np.stack(out, axis=1)

    return f


def test_tilt_constant_and_zero():
    phi0 = cylinder(1, 2, [[1.0, 1j, 0.5]])
    lam0 = np.array([0.2, -0.1])
    res = fourier_tilt(branch_gradient_offsets(phi0, lambda z: np.tile(lam0, (len(z), 1))), phi0)
    assert np.allclose(res.lam[0], lam0, atol=1e-10)
    zero = fourier_tilt(lambda P: np.zeros((len(P), 2, 3)), phi0, z_values=np.linspace(-0.5, 0.5, 5))
    assert np.all(zero.lam == 0) and np.all(zero.A == 0)


def test_tilt_linear():
    phi0 = cylinder(1, 2, [[1.0, 1j, 0.5]])
    A0 = np.array([[0.3], [-0.7]])
    res = fourier_tilt(branch_gradient_offsets(phi0, lambda z: z @ A0.T), phi0, z_values=np.linspace(-0.6, 0.6, 7))
    assert np.allclose(res.A, A0, atol=1e-6)


def test_decay_exact_tangent(half_field):
    rep = decay_report(half_field, (0, 0), theta=0.5, J=2, k0=1, q0=2)
    assert rep.status == "exact tangent" and rep.mu_fit is None
    assert all(r.drift is None or r.drift <= 1e-8 for r in rep.records)
    text = rep.to_text("hdr")
    assert "status: exact tangent" in text and "mu_fit: none" in text
    assert rep.to_csv().splitlines()[0] == "scale,excess,mu_running"


def test_decay_floor(half_field):
    with pytest.raises(BlowupError):
        decay_report(half_field, (0, 0), theta=0.5, J=6)


def test_weighted_excess_stable_under_cutoff(series_field):
    w = rescale_samples(series_field, (0, 0), 1.0)
    phi = fit_tangent(w, 1, 2).phi
    sigma, n, alpha = 0.5, 2, 0.5
    vals = [weighted_excess(w, phi, -n - 2 * alpha + sigma, inner=c) for c in (0.1, 0.05, 0.025)]
    assert all(np.isfinite(vals))
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])
    assert vals[2] == pytest.approx(vals[1], rel=0.05)


def test_weighted_nonconcentration(series_field):
    w = rescale_samples(series_field, (0, 0), 1.0)
    fit = fit_tangent(w, 1, 2)
    sigma, q = 0.5, 2
    ratios = [
        weighted_excess(w, fit.phi, -(2.0 / q - sigma), radius=0.5, distance="r", delta=delta) / fit.excess**2
        for delta in (0.1, 0.05, 0.025)
    ]
    assert max(ratios) <= 10.0
    with pytest.raises(BlowupError):
        weighted_excess(w, fit.phi, -1.0, distance="x")


def test_coefficient_drift_gauge():
    a = cylinder(1, 2, [C_HALF])
    b = a.with_coefficients([-C_HALF])
    assert coefficient_drift(a, b) == pytest.approx(0.0, abs=1e-15)
