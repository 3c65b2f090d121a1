"""Blow-ups, excess against cylindrical tangents, and their decay.

The excess of a field u on B_1 against a cylindrical function phi is the
L^2 distance sqrt(int_{B_1} G(u, phi)^2). Tangents are fitted by
alternating between optimal matching of node values to the model's value
slots and exact linear least squares for the coefficients, which are
linear in (Re c, Im c) once the matching is fixed.
"""

from __future__ import annotations

import io
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .aq_space import apply_perm, match_tuples
from .cylindrical import (
    Component,
    CylindricalError,
    CylindricalFunction,
    canonical_gauge,
    gauge_normal_form,
)
from .frequency import N_of, subgrid
from .qfield import (
    BallSpec,
    FieldError,
    Grid,
    QField,
    ball,
    ball_weights,
    box_grid,
    interpolate,
    l2_sq_ball,
    min_pair_distance,
    sample_field,
)

MAX_ENUM_Q = 6
MAX_ENUM_Q0 = 3
EXACT_FLOOR = 1e-10


class BlowupError(ValueError):
    """Invalid blow-up request or failed precondition."""


class FitWarning(UserWarning):
    """The matching / least-squares alternation did not reach a fixed point."""


# ---------------------------------------------------------------------------
# Rescaling and excess
# ---------------------------------------------------------------------------


def _unit_grid(n: int, h: float) -> Grid:
    k = int(round(1.0 / h))
    if k < 2:
        raise BlowupError(f"output spacing {h:g} too coarse for the unit box")
    return box_grid(-1.0, 1.0, 1.0 / k, n)


def rescale_samples(u: QField, Y: Sequence[float], rho: float, h_out: float | None = None) -> QField:
    """X -> u(Y + rho X) on a grid over [-1, 1]^n (no normalization).

    When the target nodes coincide with source nodes the values are copied
    exactly; otherwise they are interpolated with sheet matching.
    """
    Y = np.asarray(Y, dtype=float)
    if not rho > 0:
        raise BlowupError("scale must be positive")
    if np.any(Y - rho < u.grid.lo - 1e-9 * u.h) or np.any(Y + rho > u.grid.hi + 1e-9 * u.h):
        raise BlowupError(f"the cube of half-width {rho:g} about {tuple(Y)} escapes the grid box")
    if h_out is None:
        h_out = 1.0 / max(2, int(round(rho / u.h)))
    g = _unit_grid(u.n, h_out)
    src = Y + rho * g.points()
    rel = (src - u.grid.lo) / u.h
    idx = np.rint(rel)
    if np.all(np.abs(rel - idx) < 1e-9):
        vals = u.data[tuple(idx.astype(int).T)]
    else:
        vals = interpolate(u, np.clip(src, u.grid.lo, u.grid.hi))
    return QField(g, vals.reshape(g.dims + vals.shape[1:]))


def rescale(u: QField, Y: Sequence[float], rho: float, h_out: float | None = None) -> QField:
    """u_{Y,rho}(X) = u(Y + rho X) / (rho^(-n/2) ||u||_{L^2(B_rho(Y))})."""
    mass = l2_sq_ball(u, ball(Y, rho))
    if not mass > 0:
        raise BlowupError("zero L^2 norm on the ball: the blow-up is undefined")
    norm = rho ** (-u.n / 2.0) * math.sqrt(mass)
    w = rescale_samples(u, Y, rho, h_out)
    return w.scaled(1.0 / norm)


def _check_structure(u: QField, phi: CylindricalFunction) -> None:
    if phi.q != u.q or phi.m != u.m:
        raise BlowupError(f"field has (q, m) = ({u.q}, {u.m}), tangent has ({phi.q}, {phi.m})")
    if phi.rotation is not None and phi.rotation.shape[0] != u.n:
        raise BlowupError("tangent rotation acts on a different dimension")


def _unit_ball_nodes(u: QField, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Node points, values and quadrature weights for B_radius(0)."""
    win, w = ball_weights(u.grid, ball(np.zeros(u.n), radius))
    sel = w > 0
    axes = [a[s] for a, s in zip(u.grid.axes(), win)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([c[sel] for c in mesh], axis=-1)
    vals = u.data[win][sel]
    return pts, vals, w[sel]


def excess(u: QField, phi: CylindricalFunction) -> float:
    """sqrt(int_{B_1} G(u, phi)^2)."""
    _check_structure(u, phi)
    pts, vals, w = _unit_ball_nodes(u)
    cost, _ = match_tuples(phi.values(pts), vals)
    return math.sqrt(max(float(np.sum(w * cost)), 0.0))


def weighted_excess(
    u: QField,
    phi: CylindricalFunction,
    exponent: float,
    inner: float = 0.0,
    radius: float = 1.0,
    distance: str = "R",
    delta: float = 0.0,
) -> float:
    """int over inner < dist < radius of G(u, phi)^2 max(dist, delta)^exponent.

    ``distance`` is "R" (to the origin) or "r" (to the axis {x1 = x2 = 0}).
    """
    _check_structure(u, phi)
    pts, vals, w = _unit_ball_nodes(u, radius)
    if distance == "R":
        d = np.sqrt(np.sum(pts * pts, axis=1))
    elif distance == "r":
        d = np.hypot(pts[:, 0], pts[:, 1])
    else:
        raise BlowupError("distance must be 'R' or 'r'")
    keep = d > inner
    cost, _ = match_tuples(phi.values(pts[keep]), vals[keep])
    dd = np.maximum(d[keep], delta)
    if np.any(dd == 0):
        raise BlowupError("weight is singular at a sample point; use inner > 0 or delta > 0")
    return float(np.sum(w[keep] * cost * dd**exponent))


# ---------------------------------------------------------------------------
# Tangent fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Structure:
    k0: int
    q0: int
    multiplicities: tuple[int, ...]
    zero: int = 0

    @property
    def q(self) -> int:
        return self.q0 * sum(self.multiplicities) + self.zero

    def template(self, m: int) -> CylindricalFunction:
        comps = [Component(np.zeros(m, dtype=complex), k) for k in self.multiplicities]
        if self.zero:
            comps.append(Component(None, self.zero))
        return CylindricalFunction(self.q, m, self.k0, self.q0, tuple(comps))


def structure_of(phi: CylindricalFunction) -> Structure:
    mults = tuple(c.multiplicity for c in phi.components if not c.is_zero)
    zero = sum(c.multiplicity for c in phi.components if c.is_zero)
    return Structure(phi.k0, phi.q0, mults, zero)


def _partitions(total: int, largest: int | None = None):
    largest = total if largest is None else largest
    if total == 0:
        yield ()
        return
    for k in range(min(total, largest), 0, -1):
        for rest in _partitions(total - k, k):
            yield (k,) + rest


def admissible_structures(q: int, k0: int, q0: int) -> list[Structure]:
    """All component layouts of degree k0/q0 for q values, simplest first."""
    if q > MAX_ENUM_Q or q0 > MAX_ENUM_Q0:
        raise BlowupError(
            f"structure enumeration is limited to q <= {MAX_ENUM_Q}, q0 <= {MAX_ENUM_Q0}; supply a structure"
        )
    out = []
    for p in range(1, q // q0 + 1):
        zero = q - p * q0
        for parts in _partitions(p):
            out.append(Structure(k0, q0, parts, zero))
    if not out:
        raise BlowupError(f"no cylindrical structure of degree {k0}/{q0} has q = {q}")
    out.sort(key=lambda s: (len(s.multiplicities), s.zero > 0, s.multiplicities))
    return out


def nearest_degree(value: float, q: int, max_q0: int = MAX_ENUM_Q0, max_k0: int = 12) -> tuple[int, int]:
    """Reduced fraction k0/q0 (q0 <= min(max_q0, q)) closest to ``value``."""
    best = None
    for q0 in range(1, min(max_q0, q) + 1):
        for k0 in range(1, max_k0 + 1):
            if math.gcd(k0, q0) != 1:
                continue
            d = abs(k0 / q0 - value)
            if best is None or d < best[0] - 1e-12:
                best = (d, k0, q0)
    return best[1], best[2]


@dataclass
class FitResult:
    phi: CylindricalFunction
    excess: float
    converged: bool
    iterations: int
    warning: str | None = None
    tried: list[tuple[Structure, float]] = field(default_factory=list)


class _Design:
    """Branch basis functions r^a cos, r^a sin at the sample points."""

    def __init__(self, s: Structure, pts: np.ndarray):
        self.s = s
        r = np.hypot(pts[:, 0], pts[:, 1])
        th = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
        a = s.k0 / s.q0
        ls = np.arange(s.q0)
        ang = a * (th[:, None] + 2.0 * np.pi * ls[None, :])
        mag = np.where(r > 0, r, 0.0) ** a
        self.C = mag[:, None] * np.cos(ang)  # (P, q0)
        self.S = mag[:, None] * np.sin(ang)
        # slot ranges per nonzero component
        self.slices = []
        start = 0
        for k in s.multiplicities:
            self.slices.append(slice(start, start + k * s.q0))
            start += k * s.q0

    def model(self, coeffs: Sequence[np.ndarray], m: int) -> np.ndarray:
        P = self.C.shape[0]
        out = np.zeros((P, self.s.q, m))
        for c, sl, k in zip(coeffs, self.slices, self.s.multiplicities):
            vals = self.C[:, :, None] * c.real[None, None, :] - self.S[:, :, None] * c.imag[None, None, :]
            out[:, sl] = np.tile(vals, (1, k, 1))
        return out

    def solve(self, matched: np.ndarray, w: np.ndarray) -> list[np.ndarray]:
        coeffs = []
        for sl, k in zip(self.slices, self.s.multiplicities):
            t = matched[:, sl].reshape(matched.shape[0], k, self.s.q0, -1)
            C = np.tile(self.C[:, None, :], (1, k, 1))
            S = np.tile(self.S[:, None, :], (1, k, 1))
            wC = (w[:, None, None] * C).ravel()
            wS = (w[:, None, None] * S).ravel()
            Cf, Sf = C.ravel(), S.ravel()
            t2 = t.reshape(-1, t.shape[-1])
            cs = float(wC @ Sf)
            A = np.array([[float(wC @ Cf), -cs], [-cs, float(wS @ Sf)]])
            rhs = np.stack([wC @ t2, -(wS @ t2)])
            sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
            coeffs.append(sol[0] + 1j * sol[1])
        return coeffs


def _alternate(design: _Design, vals, w, init, m, max_iter):
    coeffs = [np.asarray(c, dtype=complex) for c in init]
    seen = {}
    best = None
    for it in range(max_iter):
        model = design.model(coeffs, m)
        cost, perm = match_tuples(model, vals)
        obj = float(np.sum(w * cost))
        if best is None or obj < best[0]:
            best = (obj, coeffs)
        key = perm.tobytes()
        if key in seen:
            # same matching as before: fixed point if it was the last one
            return best[0], best[1], seen[key] == it - 1, it
        seen[key] = it
        coeffs = design.solve(apply_perm(vals, perm), w)
    return best[0], best[1], False, max_iter


def _canonical(phi: CylindricalFunction) -> CylindricalFunction:
    comps = []
    for c in phi.components:
        if c.is_zero:
            continue
        comps.append(Component(gauge_normal_form([c.coeff], phi.q0)[0], c.multiplicity))
    comps.sort(key=lambda c: (c.multiplicity, tuple(np.concatenate([c.coeff.real, c.coeff.imag]).round(12))))
    comps += [c for c in phi.components if c.is_zero]
    return CylindricalFunction(phi.q, phi.m, phi.k0, phi.q0, tuple(comps), phi.rotation)


def _fit_structure(vals, pts, w, s: Structure, m: int, starts: int, rng, init, max_iter):
    design = _Design(s, pts)
    scale = math.sqrt(np.sum(w[:, None, None] * vals**2) / max(np.sum(w[:, None] * (design.C**2 + design.S**2)) * s.q, 1e-300))
    inits = []
    if init is not None:
        inits.append(init)
    for _ in range(starts):
        inits.append(
            [scale * (rng.standard_normal(m) + 1j * rng.standard_normal(m)) / math.sqrt(2 * m) for _ in s.multiplicities]
        )
    best = None
    for start in inits:
        obj, coeffs, fixed, its = _alternate(design, vals, w, start, m, max_iter)
        if best is None or obj < best[0] - 1e-14 * max(abs(obj), 1.0):
            best = (obj, coeffs, fixed, its)
    return best


def fit_tangent(
    u: QField,
    k0: int,
    q0: int,
    structure: Structure | None = None,
    init: CylindricalFunction | None = None,
    starts: int = 6,
    seed: int = 0,
    max_iter: int = 200,
) -> FitResult:
    """Least-squares projection of u on B_1 onto cylindrical functions of degree k0/q0.

    Without ``structure`` every admissible component layout is tried and the
    lowest-excess fit is returned. Coefficients come back in a canonical
    gauge. ``init`` (same structure) is used as an extra starting point.
    """
    if math.gcd(k0, q0) != 1:
        raise BlowupError(f"k0={k0}, q0={q0} are not coprime")
    pts, vals, w = _unit_ball_nodes(u)
    structures = [structure] if structure is not None else admissible_structures(u.q, k0, q0)
    rng = np.random.default_rng(seed)
    tried = []
    best = None
    for s in structures:
        if s.q != u.q or (s.k0, s.q0) != (k0, q0):
            raise BlowupError(f"structure {s} does not match q={u.q} and degree {k0}/{q0}")
        start = None
        if init is not None and structure_of(init) == s:
            start = [c.coeff for c in init.components if not c.is_zero]
        obj, coeffs, fixed, its = _fit_structure(vals, pts, w, s, u.m, starts, rng, start, max_iter)
        tried.append((s, math.sqrt(max(obj, 0.0))))
        if best is None or obj < best[0] * (1 - 1e-9) - 1e-20:
            best = (obj, coeffs, fixed, its, s)
    obj, coeffs, fixed, its, s = best
    phi = _canonical(s.template(u.m).with_coefficients(coeffs))
    msg = None
    if not fixed:
        msg = "matching alternation did not reach a fixed point; returning the best iterate"
        warnings.warn(msg, FitWarning, stacklevel=2)
    return FitResult(phi, math.sqrt(max(obj, 0.0)), fixed, its, msg, tried)


# ---------------------------------------------------------------------------
# Sheet decomposition on annuli
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SheetDecomposition:
    field: QField
    phi: CylindricalFunction
    nodes: np.ndarray  # (P, n) node indices
    slot_values: np.ndarray  # (P, q, m) values of u in phi's slot order
    branch_values: np.ndarray  # (P, q, m) values of phi
    perm: np.ndarray  # (P, q) slot i holds u[..., perm[i], :]

    @property
    def offsets(self) -> np.ndarray:
        return self.slot_values - self.branch_values

    def component_offsets(self) -> list[np.ndarray]:
        """Per component of phi, offsets of shape (P, multiplicity * q0, m)."""
        out, start = [], 0
        for c in self.phi.components:
            width = c.multiplicity * (1 if c.is_zero else self.phi.q0)
            out.append(self.offsets[:, start : start + width])
            start += width
        return out

    def reassemble(self) -> QField:
        data = np.array(self.field.data)
        inv = np.argsort(self.perm, axis=-1)
        data[tuple(self.nodes.T)] = apply_perm(self.slot_values, inv)
        return QField(self.field.grid, data)


def _distinct_separation(vals: np.ndarray) -> np.ndarray:
    q = vals.shape[-2]
    if q == 1:
        return np.full(vals.shape[0], np.inf)
    d = np.sqrt(np.sum((vals[:, :, None, :] - vals[:, None, :, :]) ** 2, axis=-1))
    iu = np.triu_indices(q, k=1)
    pair = d[:, iu[0], iu[1]]
    pair = np.where(pair > 0, pair, np.inf)
    return pair.min(axis=1)


def decompose_sheets(
    u: QField, phi: CylindricalFunction, annulus: tuple[float, float], kappa: float = 1.0
) -> SheetDecomposition:
    """Assign each value of u to a branch of phi on {r_in < r < r_out}.

    Requires the separation of phi to exceed ``kappa * 2 sup G(u, phi)`` on
    the region; otherwise the assignment could be ambiguous and the node
    where the condition is worst is reported.
    """
    _check_structure(u, phi)
    r_in, r_out = map(float, annulus)
    if not 0 <= r_in < r_out:
        raise BlowupError("annulus needs 0 <= r_in < r_out")
    pts = u.grid.points()
    if phi.rotation is not None:
        r = phi._plane_coords(pts)[0]
    else:
        r = np.hypot(pts[:, 0], pts[:, 1])
    sel = np.flatnonzero((r > r_in) & (r < r_out))
    if sel.size == 0:
        raise BlowupError("no grid nodes in the annulus")
    idx = np.stack(np.unravel_index(sel, u.grid.dims), axis=-1)
    vals = u.data.reshape((-1,) + u.data.shape[u.n :])[sel]
    branch = phi.values(pts[sel])
    cost, perm = match_tuples(branch, vals)
    dist = np.sqrt(np.maximum(cost, 0.0))
    sep = _distinct_separation(branch)
    sup = float(dist.max())
    if sup > 0:
        ratio = sep / (2.0 * kappa * sup)
        worst = int(np.argmin(ratio))
        if ratio[worst] <= 1.0:
            raise BlowupError(
                f"separation precondition fails at node {tuple(int(i) for i in idx[worst])}: "
                f"sep {sep[worst]:.3g} <= {2.0 * kappa:g} * sup G = {2.0 * kappa * sup:.3g}"
            )
    return SheetDecomposition(u, phi, idx, apply_perm(vals, perm), branch, perm)


# ---------------------------------------------------------------------------
# Axis tilt from Fourier coefficients of the offsets
# ---------------------------------------------------------------------------


def _branch_gradients(phi: CylindricalFunction, theta: np.ndarray) -> list[np.ndarray]:
    """Per nonzero component, D_iota of its branches on the unit circle:
    array (T, q0, 2, m) for iota = 1, 2."""
    a = phi.alpha
    ls = np.arange(phi.q0)
    psi = theta[:, None] + 2.0 * np.pi * ls[None, :]
    out = []
    for comp in phi.nonzero:
        f = a * comp.coeff[None, None, :] * np.exp(1j * (a - 1.0) * psi)[:, :, None]
        out.append(np.stack([f.real, -f.imag], axis=2))
    return out


@dataclass(frozen=True)
class TiltResult:
    z: np.ndarray  # (Z, n-2) slice coordinates
    lam: np.ndarray  # (Z, 2)
    A: np.ndarray  # (2, n-2)
    residual: float
    normalization: float


def fourier_tilt(
    offsets: Callable[[np.ndarray], np.ndarray],
    phi0: CylindricalFunction,
    z_values: np.ndarray | None = None,
    r_window: tuple[float, float] = (0.3, 0.7),
    n_r: int = 9,
    n_theta: int = 256,
) -> TiltResult:
    """Extract the axis tilt lambda(z) from sheet offsets over phi0.

    ``offsets(points)`` returns offsets (P, q, m) in ``phi0``'s slot order.
    For each slice z, the Fourier coefficients
    w^iota = (pi q0)^-1 int sum_l r^(1-alpha) w_l . D_iota phi0_l(e^{i theta}) d theta
    are averaged over ``r_window``, summed over components with their
    multiplicities and divided by c = sum alpha^2 m_j |c_j|^2. A least
    squares fit lambda(z) = A z follows. n = 2 gives one slice and A = 0.
    """
    if phi0.rotation is not None:
        raise BlowupError("tilt extraction expects an unrotated reference tangent")
    comps = phi0.nonzero
    a = phi0.alpha
    norm_c = sum(a * a * c.multiplicity * float(np.vdot(c.coeff, c.coeff).real) for c in comps)
    if not comps or norm_c == 0.0:
        raise BlowupError("reference tangent has no nonzero component: no tilt signal")
    if z_values is None:
        zs = np.zeros((1, 0))
    else:
        zs = np.asarray(z_values, dtype=float)
        zs = zs[:, None] if zs.ndim == 1 else zs
    n = 2 + zs.shape[1]
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    rs = np.linspace(r_window[0], r_window[1], n_r)
    grads = _branch_gradients(phi0, theta)
    # slot layout of the nonzero components
    starts, pos = [], 0
    for c in phi0.components:
        starts.append(pos)
        pos += c.multiplicity * (1 if c.is_zero else phi0.q0)
    nz_starts = [s for s, c in zip(starts, phi0.components) if not c.is_zero]
    lam = np.zeros((zs.shape[0], 2))
    for iz, z in enumerate(zs):
        R, T = np.meshgrid(rs, theta, indexing="ij")
        pts = np.zeros((R.size, n))
        pts[:, 0] = (R * np.cos(T)).ravel()
        pts[:, 1] = (R * np.sin(T)).ravel()
        pts[:, 2:] = z
        w = np.asarray(offsets(pts)).reshape(n_r, n_theta, phi0.q, phi0.m)
        W = np.zeros(2)
        for comp, g, s0 in zip(comps, grads, nz_starts):
            for k in range(comp.multiplicity):
                wl = w[:, :, s0 + k * phi0.q0 : s0 + (k + 1) * phi0.q0, :]  # (r, T, q0, m)
                scaled = wl * (rs ** (1.0 - a))[:, None, None, None]
                # trapezoid in theta, mean over r
                coef = np.einsum("rtlm,tlim->ri", scaled, g) * (2.0 * np.pi / n_theta) / (np.pi * phi0.q0)
                W += coef.mean(axis=0)
        lam[iz] = W / norm_c
    if zs.shape[1] == 0:
        return TiltResult(zs, lam, np.zeros((2, 0)), 0.0, norm_c)
    A_t, res, *_ = np.linalg.lstsq(zs, lam, rcond=None)
    resid = float(np.sqrt(np.mean((zs @ A_t - lam) ** 2)))
    return TiltResult(zs, lam, A_t.T, resid, norm_c)


def field_offsets(u: QField, phi0: CylindricalFunction) -> Callable[[np.ndarray], np.ndarray]:
    """Offsets of an interpolated grid field over phi0, in phi0's slot order."""

    def f(pts: np.ndarray) -> np.ndarray:
        branch = phi0.values(pts)
        vals = interpolate(u, pts, reference=branch)
        return vals - branch

    return f


# ---------------------------------------------------------------------------
# Decay reports
# ---------------------------------------------------------------------------


@dataclass
class ScaleRecord:
    scale: float
    excess: float
    tangent: CylindricalFunction
    drift: float | None


@dataclass
class ExcessReport:
    center: tuple[float, ...]
    k0: int
    q0: int
    records: list[ScaleRecord]
    mu_fit: float | None
    mu_residual: float | None
    status: str  # "fitted", "exact tangent" or "insufficient data"

    @property
    def scales(self) -> np.ndarray:
        return np.array([r.scale for r in self.records])

    @property
    def excesses(self) -> np.ndarray:
        return np.array([r.excess for r in self.records])

    def running_mu(self) -> list[float | None]:
        out = []
        for j in range(len(self.records)):
            mu, _ = _decay_fit(self.scales[: j + 1], self.excesses[: j + 1])
            out.append(mu)
        return out

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        buf.write("scale,excess,mu_running\n")
        for rec, mu in zip(self.records, self.running_mu()):
            buf.write(f"{rec.scale:.12g},{rec.excess:.12g},{'' if mu is None else f'{mu:.12g}'}\n")
        return buf.getvalue()

    def to_text(self, header: str | None = None) -> str:
        lines = []
        if header:
            lines.append(f"# {header}")
        lines.append(f"center: {list(self.center)}")
        lines.append(f"degree: {self.k0}/{self.q0}")
        lines.append(f"status: {self.status}")
        lines.append(f"mu_fit: {'none' if self.mu_fit is None else f'{self.mu_fit:.12g}'}")
        lines.append(f"mu_residual: {'none' if self.mu_residual is None else f'{self.mu_residual:.6g}'}")
        for j, rec in enumerate(self.records):
            lines.append("")
            lines.append(f"[scale {j}]")
            lines.append(f"rho: {rec.scale:.12g}")
            lines.append(f"excess: {rec.excess:.12g}")
            lines.append(f"drift: {'none' if rec.drift is None else f'{rec.drift:.6g}'}")
            lines.append(f"tangent: {_stable_record(rec.tangent)}")
        return "\n".join(lines) + "\n"


def _stable_record(phi: CylindricalFunction) -> str:
    rec = phi.to_record()
    for c in rec["components"]:
        for key in ("re", "im"):
            if key in c:
                # round away sub-1e-12 noise so reports compare byte for byte
                c[key] = [round(x, 12) + 0.0 for x in c[key]]
    return json.dumps(rec, sort_keys=True)


def _decay_fit(scales: np.ndarray, exc: np.ndarray) -> tuple[float | None, float | None]:
    keep = exc >= EXACT_FLOOR
    if keep.sum() < 2:
        return None, None
    x, y = np.log(scales[keep]), np.log(exc[keep])
    A = np.stack([x, np.ones_like(x)], axis=1)
    sol, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ sol - y) ** 2)))
    return float(sol[0]), resid


def coefficient_drift(a: CylindricalFunction, b: CylindricalFunction) -> float:
    """Gauge-invariant distance between the coefficient lists of two tangents."""
    if (a.q0, len(a.coefficient_list())) != (b.q0, len(b.coefficient_list())):
        return math.inf
    return math.sqrt(canonical_gauge(a.coefficient_list(), b.coefficient_list(), a.q0).cost)


def decay_report(
    u: QField,
    Y: Sequence[float],
    theta: float = 0.5,
    J: int = 4,
    k0: int | None = None,
    q0: int | None = None,
    rho0: float | None = None,
    structure: Structure | None = None,
    seed: int = 0,
) -> ExcessReport:
    """Excess of u against fitted tangents at scales rho0 theta^j, j = 0..J.

    At each scale the field w_j(X) = rho_j^(-alpha) u(Y + rho_j X) is fitted
    on B_1; its excess is the normalized excess
    (rho_j^(-n-2 alpha) int_{B_rho_j(Y)} G(u, phi)^2)^(1/2). The decay
    exponent is the least-squares slope of log excess against log rho_j,
    ignoring scales whose excess is below 1e-10. Without a degree, the
    frequency at the centre (radius rho0 / 4) picks the nearest admissible
    k0/q0.
    """
    if not 0 < theta < 1 or J < 0:
        raise BlowupError("need 0 < theta < 1 and J >= 0")
    Yv = np.asarray(Y, dtype=float)
    if rho0 is None:
        rho0 = float(np.min(np.minimum(Yv - u.grid.lo, u.grid.hi - Yv)))
    if theta**J * rho0 < 8.0 * u.h:
        raise BlowupError(
            f"smallest scale {theta ** J * rho0:.3g} is below the resolution floor 8h = {8 * u.h:.3g}"
        )
    if k0 is None or q0 is None:
        k0, q0 = nearest_degree(N_of(u, Yv, rho0 / 4.0), u.q)
    alpha = k0 / q0
    records = []
    prev = None
    for j in range(J + 1):
        rho = rho0 * theta**j
        w = rescale_samples(u, Yv, rho).scaled(rho**-alpha)
        init = prev.scaled(1.0) if prev is not None else None
        fit = fit_tangent(w, k0, q0, structure=structure, init=init, seed=seed)
        drift = coefficient_drift(prev, fit.phi) if prev is not None else None
        records.append(ScaleRecord(rho, fit.excess, fit.phi, drift))
        prev = fit.phi
    exc = np.array([r.excess for r in records])
    mu, resid = _decay_fit(np.array([r.scale for r in records]), exc)
    if np.all(exc < EXACT_FLOOR):
        status = "exact tangent"
    elif mu is None:
        status = "insufficient data"
    else:
        status = "fitted"
    return ExcessReport(tuple(float(y) for y in Yv), k0, q0, records, mu, resid, status)
