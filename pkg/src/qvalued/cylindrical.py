"""Homogeneous cylindrical q-valued functions and related closed forms.

A cylindrical function is a finite sum of components. A nonzero component
contributes the q0 branch values ``Re(c (x1 + i x2)^alpha)`` with
``alpha = k0/q0``, repeated ``multiplicity`` times. A zero component
contributes ``multiplicity`` copies of the origin. An optional skew
generator ``A`` mixes the branch plane with the axis, evaluating
``phi(exp(A) X)``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .aq_space import AqError, AqPoint, make_point, matching_cost_sq, permutations_table

# Exhaustive bounds for the rotation gauge search.
GAUGE_MAX_N = 4
GAUGE_MAX_Q0 = 4


class CylindricalError(ValueError):
    """Invalid cylindrical parameterization or unsupported request."""


class DiagnosticError(RuntimeError):
    """A numerical diagnostic did not converge to its stated tolerance."""


@dataclass(frozen=True, eq=False)
class Component:
    coeff: np.ndarray | None  # complex (m,), None for the zero component
    multiplicity: int = 1

    @property
    def is_zero(self) -> bool:
        return self.coeff is None


@dataclass(frozen=True, eq=False)
class CylindricalFunction:
    """Parameters of a homogeneous cylindrical q-valued function."""

    q: int
    m: int
    k0: int
    q0: int
    components: tuple[Component, ...]
    rotation: np.ndarray | None = None
    _rot_exp: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.k0 < 1 or self.q0 < 1 or math.gcd(self.k0, self.q0) != 1:
            raise CylindricalError(f"k0={self.k0}, q0={self.q0} must be coprime positive integers")
        if self.q0 > self.q:
            raise CylindricalError(f"q0={self.q0} exceeds q={self.q}")
        if not self.components:
            raise CylindricalError("at least one component is required")
        zeros = sum(c.is_zero for c in self.components)
        if zeros > 1:
            raise CylindricalError("at most one ZERO component is allowed")
        total = 0
        for comp in self.components:
            if int(comp.multiplicity) != comp.multiplicity or comp.multiplicity < 1:
                raise CylindricalError(f"bad multiplicity {comp.multiplicity}")
            if comp.is_zero:
                total += comp.multiplicity
            else:
                if comp.coeff.shape != (self.m,):
                    raise CylindricalError(f"coefficient shape {comp.coeff.shape} != ({self.m},)")
                if not np.all(np.isfinite(comp.coeff)):
                    raise CylindricalError("non-finite coefficient")
                total += comp.multiplicity * self.q0
        if total != self.q:
            raise CylindricalError(f"components account for {total} values, expected q={self.q}")
        if self.rotation is not None:
            rot = np.asarray(self.rotation, dtype=float)
            n = rot.shape[0]
            if rot.shape != (n, n) or n < 2:
                raise CylindricalError("rotation generator must be a square matrix")
            if not np.allclose(rot, -rot.T, atol=0):
                raise CylindricalError("rotation generator must be skew-symmetric")
            if np.any(rot[:2, :2] != 0) or np.any(rot[2:, 2:] != 0):
                raise CylindricalError("rotation generator may only couple the branch plane to the axis")
            object.__setattr__(self, "rotation", rot)
            object.__setattr__(self, "_rot_exp", expm(rot))

    @property
    def alpha(self) -> float:
        return self.k0 / self.q0

    @property
    def nonzero(self) -> list[Component]:
        return [c for c in self.components if not c.is_zero]

    def coefficient_list(self) -> list[np.ndarray]:
        """Nonzero coefficients, each repeated by its multiplicity."""
        out = []
        for comp in self.nonzero:
            out.extend([comp.coeff] * comp.multiplicity)
        return out

    def slot_layout(self) -> list[tuple[int, int, int]]:
        """(component index, copy h, branch l) for each of the q value slots."""
        slots = []
        for j, comp in enumerate(self.components):
            nb = 1 if comp.is_zero else self.q0
            for h in range(comp.multiplicity):
                for l in range(nb):
                    slots.append((j, h, l))
        return slots

    def _plane_coords(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self._rot_exp is not None:
            if pts.shape[1] != self._rot_exp.shape[0]:
                raise CylindricalError(
                    f"points have dimension {pts.shape[1]}, rotation expects {self._rot_exp.shape[0]}"
                )
            pts = pts @ self._rot_exp.T
        r = np.hypot(pts[:, 0], pts[:, 1])
        theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
        return r, theta

    def branch_values(self, points: np.ndarray) -> list[np.ndarray]:
        """Per component, the branch values at ``points``: arrays (P, q0, m).

        The zero component yields an array of shape (P, 1, m).
        """
        r, theta = self._plane_coords(points)
        return [self._component_branches(comp, r, theta) for comp in self.components]

    def _component_branches(self, comp: Component, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        if comp.is_zero:
            return np.zeros((r.shape[0], 1, self.m))
        a = self.alpha
        ls = np.arange(self.q0)
        phase = np.exp(1j * a * (theta[:, None] + 2.0 * np.pi * ls[None, :]))
        mag = np.where(r > 0, r, 1.0) ** a
        vals = np.real(comp.coeff[None, None, :] * (mag[:, None] * phase)[:, :, None])
        vals[r == 0] = 0.0
        return vals

    def values(self, points: np.ndarray) -> np.ndarray:
        """Raw value tuples at ``points`` (P, n) -> (P, q, m), slot order."""
        blocks = []
        for comp, br in zip(self.components, self.branch_values(points)):
            blocks.extend([br] * comp.multiplicity)
        return np.concatenate(blocks, axis=1)

    __call__ = values

    def with_coefficients(self, coeffs: Sequence[np.ndarray]) -> "CylindricalFunction":
        """Same structure, new nonzero coefficients (in component order)."""
        it = iter(coeffs)
        comps = tuple(
            c if c.is_zero else Component(np.asarray(next(it), dtype=complex), c.multiplicity)
            for c in self.components
        )
        return CylindricalFunction(self.q, self.m, self.k0, self.q0, comps, self.rotation)

    def scaled(self, lam: float) -> "CylindricalFunction":
        return self.with_coefficients([lam * c.coeff for c in self.nonzero])

    # -- serialization ------------------------------------------------------

    def to_record(self) -> dict:
        comps = []
        for c in self.components:
            if c.is_zero:
                comps.append({"zero": True, "mult": int(c.multiplicity)})
            else:
                comps.append(
                    {
                        "re": [float(x) for x in c.coeff.real],
                        "im": [float(x) for x in c.coeff.imag],
                        "mult": int(c.multiplicity),
                    }
                )
        rec = {
            "type": "cylindrical",
            "q": self.q,
            "m": self.m,
            "k0": self.k0,
            "q0": self.q0,
            "components": comps,
        }
        if self.rotation is not None:
            rec["rotation"] = [[float(x) for x in row] for row in self.rotation]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "CylindricalFunction":
        try:
            comps = []
            for c in rec["components"]:
                if c.get("zero"):
                    comps.append(Component(None, int(c["mult"])))
                else:
                    coeff = np.asarray(c["re"], dtype=float) + 1j * np.asarray(c.get("im", [0.0] * len(c["re"])), dtype=float)
                    comps.append(Component(coeff, int(c.get("mult", 1))))
            rot = rec.get("rotation")
            return cls(
                q=int(rec["q"]),
                m=int(rec["m"]),
                k0=int(rec["k0"]),
                q0=int(rec["q0"]),
                components=tuple(comps),
                rotation=None if rot is None else np.asarray(rot, dtype=float),
            )
        except (KeyError, TypeError) as exc:
            raise CylindricalError(f"malformed cylindrical record: {exc!r}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "CylindricalFunction":
        return cls.from_record(json.loads(text))


def cylinder(
    k0: int,
    q0: int,
    coeffs: Sequence[Sequence[complex]],
    multiplicities: Sequence[int] | None = None,
    zero: int = 0,
    rotation: np.ndarray | None = None,
) -> CylindricalFunction:
    """Convenience constructor; ``zero`` is the multiplicity of the zero component."""
    cs = [np.atleast_1d(np.asarray(c, dtype=complex)) for c in coeffs]
    if not cs:
        raise CylindricalError("at least one nonzero coefficient is required")
    m = cs[0].shape[0]
    mults = list(multiplicities) if multiplicities is not None else [1] * len(cs)
    if len(mults) != len(cs):
        raise CylindricalError("one multiplicity per coefficient")
    comps = [Component(c, int(k)) for c, k in zip(cs, mults)]
    if zero:
        comps.append(Component(None, int(zero)))
    q = q0 * sum(mults) + zero
    return CylindricalFunction(q, m, k0, q0, tuple(comps), rotation)


def eval_cyl(phi: CylindricalFunction, X: Sequence[float]) -> AqPoint:
    """phi(X) as a canonical point."""
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise CylindricalError("evaluation point must be finite")
    return make_point(phi.values(X[None, :])[0])


class BranchedSeries:
    """Sum of terms Re(c_t z^(k_t/q0)) evaluated on a common q0-fold cover.

    Each branch l takes ``sum_t Re(c_t r^(k_t/q0) e^(i k_t (theta + 2 pi l)/q0))``,
    so the terms share their branch labelling. q = q0.
    """

    def __init__(self, q0: int, terms: Sequence[tuple[int, Sequence[complex]]]):
        if q0 < 1 or not terms:
            raise CylindricalError("need q0 >= 1 and at least one term")
        self.q0 = int(q0)
        self.terms = [(int(k), np.atleast_1d(np.asarray(c, dtype=complex))) for k, c in terms]
        dims = {c.shape[0] for _, c in self.terms}
        if len(dims) != 1:
            raise CylindricalError("terms must share the target dimension")
        if any(k < 1 for k, _ in self.terms):
            raise CylindricalError("exponents k_t must be positive")
        self.m = dims.pop()
        self.q = self.q0

    def values(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.hypot(pts[:, 0], pts[:, 1])
        theta = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
        ls = np.arange(self.q0)
        out = np.zeros((pts.shape[0], self.q0, self.m))
        safe = np.where(r > 0, r, 1.0)
        for k, c in self.terms:
            a = k / self.q0
            phase = np.exp(1j * a * (theta[:, None] + 2.0 * np.pi * ls[None, :]))
            out += np.real(c[None, None, :] * ((safe**a)[:, None] * phase)[:, :, None])
        out[r == 0] = 0.0
        return out

    __call__ = values

    def to_record(self) -> dict:
        return {
            "type": "series",
            "q0": self.q0,
            "terms": [
                {"k": k, "re": [float(x) for x in c.real], "im": [float(x) for x in c.imag]}
                for k, c in self.terms
            ],
        }


# ---------------------------------------------------------------------------
# Circle distance and the rotation gauge
# ---------------------------------------------------------------------------


def circle_points(n_theta: int, n: int = 2, radius: float = 1.0) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    pts = np.zeros((n_theta, n))
    pts[:, 0] = radius * np.cos(theta)
    pts[:, 1] = radius * np.sin(theta)
    return pts


def _ambient_dim(*phis: CylindricalFunction) -> int:
    dims = {p.rotation.shape[0] for p in phis if p.rotation is not None}
    if len(dims) > 1:
        raise CylindricalError("rotations act on different dimensions")
    return dims.pop() if dims else 2


def circle_distance_sq(phi: CylindricalFunction, psi: CylindricalFunction, n_theta: int = 1024) -> float:
    """Trapezoid quadrature of G(phi(e^{i theta}), psi(e^{i theta}))^2 over [0, 2 pi]."""
    if (phi.q, phi.m, phi.k0, phi.q0) != (psi.q, psi.m, psi.k0, psi.q0):
        raise CylindricalError("circle distance needs matching q, m and degree")
    pts = circle_points(n_theta, _ambient_dim(phi, psi))
    cost = matching_cost_sq(phi.values(pts), psi.values(pts))
    return float(cost.sum() * (2.0 * np.pi / n_theta))


@dataclass(frozen=True)
class GaugeResult:
    b: list[np.ndarray]  # relabeled b: b_out[j] = exp(2 pi i l_j / q0) b[sigma[j]]
    sigma: tuple[int, ...]
    phases: tuple[int, ...]
    cost: float


def canonical_gauge(a: Sequence[np.ndarray], b: Sequence[np.ndarray], q0: int) -> GaugeResult:
    """Relabel ``b`` by a permutation and q0-th roots of unity to best match ``a``.

    Exhaustive over all permutations and phase choices; refuses N > 4 or
    q0 > 4 rather than approximating.
    """
    a = [np.asarray(x, dtype=complex) for x in a]
    b = [np.asarray(x, dtype=complex) for x in b]
    N = len(a)
    if len(b) != N:
        raise CylindricalError(f"coefficient lists differ in length: {N} vs {len(b)}")
    if N == 0:
        return GaugeResult([], (), (), 0.0)
    if N > GAUGE_MAX_N or q0 > GAUGE_MAX_Q0:
        raise CylindricalError(
            f"gauge search is exhaustive only for N <= {GAUGE_MAX_N}, q0 <= {GAUGE_MAX_Q0} (got N={N}, q0={q0})"
        )
    roots = np.exp(2j * np.pi * np.arange(q0) / q0)
    best = None
    for sigma in itertools.permutations(range(N)):
        for ls in itertools.product(range(q0), repeat=N):
            cost = 0.0
            for j in range(N):
                d = a[j] - roots[ls[j]] * b[sigma[j]]
                cost += float(np.vdot(d, d).real)
            if best is None or cost < best[0]:
                best = (cost, sigma, ls)
    cost, sigma, ls = best
    relabeled = [roots[ls[j]] * b[sigma[j]] for j in range(N)]
    return GaugeResult(relabeled, tuple(sigma), tuple(ls), cost)


def gauge_normal_form(coeffs: Sequence[np.ndarray], q0: int) -> list[np.ndarray]:
    """A representative of the gauge orbit of a coefficient list.

    Each coefficient is rotated by a q0-th root of unity so that its first
    non-negligible entry has argument in [-pi/q0, pi/q0); the list is then
    sorted lexicographically on (Re, Im) entries.
    """
    out = []
    for c in coeffs:
        c = np.asarray(c, dtype=complex)
        scale = np.abs(c).max() if c.size else 0.0
        if scale == 0.0:
            out.append(c.copy())
            continue
        k = int(np.argmax(np.abs(c) > 1e-9 * scale))
        ang = np.angle(c[k])
        l = int(np.round(-ang * q0 / (2.0 * np.pi)))
        out.append(c * np.exp(2j * np.pi * l / q0))
    keys = [tuple(np.concatenate([c.real, c.imag]).round(12)) for c in out]
    order = sorted(range(len(out)), key=lambda i: keys[i])
    return [out[i] for i in order]


# ---------------------------------------------------------------------------
# Stationarity of Re(c z^{1/2}) under domain deformations
# ---------------------------------------------------------------------------


def micallef_white_gamma(c: Sequence[complex]) -> complex:
    """gamma = c . c (no conjugation)."""
    c = np.asarray(c, dtype=complex)
    return complex(np.sum(c * c))


def inner_variation_residual_closed(c: Sequence[complex], zeta0: Sequence[float]) -> float:
    """-(pi/2)(Re(gamma) zeta^1(0) - Im(gamma) zeta^2(0)) for w = Re(c z^{1/2})."""
    g = micallef_white_gamma(c)
    return -0.5 * math.pi * (g.real * zeta0[0] - g.imag * zeta0[1])


VectorField = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def bump_field(direction: Sequence[float], support: float = 0.5) -> VectorField:
    """zeta(x) = cos^2(pi r / (2 support)) * direction on B_support, zero outside.

    Returns a callable ``(x1, x2) -> (zeta, jac)`` with ``zeta`` of shape
    (2, ...) and ``jac[j, i] = D_i zeta^j``.
    """
    v = np.asarray(direction, dtype=float)
    k = math.pi / (2.0 * support)

    def field_(x1: np.ndarray, x2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        r = np.hypot(x1, x2)
        inside = r < support
        psi = np.where(inside, np.cos(k * r) ** 2, 0.0)
        # d/dr cos^2(k r) = -k sin(2 k r); chain rule with dr/dx_i = x_i / r
        dpsi = np.where(inside, -k * np.sin(2.0 * k * r), 0.0)
        safe = np.where(r > 0, r, 1.0)
        grad = np.stack([dpsi * x1 / safe, dpsi * x2 / safe])
        zeta = v[:, None] * psi.reshape(1, -1) if np.ndim(psi) == 1 else v.reshape(2, *([1] * psi.ndim)) * psi
        jac = v.reshape(2, 1, *([1] * psi.ndim)) * grad[None]
        return zeta, jac

    return field_


def _variation_integral(c: np.ndarray, zeta: VectorField, eps: float, outer: float, n_r: int, n_theta: int) -> float:
    nodes, weights = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * (outer - eps) * (nodes + 1.0) + eps
    wr = 0.5 * (outer - eps) * weights
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    R, T = np.meshgrid(r, theta, indexing="ij")
    x1, x2 = R * np.cos(T), R * np.sin(T)
    # principal branch; the integrand is quadratic in Dw so the branch does not matter
    zm = (R ** -0.5) * np.exp(-0.5j * T)
    d1 = np.real(0.5 * c[:, None, None] * zm[None])
    d2 = np.real(0.5j * c[:, None, None] * zm[None])
    g11 = np.sum(d1 * d1, axis=0)
    g22 = np.sum(d2 * d2, axis=0)
    g12 = np.sum(d1 * d2, axis=0)
    _, jac = zeta(x1, x2)
    div = jac[0, 0] + jac[1, 1]
    energy = g11 + g22
    stress = g11 * jac[0, 0] + g12 * (jac[1, 0] + jac[0, 1]) + g22 * jac[1, 1]
    integrand = energy * div - 2.0 * stress
    return float(np.sum(integrand * R * wr[:, None]) * (2.0 * np.pi / n_theta))


@dataclass(frozen=True)
class VariationEstimate:
    value: float
    raw: tuple[float, ...]
    eps: tuple[float, ...]
    spread: float


def inner_variation_residual_numeric(
    c: Sequence[complex],
    zeta: VectorField | None = None,
    eps_list: Sequence[float] = (0.02, 0.01),
    outer: float = 0.5,
    n_r: int = 64,
    n_theta: int = 256,
    order: int = 2,
    rel_tol: float = 0.05,
) -> VariationEstimate:
    """d/dt at t=0 of the energy of w(X + t zeta(X)) for w = Re(c z^{1/2}).

    This is minus the stress integral of |Dw|^2 D_i zeta^i - 2 D_i w . D_j w D_i zeta^j.
    The integral over the annulus eps < r < outer is computed by
    Gauss-Legendre in r and the trapezoid rule in theta, then extrapolated
    to eps -> 0 from the last two cutoffs assuming an O(eps^order) error.
    The O(eps) term vanishes after angular averaging, hence ``order=2``.
    Raises :class:`DiagnosticError` when the extrapolated values from
    successive pairs disagree by more than ``rel_tol * pi/2``.
    """
    cvec = np.atleast_1d(np.asarray(c, dtype=complex))
    if zeta is None:
        zeta = bump_field((1.0, 0.0), outer)
    eps = sorted((float(e) for e in eps_list), reverse=True)
    if len(eps) < 2 or eps[-1] <= 0:
        raise CylindricalError("need at least two positive cutoffs")
    raw = [-_variation_integral(cvec, zeta, e, outer, n_r, n_theta) for e in eps]
    extrap = []
    for (e1, i1), (e2, i2) in zip(zip(eps, raw), zip(eps[1:], raw[1:])):
        t = (e2 / e1) ** order
        extrap.append((i2 - t * i1) / (1.0 - t))
    spread = max(extrap) - min(extrap) if len(extrap) > 1 else abs(extrap[0] - raw[-1])
    if spread > rel_tol * math.pi / 2:
        raise DiagnosticError(f"inner variation extrapolation spread {spread:.3g} exceeds tolerance")
    return VariationEstimate(extrap[-1], tuple(raw), tuple(eps), spread)


# ---------------------------------------------------------------------------
# The family u_k = ((x1 + i x2)^q - 1/k)^{1/q}
# ---------------------------------------------------------------------------


class RootField:
    """X -> the q complex q-th roots of (x1 + i x2)^q - 1/k, as points of R^2."""

    def __init__(self, q: int, k: float):
        if q < 2:
            raise CylindricalError("the root family needs q >= 2")
        if not k > 0:
            raise CylindricalError("k must be positive")
        self.q = int(q)
        self.k = float(k)
        self.m = 2

    def values(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        z = pts[:, 0] + 1j * pts[:, 1]
        w = z**self.q - 1.0 / self.k
        mod = np.abs(w) ** (1.0 / self.q)
        ang = np.angle(w)
        js = np.arange(self.q)
        roots = mod[:, None] * np.exp(1j * (ang[:, None] + 2.0 * np.pi * js[None, :]) / self.q)
        roots[w == 0] = 0.0
        return np.stack([roots.real, roots.imag], axis=-1)

    __call__ = values

    def branch_points(self) -> np.ndarray:
        """Points where (x1 + i x2)^q = 1/k."""
        rad = self.k ** (-1.0 / self.q)
        ang = 2.0 * np.pi * np.arange(self.q) / self.q
        return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)

    def to_record(self) -> dict:
        return {"type": "uk", "q": self.q, "k": self.k}


def example_uk(q: int, k: float) -> RootField:
    return RootField(q, k)


class SumField:
    """The q-valued map X -> sum_j [[f_j(X)]]: values of the parts concatenated."""

    def __init__(self, parts: Sequence):
        if not parts:
            raise CylindricalError("a sum needs at least one part")
        dims = {p.m for p in parts}
        if len(dims) != 1:
            raise CylindricalError(f"parts have different target dimensions {sorted(dims)}")
        self.parts = list(parts)
        self.m = dims.pop()
        self.q = sum(p.q for p in parts)

    def values(self, points: np.ndarray) -> np.ndarray:
        return np.concatenate([p.values(points) for p in self.parts], axis=1)

    __call__ = values

    def to_record(self) -> dict:
        return {"type": "sum", "parts": [p.to_record() for p in self.parts]}


def evaluator_from_record(rec: dict):
    """Build a vectorized evaluator from a generator record."""
    kind = rec.get("type")
    if kind == "cylindrical":
        return CylindricalFunction.from_record(rec)
    if kind == "uk":
        return RootField(int(rec["q"]), float(rec["k"]))
    if kind == "series":
        terms = [
            (int(t["k"]), np.asarray(t["re"], dtype=float) + 1j * np.asarray(t.get("im", [0.0] * len(t["re"])), dtype=float))
            for t in rec["terms"]
        ]
        return BranchedSeries(int(rec["q0"]), terms)
    if kind == "sum":
        parts = rec.get("parts")
        if not parts:
            raise CylindricalError("a sum record needs a nonempty 'parts' list")
        return SumField([evaluator_from_record(p) for p in parts])
    raise CylindricalError(f"unknown generator type {kind!r}")
