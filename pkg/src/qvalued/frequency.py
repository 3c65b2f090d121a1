"""Frequency function, Weiss quantity and related radial identities.

For a field u and a centre Y::

    D(rho) = rho^(2-n) int_{B_rho(Y)} |Du|^2
    H(rho) = rho^(1-n) int_{dB_rho(Y)} |u|^2
    N(rho) = D / H
    W(rho) = rho^(-2 alpha) (D - alpha H)

Energy integrals near a branch point carry a quadrature error of order
h^(2 alpha), which at moderate resolution dominates the O(h^2) error
elsewhere. :func:`energy_integral` therefore evaluates the ball integral
on the grid and on its 2h and 4h subgrids (aligned so the centre's node is
kept) and extrapolates when the three values show a clean geometric
convergence.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .qfield import (
    BallSpec,
    FieldError,
    Grid,
    QField,
    ball,
    energy_ball,
    l2_sq_ball,
    sample_shell,
    shell_integral,
)

H_FLOOR = 1e-14
# Convergence ratios accepted for extrapolation: orders p in about [0.26, 2.17].
_RATIO_RANGE = (1.2, 4.5)
# Partial-cell subsamples per axis for energy integrals; the coarse levels
# need finer clipping than the default so boundary noise does not spoil
# the convergence ratio.
EXTRAP_SUB = 16


class ZeroTraceError(FieldError):
    """H vanishes (numerically): the frequency is undefined."""


def subgrid(u: QField, stride: int, anchor: Sequence[float]) -> QField:
    """Every ``stride``-th node, keeping the node nearest to ``anchor``."""
    g = u.grid
    idx = np.rint((np.asarray(anchor, dtype=float) - g.lo) / g.h).astype(int)
    off = np.mod(idx, stride)
    sl = tuple(slice(int(o), None, stride) for o in off)
    data = u.data[sl]
    origin = tuple(float(o + k * g.h) for o, k in zip(g.origin, off))
    return QField(Grid(origin, g.h * stride, data.shape[: g.n]), data)


@dataclass(frozen=True)
class Extrapolated:
    value: float
    levels: tuple[float, ...]
    ratio: float | None
    used: bool


def energy_integral(
    u: QField, B: BallSpec, weight=None, extrapolate: bool = True, sub: int = EXTRAP_SUB
) -> Extrapolated:
    """int_B |Du|^2 (times ``weight(R)`` if given), with optional extrapolation in h."""
    fine = energy_ball(u, B, weight=weight, sub=sub)
    if not extrapolate or B.radius < 16.0 * u.h:
        return Extrapolated(fine, (fine,), None, False)
    try:
        mid = energy_ball(subgrid(u, 2, B.center), B, weight=weight, sub=sub)
        coarse = energy_ball(subgrid(u, 4, B.center), B, weight=weight, sub=sub)
    except FieldError:
        return Extrapolated(fine, (fine,), None, False)
    d1, d2 = fine - mid, mid - coarse
    if d1 == 0.0:
        return Extrapolated(fine, (fine, mid, coarse), None, False)
    r = d2 / d1
    if not (_RATIO_RANGE[0] <= r <= _RATIO_RANGE[1]):
        return Extrapolated(fine, (fine, mid, coarse), r, False)
    t = min(r, 4.0)
    return Extrapolated(fine + d1 / (t - 1.0), (fine, mid, coarse), r, True)


def D_of(u: QField, Y: Sequence[float], rho: float, extrapolate: bool = True) -> float:
    if rho < 4.0 * u.h:
        raise FieldError(f"radius {rho:g} is below the resolution floor 4h = {4 * u.h:g}")
    return rho ** (2 - u.n) * energy_integral(u, ball(Y, rho), extrapolate=extrapolate).value


def H_of(u: QField, Y: Sequence[float], rho: float, count: int | None = None) -> float:
    if rho < 4.0 * u.h:
        raise FieldError(f"radius {rho:g} is below the resolution floor 4h = {4 * u.h:g}")
    return rho ** (1 - u.n) * shell_integral(u, ball(Y, rho), "u2", count)


def H_volume(u: QField, Y: Sequence[float], rho: float, extrapolate: bool = True) -> float:
    """H from the volume form n rho^-n int |u|^2 + rho^-n int (rho^2 - R^2)|Du|^2."""
    B = ball(Y, rho)
    mass = l2_sq_ball(u, B)
    weighted = energy_integral(u, B, weight=lambda R: rho * rho - R * R, extrapolate=extrapolate).value
    return (u.n * mass + weighted) / rho**u.n


def _check_trace(u: QField, H: float) -> None:
    sup = float(np.max(np.abs(u.data))) if u.data.size else 0.0
    if H < H_FLOOR or H <= H_FLOOR * sup * sup:
        raise ZeroTraceError(f"zero boundary trace: H = {H:.3g}")


def N_of(u: QField, Y: Sequence[float], rho: float, extrapolate: bool = True) -> float:
    H = H_of(u, Y, rho)
    _check_trace(u, H)
    return D_of(u, Y, rho, extrapolate) / H


def weiss(u: QField, Y: Sequence[float], rho: float, alpha: float, extrapolate: bool = True) -> float:
    """rho^(-2 alpha) (D - alpha H)."""
    D = D_of(u, Y, rho, extrapolate)
    H = H_of(u, Y, rho)
    return rho ** (-2.0 * alpha) * (D - alpha * H)


@dataclass(frozen=True)
class FrequencyProfile:
    center: tuple[float, ...]
    radii: np.ndarray
    D: np.ndarray
    H: np.ndarray
    N: np.ndarray
    W: np.ndarray
    alpha: float

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(f"# {header}\n")
        buf.write("rho,D,H,N,W\n")
        for row in zip(self.radii, self.D, self.H, self.N, self.W):
            buf.write(",".join(f"{x:.12g}" for x in row) + "\n")
        return buf.getvalue()


def profile(
    u: QField,
    Y: Sequence[float],
    radii: Sequence[float],
    alpha: float | None = None,
    extrapolate: bool = True,
) -> FrequencyProfile:
    """Tabulate D, H, N, W over increasing radii.

    Without ``alpha`` the Weiss quantity uses the frequency at the smallest
    radius as the degree.
    """
    rs = _check_radii(radii)
    D = np.array([D_of(u, Y, r, extrapolate) for r in rs])
    H = np.array([H_of(u, Y, r) for r in rs])
    return assemble_profile(u, Y, rs, D, H, alpha)


def _check_radii(radii: Sequence[float]) -> np.ndarray:
    rs = np.asarray(radii, dtype=float)
    if rs.ndim != 1 or rs.size == 0 or np.any(np.diff(rs) <= 0):
        raise FieldError("radii must be a nonempty strictly increasing list")
    return rs


def assemble_profile(
    u: QField, Y: Sequence[float], radii: Sequence[float], D: np.ndarray, H: np.ndarray, alpha: float | None = None
) -> FrequencyProfile:
    """Build the profile from precomputed D and H values."""
    rs = _check_radii(radii)
    D, H = np.asarray(D, dtype=float), np.asarray(H, dtype=float)
    for h_ in H:
        _check_trace(u, h_)
    N = D / H
    a = float(N[0]) if alpha is None else float(alpha)
    W = rs ** (-2.0 * a) * (D - a * H)
    return FrequencyProfile(tuple(float(y) for y in Y), rs, D, H, N, W, a)


@dataclass(frozen=True)
class Violation:
    quantity: str
    index: int
    rho: tuple[float, float]
    drop: float


def check_monotone(prof: FrequencyProfile, tol: float = 0.01) -> list[Violation]:
    """Adjacent radii where N drops by more than ``tol`` or W by more than
    ``tol * max(1, max |W|)``."""
    out = []
    w_scale = tol * max(1.0, float(np.max(np.abs(prof.W))))
    for i in range(len(prof.radii) - 1):
        pair = (float(prof.radii[i]), float(prof.radii[i + 1]))
        dn = float(prof.N[i] - prof.N[i + 1])
        if dn > tol:
            out.append(Violation("N", i, pair, dn))
        dw = float(prof.W[i] - prof.W[i + 1])
        if dw > w_scale:
            out.append(Violation("W", i, pair, dw))
    return out


@dataclass(frozen=True)
class DoublingCheck:
    sigma: float
    rho: float
    lower: float  # (sigma/rho)^(2 N(rho)) H(rho)
    value: float  # H(sigma)
    upper: float  # (sigma/rho)^(2 N_min) H(rho)

    def holds(self, rel: float = 0.05) -> bool:
        return self.lower * (1 - rel) <= self.value <= self.upper * (1 + rel)


def doubling_checks(prof: FrequencyProfile) -> list[DoublingCheck]:
    """Two-sided doubling bounds for every pair of radii, using N at the
    smallest radius as the frequency at the centre."""
    n0 = float(prof.N[0])
    out = []
    for j in range(len(prof.radii)):
        for i in range(j):
            s, r = float(prof.radii[i]), float(prof.radii[j])
            out.append(
                DoublingCheck(
                    s,
                    r,
                    (s / r) ** (2 * prof.N[j]) * prof.H[j],
                    float(prof.H[i]),
                    (s / r) ** (2 * n0) * prof.H[j],
                )
            )
    return out


def radial_excess_energy(
    u: QField,
    Y: Sequence[float],
    alpha: float,
    annulus: tuple[float, float],
    n_radii: int = 16,
    count: int | None = None,
) -> float:
    """int over rho1 < R < rho2 of R^(2-n) |d/dR (u / R^alpha)|^2.

    Radial derivatives are centred differences along rays of matched
    sheets; the radial integral uses Gauss-Legendre nodes.
    """
    r1, r2 = map(float, annulus)
    if not (4.0 * u.h <= r1 < r2):
        raise FieldError(f"annulus ({r1:g}, {r2:g}) must satisfy 4h <= r1 < r2")
    x, w = np.polynomial.legendre.leggauss(n_radii)
    rs = 0.5 * (r2 - r1) * (x + 1.0) + r1
    ws = 0.5 * (r2 - r1) * w
    total = 0.0
    for R, wt in zip(rs, ws):
        s = sample_shell(u, ball(Y, R), count)
        d = R**-alpha * (s.radial - alpha * s.values / R)
        total += wt * R ** (2 - u.n) * float(np.sum(d * d)) * s.weight
    return total


def energy_identity_residual(u: QField, Y: Sequence[float], rho: float) -> float:
    """|int_B |Du|^2 - int_dB u . D_R u| / int_B |Du|^2."""
    B = ball(Y, rho)
    vol = energy_integral(u, B).value
    surf = shell_integral(u, B, "u_dru")
    return abs(vol - surf) / vol


def energy_derivative_residual(u: QField, Y: Sequence[float], rho: float, step: float | None = None) -> float:
    """Relative mismatch of d/drho D(rho) against 2 rho^(2-n) int_dB |D_R u|^2."""
    step = 2.0 * u.h if step is None else step
    lhs = (D_of(u, Y, rho + step) - D_of(u, Y, rho - step)) / (2.0 * step)
    rhs = 2.0 * rho ** (2 - u.n) * shell_integral(u, ball(Y, rho), "dr2")
    return abs(lhs - rhs) / abs(rhs)
