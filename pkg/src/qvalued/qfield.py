"""q-valued fields sampled on uniform grids.

A :class:`QField` stores one ``(q, m)`` tuple per node of an axis-aligned
grid in R^n (n = 2 or 3). Tuples are kept in raw slot order; every
operation that compares tuples goes through optimal matching, so the slot
order carries no meaning.

Quadrature conventions:

* L^2 integrals use node-centred cells of side h, weighted by the fraction
  of the cell inside the ball (estimated by ``sub^n`` subsamples).
* Energy integrals use the grid cells (corners at nodes). The energy
  density of a cell is, per direction, the mean over its parallel edges of
  ``G(u_a, u_b)^2 / h^2``.
* Sphere integrals sample the shell at uniform angles (n = 2) or on a
  Fibonacci sphere (n = 3) and interpolate multilinearly after matching
  the corner tuples to one reference corner.
"""

from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .aq_space import AqPoint, apply_perm, make_point, match_tuples, matching_cost_sq, pairwise_sq

MAGIC = b"QFLD1\n"
DEFAULT_N_THETA = 720
DEFAULT_N_SPHERE = 2048
DEFAULT_SUB = 4


class FieldError(ValueError):
    """Invalid grid, field or integration request."""


@dataclass(frozen=True)
class Grid:
    origin: tuple[float, ...]
    h: float
    dims: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.origin) != len(self.dims) or len(self.dims) not in (2, 3):
            raise FieldError("grids must be 2- or 3-dimensional")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise FieldError(f"grid spacing must be positive, got {self.h}")
        if any(d < 2 for d in self.dims):
            raise FieldError(f"need at least 2 nodes per axis, got {self.dims}")

    @property
    def n(self) -> int:
        return len(self.dims)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.h * (np.asarray(self.dims) - 1)

    def axes(self) -> list[np.ndarray]:
        return [o + self.h * np.arange(d) for o, d in zip(self.origin, self.dims)]

    def points(self) -> np.ndarray:
        """Node coordinates in C order, shape (N, n)."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([c.ravel() for c in mesh], axis=-1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.dims, dtype=bool)
        for ax in range(self.n):
            sl = [slice(None)] * self.n
            sl[ax] = 0
            mask[tuple(sl)] = True
            sl[ax] = -1
            mask[tuple(sl)] = True
        return mask


def box_grid(lo: float | Sequence[float] = -1.0, hi: float | Sequence[float] = 1.0, h: float = 2.0 / 256, n: int = 2) -> Grid:
    """Grid with spacing h covering [lo, hi] per axis (rounded to whole cells)."""
    lo_v = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
    hi_v = np.broadcast_to(np.asarray(hi, dtype=float), (n,))
    cells = np.rint((hi_v - lo_v) / h).astype(int)
    if np.any(cells < 1):
        raise FieldError("empty box")
    return Grid(tuple(float(x) for x in lo_v), float(h), tuple(int(c) + 1 for c in cells))


@dataclass(frozen=True)
class BallSpec:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self) -> None:
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise FieldError(f"ball radius must be positive, got {self.radius}")


def ball(center: Sequence[float], radius: float) -> BallSpec:
    return BallSpec(tuple(float(c) for c in center), float(radius))


@dataclass(frozen=True, eq=False)
class QField:
    grid: Grid
    data: np.ndarray  # (*dims, q, m)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim != self.grid.n + 2 or arr.shape[: self.grid.n] != self.grid.dims:
            raise FieldError(f"data shape {arr.shape} does not fit grid {self.grid.dims}")
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0][: self.grid.n]
            raise FieldError(f"non-finite value at node {tuple(int(i) for i in bad)}")
        if arr is self.data and arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def q(self) -> int:
        return self.data.shape[-2]

    @property
    def m(self) -> int:
        return self.data.shape[-1]

    @property
    def h(self) -> float:
        return self.grid.h

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        return self.grid.boundary_mask()

    def at(self, index: Sequence[int]) -> AqPoint:
        return make_point(self.data[tuple(index)])

    def with_data(self, data: np.ndarray) -> "QField":
        return QField(self.grid, data)

    def scaled(self, lam: float) -> "QField":
        return QField(self.grid, lam * self.data)

    @cached_property
    def edge_costs(self) -> tuple[np.ndarray, ...]:
        """Per direction d, G(u_i, u_{i+e_d})^2 on every edge."""
        out = []
        for ax in range(self.n):
            a = np.take(self.data, np.arange(self.grid.dims[ax] - 1), axis=ax)
            b = np.take(self.data, np.arange(1, self.grid.dims[ax]), axis=ax)
            out.append(matching_cost_sq(a, b))
        return tuple(out)

    @cached_property
    def energy_density(self) -> np.ndarray:
        """Cell-centred |Du|^2 estimate, shape (dims - 1)."""
        h2 = self.h**2
        dens = np.zeros(tuple(d - 1 for d in self.grid.dims))
        for ax, cost in enumerate(self.edge_costs):
            # average the 2^(n-1) parallel edges bounding each cell
            acc = cost
            for other in range(self.n):
                if other == ax:
                    continue
                k = acc.shape[other]
                acc = 0.5 * (np.take(acc, np.arange(k - 1), axis=other) + np.take(acc, np.arange(1, k), axis=other))
            dens += acc / h2
        return dens


Evaluator = Callable[[np.ndarray], np.ndarray]


def _evaluate(f, pts: np.ndarray) -> np.ndarray:
    if hasattr(f, "values"):
        return np.asarray(f.values(pts), dtype=float)
    return np.stack([np.asarray(_as_values(f(x)), dtype=float) for x in pts])


def _as_values(v) -> np.ndarray:
    return v.values if isinstance(v, AqPoint) else np.asarray(v, dtype=float)


def sample_field(f, grid: Grid) -> QField:
    """Evaluate ``f`` at every node.

    ``f`` is either an object with a vectorized ``values(points)`` method
    returning (P, q, m), or a callable X -> AqPoint.
    """
    pts = grid.points()
    try:
        vals = _evaluate(f, pts)
    except Exception as exc:
        # locate the failing node by evaluating one at a time
        for k, x in enumerate(pts):
            try:
                _evaluate(f, x[None, :])
            except Exception as inner:
                idx = np.unravel_index(k, grid.dims)
                raise FieldError(f"evaluator failed at node {tuple(int(i) for i in idx)}: {inner}") from inner
        raise FieldError(f"evaluator failed: {exc}") from exc
    if vals.ndim != 3 or vals.shape[0] != pts.shape[0]:
        raise FieldError(f"evaluator returned shape {vals.shape}, expected (P, q, m)")
    bad = ~np.all(np.isfinite(vals), axis=(1, 2))
    if np.any(bad):
        idx = np.unravel_index(int(np.argmax(bad)), grid.dims)
        raise FieldError(f"evaluator returned non-finite values at node {tuple(int(i) for i in idx)}")
    return QField(grid, vals.reshape(grid.dims + vals.shape[1:]))


# ---------------------------------------------------------------------------
# Ball quadrature
# ---------------------------------------------------------------------------


def _check_inside(grid: Grid, B: BallSpec, margin: float = 0.0) -> np.ndarray:
    Y = np.asarray(B.center, dtype=float)
    if Y.shape != (grid.n,):
        raise FieldError(f"center has dimension {Y.shape[0]}, grid has {grid.n}")
    r = B.radius + margin
    if np.any(Y - r < grid.lo - 1e-12 * grid.h) or np.any(Y + r > grid.hi + 1e-12 * grid.h):
        raise FieldError(f"ball B_{B.radius:g}({tuple(Y)}) escapes the grid box")
    return Y


def _fraction_inside(centers: np.ndarray, Y: np.ndarray, rho: float, h: float, sub: int) -> np.ndarray:
    """Fraction of the cube of side h about each centre lying in B_rho(Y)."""
    n = centers.shape[1]
    d = centers - Y
    dist = np.sqrt(np.sum(d * d, axis=1))
    half_diag = 0.5 * h * math.sqrt(n)
    frac = np.where(dist + half_diag <= rho, 1.0, 0.0)
    partial = np.flatnonzero((dist + half_diag > rho) & (dist - half_diag < rho))
    if partial.size:
        offs1 = (np.arange(sub) + 0.5) / sub - 0.5
        offs = np.stack(np.meshgrid(*([offs1] * n), indexing="ij"), axis=-1).reshape(-1, n) * h
        sp = d[partial][:, None, :] + offs[None, :, :]
        frac[partial] = np.mean(np.sum(sp * sp, axis=-1) <= rho * rho, axis=1)
    return frac


def _window(grid: Grid, Y: np.ndarray, rho: float, cells: bool) -> tuple[tuple[slice, ...], list[np.ndarray]]:
    """Index window covering B_rho(Y) and the coordinates of its centres."""
    h = grid.h
    sls, axes = [], []
    for ax in range(grid.n):
        top = grid.dims[ax] - (1 if cells else 0)
        shift = 0.5 * h if cells else 0.0
        lo = max(0, int(math.floor((Y[ax] - rho - shift - grid.origin[ax]) / h)) - 1)
        hi = min(top, int(math.ceil((Y[ax] + rho - shift - grid.origin[ax]) / h)) + 2)
        sls.append(slice(lo, hi))
        axes.append(grid.origin[ax] + shift + h * np.arange(lo, hi))
    return tuple(sls), axes


def ball_weights(
    grid: Grid,
    B: BallSpec,
    cells: bool = False,
    sub: int = DEFAULT_SUB,
    weight: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[tuple[slice, ...], np.ndarray]:
    """Quadrature weights for integrals over B on nodes (or grid cells).

    Returns ``(window, w)``: integrate ``f`` as ``sum(w * f[window])``. With
    ``weight`` given, the weights include ``weight(R)`` evaluated at the
    cell centre, R being the distance to the ball centre.
    """
    Y = _check_inside(grid, B)
    win, axes = _window(grid, Y, B.radius, cells)
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([c.ravel() for c in mesh], axis=-1)
    frac = _fraction_inside(centers, Y, B.radius, grid.h, sub)
    w = frac * grid.h**grid.n
    if weight is not None:
        R = np.sqrt(np.sum((centers - Y) ** 2, axis=1))
        w = w * weight(R)
    return win, w.reshape(mesh[0].shape)


def l2_sq_ball(u: QField, B: BallSpec, sub: int = DEFAULT_SUB) -> float:
    """Integral of |u|^2 = sum_j |u_j|^2 over B."""
    win, w = ball_weights(u.grid, B, sub=sub)
    vals = u.data[win]
    return float(np.sum(w * np.sum(vals * vals, axis=(-2, -1))))


def dist_sq_ball(u: QField, v: QField, B: BallSpec, sub: int = DEFAULT_SUB) -> float:
    """Integral of G(u, v)^2 over B."""
    if u.grid != v.grid:
        raise FieldError("fields live on different grids")
    if u.data.shape != v.data.shape:
        raise FieldError(f"fields have different (q, m): {u.data.shape[-2:]} vs {v.data.shape[-2:]}")
    win, w = ball_weights(u.grid, B, sub=sub)
    return float(np.sum(w * matching_cost_sq(u.data[win], v.data[win])))


def energy_ball(u: QField, B: BallSpec, sub: int = DEFAULT_SUB, weight=None) -> float:
    """Integral of |Du|^2 (optionally times weight(R)) over B."""
    win, w = ball_weights(u.grid, B, cells=True, sub=sub, weight=weight)
    return float(np.sum(w * u.energy_density[win]))


def grad_energy_density(u: QField) -> np.ndarray:
    """Per-cell energy: cell-centred |Du|^2 times the cell volume h^n."""
    return u.energy_density * u.h**u.n


# ---------------------------------------------------------------------------
# Interpolation and shells
# ---------------------------------------------------------------------------


def interpolate(u: QField, pts: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
    """Matched multilinear interpolation at ``pts`` (P, n) -> (P, q, m).

    The tuples at the 2^n corners of the enclosing cell are matched to the
    lowest corner and combined sheet by sheet. If ``reference`` (P, q, m)
    is given, the result is reordered to match it.
    """
    g = u.grid
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    rel = (pts - g.lo) / g.h
    if np.any(rel < -1e-9) or np.any(rel > np.asarray(g.dims) - 1 + 1e-9):
        raise FieldError("interpolation point outside the grid box")
    base = np.clip(np.floor(rel).astype(int), 0, np.asarray(g.dims) - 2)
    t = np.clip(rel - base, 0.0, 1.0)
    corner0 = u.data[tuple(base.T)]
    out = np.zeros_like(corner0)
    for bits in itertools.product((0, 1), repeat=g.n):
        idx = base + np.asarray(bits)
        vals = u.data[tuple(idx.T)]
        if any(bits):
            _, perm = match_tuples(corner0, vals)
            vals = apply_perm(vals, perm)
        wt = np.ones(pts.shape[0])
        for ax, b in enumerate(bits):
            wt = wt * (t[:, ax] if b else 1.0 - t[:, ax])
        out += wt[:, None, None] * vals
    if reference is not None:
        _, perm = match_tuples(reference, out)
        out = apply_perm(out, perm)
    return out


def sphere_directions(n: int, count: int | None = None) -> np.ndarray:
    """Unit directions with equal quadrature weights."""
    if n == 2:
        k = count or DEFAULT_N_THETA
        th = 2.0 * np.pi * np.arange(k) / k
        return np.stack([np.cos(th), np.sin(th)], axis=-1)
    if n == 3:
        k = count or DEFAULT_N_SPHERE
        i = np.arange(k) + 0.5
        z = 1.0 - 2.0 * i / k
        phi = np.pi * (1.0 + math.sqrt(5.0)) * i
        s = np.sqrt(1.0 - z * z)
        return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
    raise FieldError(f"unsupported dimension {n}")


def sphere_area(n: int, rho: float) -> float:
    return 2.0 * math.pi * rho if n == 2 else 4.0 * math.pi * rho * rho


@dataclass(frozen=True)
class ShellSample:
    """Matched values on a sphere and their radial derivatives."""

    points: np.ndarray  # (P, n)
    directions: np.ndarray  # (P, n)
    values: np.ndarray  # (P, q, m)
    radial: np.ndarray  # (P, q, m), D_R u per matched sheet
    weight: float  # surface measure per sample


def sample_shell(
    u: QField,
    B: BallSpec,
    count: int | None = None,
    dr: float | None = None,
    floor: float = 2.0,
) -> ShellSample:
    """Values and centred radial differences on the sphere dB.

    The inner and outer samples at R -/+ dr are matched to the value on the
    sphere before differencing. Requires ``B.radius >= floor * h``.
    """
    if B.radius < floor * u.h:
        raise FieldError(f"radius {B.radius:g} is below the resolution floor {floor:g}h")
    dr = u.h if dr is None else dr
    Y = _check_inside(u.grid, B, margin=dr)
    dirs = sphere_directions(u.n, count)
    pts = Y + B.radius * dirs
    mid = interpolate(u, pts)
    inner = interpolate(u, Y + (B.radius - dr) * dirs, reference=mid)
    outer = interpolate(u, Y + (B.radius + dr) * dirs, reference=mid)
    radial = (outer - inner) / (2.0 * dr)
    return ShellSample(pts, dirs, mid, radial, sphere_area(u.n, B.radius) / dirs.shape[0])


INTEGRANDS = {
    "u2": lambda s: np.sum(s.values**2, axis=(1, 2)),
    "dr2": lambda s: np.sum(s.radial**2, axis=(1, 2)),
    "u_dru": lambda s: np.sum(s.values * s.radial, axis=(1, 2)),
}


def shell_integral(u: QField, B: BallSpec, integrand: str = "u2", count: int | None = None) -> float:
    """Surface integral over dB of |u|^2 ("u2"), |D_R u|^2 ("dr2") or u . D_R u ("u_dru")."""
    if integrand not in INTEGRANDS:
        raise FieldError(f"unknown integrand {integrand!r}; choose from {sorted(INTEGRANDS)}")
    if integrand == "u2":
        if B.radius < 2.0 * u.h:
            raise FieldError(f"radius {B.radius:g} is below the resolution floor 2h")
        _check_inside(u.grid, B)
        dirs = sphere_directions(u.n, count)
        vals = interpolate(u, np.asarray(B.center) + B.radius * dirs)
        return float(np.sum(vals**2) * sphere_area(u.n, B.radius) / dirs.shape[0])
    s = sample_shell(u, B, count)
    return float(np.sum(INTEGRANDS[integrand](s)) * s.weight)


# ---------------------------------------------------------------------------
# Branch points
# ---------------------------------------------------------------------------


def min_pair_distance(data: np.ndarray) -> np.ndarray:
    """Smallest distance between two values of each tuple (0 if two coincide)."""
    q = data.shape[-2]
    if q == 1:
        return np.full(data.shape[:-2], np.inf)
    d = pairwise_sq(data, data)
    iu = np.triu_indices(q, k=1)
    return np.sqrt(d[..., iu[0], iu[1]].min(axis=-1))


def default_threshold(h: float, alpha: float | None = None) -> float:
    """3 h^alpha for a known local degree alpha, otherwise 3 sqrt(h)."""
    return 3.0 * h ** (0.5 if alpha is None else alpha)


def _loop_monodromy(data: np.ndarray, loop: list[tuple[int, ...]]) -> bool:
    """Transport the sheet labels around ``loop``; True if they come back permuted."""
    cur = data[loop[0]]
    start = cur
    for idx in loop[1:] + [loop[0]]:
        nxt = data[idx]
        _, perm = match_tuples(cur, nxt)
        cur = apply_perm(nxt, perm)
    # cur now holds the start tuple relabeled by the transport
    return not np.array_equal(cur, start)


def _rectangle_loop(lo: Sequence[int], hi: Sequence[int], plane: tuple[int, int], fixed: dict[int, int], n: int) -> list[tuple[int, ...]]:
    a, b = plane
    path = []

    def node(i, j):
        idx = [0] * n
        idx[a], idx[b] = i, j
        for k, v in fixed.items():
            idx[k] = v
        return tuple(idx)

    for i in range(lo[a], hi[a]):
        path.append(node(i, lo[b]))
    for j in range(lo[b], hi[b]):
        path.append(node(hi[a], j))
    for i in range(hi[a], lo[a], -1):
        path.append(node(i, hi[b]))
    for j in range(hi[b], lo[b], -1):
        path.append(node(lo[a], j))
    return path


@dataclass(frozen=True)
class BranchCluster:
    centroid: np.ndarray
    nodes: np.ndarray  # (k, n) node indices
    min_separation: float


def detect_branch_points(u: QField, tau: float | None = None, alpha: float | None = None) -> list[BranchCluster]:
    """Clusters of near-collision nodes around which the sheets are permuted.

    Nodes whose two closest values are within ``tau`` form the candidate
    set; connected clusters are kept when transporting the sheets around
    the boundary of the cluster's bounding box (enlarged by one node) gives
    a nontrivial permutation. In 3-d the loop is taken in each coordinate
    plane through the middle of the cluster. The centroid weights each node
    by ``tau - separation``.
    """
    if tau is None:
        tau = default_threshold(u.h, alpha)
    if not tau > 0:
        raise FieldError("threshold must be positive")
    if u.q == 1:
        return []
    sep = min_pair_distance(u.data)
    cand = sep < tau
    labels, count = ndimage.label(cand, structure=np.ones((3,) * u.n, dtype=bool))
    dims = np.asarray(u.grid.dims)
    out = []
    for lab in range(1, count + 1):
        idx = np.argwhere(labels == lab)
        lo = np.maximum(idx.min(axis=0) - 1, 0)
        hi = np.minimum(idx.max(axis=0) + 1, dims - 1)
        mid = (idx.min(axis=0) + idx.max(axis=0)) // 2
        found = False
        for plane in itertools.combinations(range(u.n), 2):
            if hi[plane[0]] == lo[plane[0]] or hi[plane[1]] == lo[plane[1]]:
                continue
            fixed = {k: int(mid[k]) for k in range(u.n) if k not in plane}
            loop = _rectangle_loop(lo, hi, plane, fixed, u.n)
            if _loop_monodromy(u.data, loop):
                found = True
                break
        if not found:
            continue
        s = sep[tuple(idx.T)]
        w = tau - s
        pos = u.grid.lo + u.h * idx
        centroid = (w[:, None] * pos).sum(axis=0) / w.sum()
        out.append(BranchCluster(centroid, idx, float(s.min())))
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _header(u: QField) -> bytes:
    g = u.grid
    lines = [
        f"n={g.n}",
        f"q={u.q}",
        f"m={u.m}",
        "dims=" + ",".join(str(d) for d in g.dims),
        "origin=" + ",".join(repr(float(o)) for o in g.origin),
        f"h={float(g.h)!r}",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def dumps_field(u: QField) -> bytes:
    body = np.ascontiguousarray(u.data, dtype="<f8").tobytes(order="C")
    return MAGIC + _header(u) + body


def loads_field(blob: bytes) -> QField:
    if not blob.startswith(MAGIC):
        raise FieldError("not a QFLD1 file (bad magic)")
    stream = io.BytesIO(blob[len(MAGIC) :])
    meta = {}
    for key in ("n", "q", "m", "dims", "origin", "h"):
        line = stream.readline().decode("ascii", errors="replace").strip()
        k, sep, v = line.partition("=")
        if not sep or k != key:
            raise FieldError(f"malformed QFLD1 header: expected {key}=..., got {line!r}")
        meta[k] = v
    try:
        n, q, m = int(meta["n"]), int(meta["q"]), int(meta["m"])
        dims = tuple(int(x) for x in meta["dims"].split(","))
        origin = tuple(float(x) for x in meta["origin"].split(","))
        h = float(meta["h"])
    except ValueError as exc:
        raise FieldError(f"malformed QFLD1 header: {exc}") from None
    if len(dims) != n or len(origin) != n:
        raise FieldError("QFLD1 header dimension mismatch")
    body = stream.read()
    count = int(np.prod(dims)) * q * m
    if len(body) != 8 * count:
        raise FieldError(f"QFLD1 body has {len(body)} bytes, expected {8 * count}")
    data = np.frombuffer(body, dtype="<f8").astype(float).reshape(dims + (q, m))
    return QField(Grid(origin, h, dims), data)


def save_field(u: QField, path: str | Path) -> None:
    Path(path).write_bytes(dumps_field(u))


def load_field(path: str | Path) -> QField:
    p = Path(path)
    if not p.is_file():
        raise FieldError(f"no such field file: {p}")
    return loads_field(p.read_bytes())


def density_csv(u: QField, values: np.ndarray | None = None) -> str:
    """CSV of a per-cell (default: energy density) or per-node map."""
    vals = u.energy_density if values is None else np.asarray(values)
    g = u.grid
    cells = vals.shape == tuple(d - 1 for d in g.dims)
    shift = 0.5 * g.h if cells else 0.0
    axes = [o + shift + g.h * np.arange(s) for o, s in zip(g.origin, vals.shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    names = ["x", "y", "z"][: g.n] + ["value"]
    cols = [c.ravel() for c in mesh] + [vals.ravel()]
    buf = io.StringIO()
    buf.write(",".join(names) + "\n")
    np.savetxt(buf, np.stack(cols, axis=-1), delimiter=",", fmt="%.17g")
    return buf.getvalue()


def cell_sheets(u: QField) -> tuple[np.ndarray, np.ndarray]:
    """Per grid cell, matched sheet values and gradients at the cell centre.

    The tuples at the cell corners are matched to the lowest corner, then
    averaged (values) and differenced along each axis (gradients). Returns
    ``(values, grads)`` with shapes (cells..., q, m) and (cells..., n, q, m).
    """
    n = u.n
    cdims = tuple(d - 1 for d in u.grid.dims)
    corners = {}
    base = u.data[tuple(slice(0, d) for d in cdims)]
    for bits in itertools.product((0, 1), repeat=n):
        vals = u.data[tuple(slice(b, b + d) for b, d in zip(bits, cdims))]
        if any(bits):
            _, perm = match_tuples(base, vals)
            vals = apply_perm(vals, perm)
        corners[bits] = vals
    values = sum(corners.values()) / float(2**n)
    grads = np.zeros(cdims + (n,) + u.data.shape[-2:])
    for ax in range(n):
        acc = 0.0
        for bits, vals in corners.items():
            acc = acc + (vals if bits[ax] else -vals)
        grads[..., ax, :, :] = acc / (2 ** (n - 1) * u.h)
    return values, grads


def cell_centers(grid: Grid) -> np.ndarray:
    """Coordinates of grid-cell centres, shape (cells..., n)."""
    axes = [o + grid.h * (np.arange(d - 1) + 0.5) for o, d in zip(grid.origin, grid.dims)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
