"""The space A_q(R^m) of unordered q-tuples of points in R^m.

Points are stored as ``(q, m)`` float arrays in lexicographic order. The
optimal-matching metric is computed exactly: by enumerating permutations
for q <= 6 and with the Hungarian algorithm above that. The batched helpers
:func:`match_tuples` and :func:`matching_cost_sq` work on arrays of shape
``(..., q, m)`` and are what the grid code uses.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

# Largest q handled by exhaustive permutation search.
EXHAUSTIVE_MAX_Q = 6

# Batch sizes are chosen so the (batch, q!, q) gather stays below ~2**24 entries.
_GATHER_BUDGET = 1 << 24


class AqError(ValueError):
    """Invalid input for an A_q(R^m) operation."""


def _canonical_order(values: np.ndarray) -> np.ndarray:
    # np.lexsort sorts by the last key first and is stable.
    keys = tuple(values[:, k] for k in range(values.shape[1] - 1, -1, -1))
    return np.lexsort(keys)


@dataclass(frozen=True, eq=False)
class AqPoint:
    """An unordered q-tuple of vectors in R^m (one value of a q-valued map)."""

    values: np.ndarray

    @property
    def q(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AqPoint):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values, other.values)
        )

    def __hash__(self) -> int:
        return hash((self.values.shape, self.values.tobytes()))

    def __repr__(self) -> str:
        vals = ", ".join("(" + ", ".join(f"{x:g}" for x in v) + ")" for v in self.values)
        return f"AqPoint(q={self.q}, m={self.m}, [{vals}])"


def make_point(values: Iterable[Sequence[float]] | np.ndarray) -> AqPoint:
    """Build a canonical point from q vectors of equal dimension.

    Scalars in a flat list are read as vectors in R^1.
    """
    try:
        arr = np.array(values, dtype=float)
    except ValueError as exc:
        raise AqError(f"inconsistent value dimensions: {exc}") from None
    if arr.size == 0:
        raise AqError("a point needs at least one value")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise AqError(f"expected a list of vectors, got array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise AqError("non-finite entries in point values")
    arr = arr[_canonical_order(arr)].copy()
    arr.setflags(write=False)
    return AqPoint(arr)


def zero_point(q: int, m: int) -> AqPoint:
    """q[[0]] in A_q(R^m)."""
    return make_point(np.zeros((q, m)))


@lru_cache(maxsize=None)
def permutations_table(q: int) -> np.ndarray:
    """All permutations of range(q), lexicographic order, shape (q!, q)."""
    return np.array(list(itertools.permutations(range(q))), dtype=np.intp).reshape(-1, q)


def pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances |a_i - b_j|^2 for tuples of shape (..., q, m)."""
    q, m = a.shape[-2], a.shape[-1]
    if q > EXHAUSTIVE_MAX_Q:
        diff = a[..., :, None, :] - b[..., None, :, :]
        return np.einsum("...ijk,...ijk->...ij", diff, diff)
    # small q: explicit loops over pairs avoid large temporaries
    out = np.empty(np.broadcast_shapes(a.shape, b.shape)[:-2] + (q, q))
    for i in range(q):
        for j in range(q):
            d = a[..., i, 0] - b[..., j, 0]
            acc = d * d
            for k in range(1, m):
                d = a[..., i, k] - b[..., j, k]
                acc += d * d
            out[..., i, j] = acc
    return out


def match_tuples(base: np.ndarray, other: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal assignment of ``other`` onto ``base``, batched over leading axes.

    Returns ``(cost_sq, perm)`` with ``perm`` of shape (..., q) such that
    ``other[..., perm[..., i], :]`` is matched to ``base[..., i, :]`` and
    ``cost_sq`` is the minimal sum of squared distances. Ties go to the
    lexicographically smallest permutation.
    """
    base = np.asarray(base, dtype=float)
    other = np.asarray(other, dtype=float)
    if base.shape != other.shape:
        raise AqError(f"tuple shapes differ: {base.shape} vs {other.shape}")
    q = base.shape[-2]
    lead = base.shape[:-2]
    if q == 1:
        cost = np.einsum("...ik,...ik->...", base - other, base - other)
        return cost, np.zeros(lead + (1,), dtype=np.intp)
    dist = pairwise_sq(base, other).reshape((-1, q, q))
    if q == 2:
        keep = dist[:, 0, 0] + dist[:, 1, 1]
        swap = dist[:, 0, 1] + dist[:, 1, 0]
        flip = swap < keep
        perm = np.where(flip[:, None], np.array([1, 0]), np.array([0, 1]))
        return np.where(flip, swap, keep).reshape(lead), perm.reshape(lead + (2,))
    if q <= EXHAUSTIVE_MAX_Q:
        perms = permutations_table(q)
        rows = np.arange(q)
        count = dist.shape[0]
        best_idx = np.empty(count, dtype=np.intp)
        step = max(1, _GATHER_BUDGET // (perms.shape[0] * q))
        for start in range(0, count, step):
            block = dist[start : start + step]
            costs = block[:, rows, perms].sum(axis=-1)
            idx = np.argmin(costs, axis=-1)
            best_idx[start : start + step] = idx
        perm = perms[best_idx]
        # sum the chosen entries in sorted order so G(a, b) == G(b, a) exactly
        best_cost = np.sort(dist[np.arange(dist.shape[0])[:, None], rows, perm], axis=-1).sum(axis=-1)
    else:
        best_cost = np.empty(dist.shape[0])
        perm = np.empty((dist.shape[0], q), dtype=np.intp)
        for k, mat in enumerate(dist):
            rows, cols = linear_sum_assignment(mat)
            perm[k] = cols[np.argsort(rows)]
            best_cost[k] = np.sort(mat[rows, cols]).sum()
    return best_cost.reshape(lead), perm.reshape(lead + (q,))


def matching_cost_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """G(a, b)^2 for batches of tuples of shape (..., q, m)."""
    return match_tuples(a, b)[0]


def apply_perm(values: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Reorder the sheet axis of ``values`` (..., q, m) by ``perm`` (..., q)."""
    if values.shape[-2] == 2:
        return np.where(perm[..., :1, None] == 1, values[..., ::-1, :], values)
    return np.take_along_axis(values, perm[..., None], axis=-2)


def _check_same_space(a: AqPoint, b: AqPoint) -> None:
    if a.q != b.q or a.m != b.m:
        raise AqError(f"points live in different spaces: (q={a.q}, m={a.m}) vs (q={b.q}, m={b.m})")


def metric(a: AqPoint, b: AqPoint) -> float:
    """G(a, b): the root-sum-square cost of the best matching of values."""
    _check_same_space(a, b)
    return math.sqrt(max(float(matching_cost_sq(a.values, b.values)), 0.0))


def norm(a: AqPoint) -> float:
    """|a| = G(a, q[[0]])."""
    return math.sqrt(float(np.sum(a.values**2)))


def separation(a: AqPoint, tol: float = 0.0) -> float:
    """Minimum distance between distinct values of ``a``; inf if all coincide.

    With ``tol > 0`` values closer than ``tol`` count as coinciding; the
    exact definition uses ``tol = 0``.
    """
    if a.q == 1:
        return math.inf
    d = np.sqrt(pairwise_sq(a.values, a.values))
    iu = np.triu_indices(a.q, k=1)
    pair = d[iu]
    distinct = pair[pair > tol]
    return float(distinct.min()) if distinct.size else math.inf


def average(a: AqPoint) -> np.ndarray:
    return a.values.mean(axis=0)


def average_free(a: AqPoint) -> AqPoint:
    return make_point(a.values - a.values.mean(axis=0))


def scalar_mul(lam: float, a: AqPoint) -> AqPoint:
    return make_point(lam * a.values)


def translate(a: AqPoint, v: Sequence[float]) -> AqPoint:
    """Add the vector ``v`` to every value."""
    return make_point(a.values + np.asarray(v, dtype=float))


def concat_sum(points: Sequence[tuple[int, AqPoint]], q: int | None = None) -> AqPoint:
    """The point sum_j m_j a^(j): each a^(j) repeated m_j times and merged.

    If ``q`` is given it must equal sum_j m_j q_j.
    """
    if not points:
        raise AqError("concat_sum needs at least one term")
    dims = {p.m for _, p in points}
    if len(dims) != 1:
        raise AqError(f"terms have different ambient dimensions {sorted(dims)}")
    blocks = []
    for mult, p in points:
        if int(mult) != mult or mult < 1:
            raise AqError(f"multiplicity must be a positive integer, got {mult}")
        blocks.extend([p.values] * int(mult))
    total = sum(b.shape[0] for b in blocks)
    if q is not None and total != q:
        raise AqError(f"multiplicities give q={total}, expected {q}")
    return make_point(np.concatenate(blocks, axis=0))


def apply_linear(a: AqPoint, mat: np.ndarray) -> AqPoint:
    """Apply a linear map of R^m to every value."""
    return make_point(a.values @ np.asarray(mat, dtype=float).T)
