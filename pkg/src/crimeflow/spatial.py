"""Areal partitions, adjacency and precision structures, Moran's I.

The adjacency matrix is binary and symmetric with a zero diagonal; it is
never row-standardised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy import stats
from scipy.sparse import csgraph
from scipy.sparse import linalg as spla

DENSE_EIGEN_LIMIT = 2000
UNASSIGNED = None


class SpatialError(ValueError):
    pass


@dataclass(frozen=True)
class ArealPartition:
    """Ordered areal units with optional planar polygon rings.

    ``polygons[i]`` is a list of rings, each an ``(m, 2)`` array whose first
    vertex repeats as the last one.
    """

    units: tuple
    polygons: Optional[tuple] = None

    def __post_init__(self):
        units = tuple(self.units)
        object.__setattr__(self, "units", units)
        if len(units) < 2:
            raise SpatialError("a partition needs at least 2 units")
        if len(set(units)) != len(units):
            raise SpatialError("unit identifiers must be unique")
        if self.polygons is not None:
            if len(self.polygons) != len(units):
                raise SpatialError("one polygon entry per unit is required")
            rings = []
            for uid, unit_rings in zip(units, self.polygons):
                closed = []
                for ring in unit_rings:
                    ring = _close_ring(np.asarray(ring, dtype=float))
                    if _self_intersects(ring):
                        raise SpatialError(f"polygon ring of unit {uid!r} self-intersects")
                    closed.append(ring)
                rings.append(tuple(closed))
            object.__setattr__(self, "polygons", tuple(rings))

    @property
    def n(self) -> int:
        return len(self.units)

    @cached_property
    def index(self) -> dict:
        return {u: i for i, u in enumerate(self.units)}


def _close_ring(ring: np.ndarray) -> np.ndarray:
    if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 3:
        raise SpatialError("a ring needs at least 3 planar vertices")
    if not np.array_equal(ring[0], ring[-1]):
        ring = np.vstack([ring, ring[:1]])
    if len(ring) < 4:
        raise SpatialError("a ring needs at least 3 distinct vertices")
    return ring


def _orient(a, b, c) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, c) -> bool:
    return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    if ((d1 > 0) != (d2 > 0)) and d1 != 0 and d2 != 0 and \
            ((d3 > 0) != (d4 > 0)) and d3 != 0 and d4 != 0:
        return True
    return ((d1 == 0 and _on_segment(p3, p4, p1)) or (d2 == 0 and _on_segment(p3, p4, p2))
            or (d3 == 0 and _on_segment(p1, p2, p3)) or (d4 == 0 and _on_segment(p1, p2, p4)))


def _self_intersects(ring: np.ndarray) -> bool:
    m = len(ring) - 1
    for i in range(m):
        for j in range(i + 1, m):
            # adjacent edges share a vertex by construction
            if j == i + 1 or (i == 0 and j == m - 1):
                continue
            if _segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]):
                return True
    return False


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    """Binary symmetric adjacency with zero diagonal, stored as CSR."""

    n: int
    entries: sparse.csr_matrix = field(repr=False)

    def __post_init__(self):
        m = sparse.csr_matrix(self.entries, dtype=float)
        m.sum_duplicates()
        m.eliminate_zeros()
        if m.shape != (self.n, self.n):
            raise SpatialError(f"weights must be {self.n}x{self.n}, got {m.shape}")
        if np.any(m.diagonal() != 0):
            raise SpatialError("self-edge: diagonal must be zero")
        if np.any(m.data != 1):
            raise SpatialError("weights must be binary")
        if (m != m.T).nnz:
            raise SpatialError("weights must be symmetric")
        object.__setattr__(self, "entries", m)

    @property
    def s0(self) -> float:
        return float(self.entries.sum())

    @property
    def n_edges(self) -> int:
        return self.entries.nnz // 2

    @cached_property
    def neighbour_counts(self) -> np.ndarray:
        return np.asarray(self.entries.sum(axis=1)).ravel()

    def neighbours(self, i: int) -> np.ndarray:
        m = self.entries
        return m.indices[m.indptr[i]:m.indptr[i + 1]]

    def dense(self) -> np.ndarray:
        return self.entries.toarray()

    def lag(self, y: np.ndarray) -> np.ndarray:
        """Apply W to a length-N vector or to each column of an (N, T) array."""
        return self.entries @ y

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """All eigenvalues of W in ascending order (dense solver)."""
        if self.n > DENSE_EIGEN_LIMIT:
            raise SpatialError(
                f"full spectrum only computed for N <= {DENSE_EIGEN_LIMIT}; use sparse log-determinants")
        return np.linalg.eigvalsh(self.dense())

    @cached_property
    def components(self) -> np.ndarray:
        """Connected-component label per unit."""
        _, labels = csgraph.connected_components(self.entries, directed=False)
        return labels

    def logdet(self, param: float) -> float:
        """log|I_N - param*W| via the spectrum (or sparse LU for large N)."""
        if self.n <= DENSE_EIGEN_LIMIT:
            vals = 1.0 - param * self.eigenvalues
            if np.any(vals <= 0):
                return -np.inf
            return float(np.sum(np.log(vals)))
        lu = spla.splu(sparse.identity(self.n, format="csc") - param * self.entries.tocsc())
        # callers stay inside the spectral bounds, where the determinant is positive
        return float(np.sum(np.log(np.abs(lu.U.diagonal()))))


@dataclass(frozen=True, eq=False)
class PrecisionStructure:
    """Graph-Laplacian precision: neighbour counts on the diagonal, -1 for neighbours."""

    q: sparse.csr_matrix = field(repr=False)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def dense(self) -> np.ndarray:
        return self.q.toarray()


@dataclass(frozen=True)
class SpectralBounds:
    lower: float
    upper: float
    omega_min: float
    omega_max: float

    def contains(self, value: float) -> bool:
        return self.lower < value < self.upper


@dataclass(frozen=True)
class MoranResult:
    i_stat: float
    expected: float
    variance: float
    z: float
    p: float


def build_weights(partition: ArealPartition, edges: Sequence[tuple]) -> SpatialWeights:
    """Symmetric binary adjacency from an edge list of unit-id pairs.

    Duplicate edges (in either direction) are accepted idempotently.
    """
    index = partition.index
    rows, cols = [], []
    for a, b in edges:
        if a not in index:
            raise SpatialError(f"unknown unit id {a!r} in edge ({a!r}, {b!r})")
        if b not in index:
            raise SpatialError(f"unknown unit id {b!r} in edge ({a!r}, {b!r})")
        if a == b:
            raise SpatialError(f"self-edge on unit {a!r}")
        i, j = index[a], index[b]
        rows += [i, j]
        cols += [j, i]
    n = partition.n
    m = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    m.data[:] = 1.0
    return SpatialWeights(n, m)


def weights_from_dense(matrix) -> SpatialWeights:
    matrix = np.asarray(matrix, dtype=float)
    return SpatialWeights(matrix.shape[0], sparse.csr_matrix(matrix))


def build_precision(w: SpatialWeights) -> PrecisionStructure:
    q = sparse.diags(w.neighbour_counts) - w.entries
    return PrecisionStructure(sparse.csr_matrix(q))


def _extreme_eigenvalues(w: SpatialWeights) -> tuple[float, float]:
    if w.n <= DENSE_EIGEN_LIMIT:
        vals = w.eigenvalues
        return float(vals[0]), float(vals[-1])
    lo = spla.eigsh(w.entries, k=1, which="SA", return_eigenvectors=False)[0]
    hi = spla.eigsh(w.entries, k=1, which="LA", return_eigenvectors=False)[0]
    return float(lo), float(hi)


def spectral_bounds(w: SpatialWeights) -> SpectralBounds:
    """Open interval of spatial parameters keeping I - param*W positive definite."""
    if w.n_edges == 0:
        raise SpatialError("spectral bounds undefined for an edgeless weights matrix")
    omega_min, omega_max = _extreme_eigenvalues(w)
    return SpectralBounds(1.0 / omega_min, 1.0 / omega_max, omega_min, omega_max)


def morans_i(y_t, w: SpatialWeights) -> MoranResult:
    """Cross-sectional Moran's I with normality-assumption moments.

    The p-value is two-sided from the normal approximation.
    """
    y = np.asarray(y_t, dtype=float)
    if y.shape != (w.n,):
        raise SpatialError(f"expected a vector of length {w.n}, got shape {y.shape}")
    if w.n_edges == 0:
        raise SpatialError("Moran's I undefined for an edgeless weights matrix")
    z = y - y.mean()
    zz = float(z @ z)
    if zz <= 1e-300 * max(1.0, float(np.abs(y).max())):
        raise SpatialError("zero variance in y")
    n = w.n
    s0 = w.s0
    i_stat = n / s0 * float(z @ (w.entries @ z)) / zz
    expected = -1.0 / (n - 1)
    # binary symmetric W: (w_ij + w_ji)^2 = 4 w_ij
    s1 = 2.0 * s0
    s2 = float(np.sum((2.0 * w.neighbour_counts) ** 2))
    variance = (n * n * s1 - n * s2 + 3.0 * s0 * s0) / ((n * n - 1.0) * s0 * s0) - expected ** 2
    zscore = (i_stat - expected) / np.sqrt(variance)
    p = float(2.0 * stats.norm.sf(abs(zscore)))
    return MoranResult(i_stat, expected, variance, float(zscore), p)


def _ring_parity(ring: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Even-odd ray casting towards +x."""
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    for k in range(len(ring) - 1):
        (x1, y1), (x2, y2) = ring[k], ring[k + 1]
        straddle = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_hit = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (x < x_hit)
    return inside


def assign_points(partition: ArealPartition, points) -> list:
    """Unit id containing each point, or ``None`` when no polygon contains it.

    Points on a shared boundary go to the lowest-indexed containing unit.
    """
    if partition.polygons is None:
        raise SpatialError("partition has no polygons")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    out = np.full(len(pts), -1, dtype=np.int64)
    for i, rings in enumerate(partition.polygons):
        todo = np.flatnonzero(out < 0)
        if todo.size == 0:
            break
        sub = pts[todo]
        hit = np.zeros(len(todo), dtype=bool)
        for ring in rings:
            # rings of one unit combine by parity, so holes subtract
            hit ^= _ring_parity(ring, sub)
        for ring in rings:
            hit |= _ring_contains_boundary(ring, sub)
        out[todo[hit]] = i
    return [partition.units[k] if k >= 0 else UNASSIGNED for k in out]


def _ring_contains_boundary(ring: np.ndarray, pts: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0], pts[:, 1]
    boundary = np.zeros(len(pts), dtype=bool)
    for k in range(len(ring) - 1):
        (x1, y1), (x2, y2) = ring[k], ring[k + 1]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        within = ((np.minimum(x1, x2) <= x) & (x <= np.maximum(x1, x2))
                  & (np.minimum(y1, y2) <= y) & (y <= np.maximum(y1, y2)))
        boundary |= (np.abs(cross) <= 1e-12 * max(1.0, abs(x2 - x1) + abs(y2 - y1))) & within
    return boundary


def rook_edges(partition: ArealPartition, decimals: int = 9) -> list[tuple]:
    """Edge list of units sharing at least one identical polygon edge.

    Only exact shared segments are detected (vertices rounded to ``decimals``),
    which suits lattices and topologically clean tract files.
    """
    if partition.polygons is None:
        raise SpatialError("partition has no polygons")
    owners: dict = {}
    for i, rings in enumerate(partition.polygons):
        for ring in rings:
            r = np.round(ring, decimals)
            for k in range(len(r) - 1):
                a, b = tuple(r[k]), tuple(r[k + 1])
                key = (a, b) if a <= b else (b, a)
                owners.setdefault(key, set()).add(i)
    pairs = set()
    for units in owners.values():
        units = sorted(units)
        for p in range(len(units)):
            for q in range(p + 1, len(units)):
                pairs.add((units[p], units[q]))
    return [(partition.units[i], partition.units[j]) for i, j in sorted(pairs)]


def lattice_partition(g: int, with_polygons: bool = True) -> ArealPartition:
    """g x g grid of unit squares, units numbered row-major as ``u0000`` ..."""
    units = tuple(f"u{k:04d}" for k in range(g * g))
    polygons = None
    if with_polygons:
        polygons = []
        for k in range(g * g):
            r, c = divmod(k, g)
            polygons.append([np.array([[c, r], [c + 1, r], [c + 1, r + 1], [c, r + 1], [c, r]], float)])
    return ArealPartition(units, polygons)


def lattice_edges(g: int) -> list[tuple]:
    """Rook-contiguity edges of the g x g lattice produced by ``lattice_partition``."""
    edges = []
    for k in range(g * g):
        r, c = divmod(k, g)
        if c + 1 < g:
            edges.append((f"u{k:04d}", f"u{k + 1:04d}"))
        if r + 1 < g:
            edges.append((f"u{k:04d}", f"u{k + g:04d}"))
    return edges
