import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg

from crimeflow.spatial import (ArealPartition, SpatialError, assign_points, build_precision, build_weights,
                               lattice_edges, lattice_partition, morans_i, rook_edges, spectral_bounds,
                               weights_from_dense)

from _util import path_weights, random_graph


def part(*ids, polygons=None):
    return ArealPartition(ids, polygons)


# ---------------------------------------------------------------- weights


def test_build_weights_path():
    w = build_weights(part("a", "b", "c"), [("a", "b"), ("b", "c")])
    np.testing.assert_array_equal(w.dense(), [[0, 1, 0], [1, 0, 1], [0, 1, 0]])


def test_build_weights_empty_graph():
    w = build_weights(part("a", "b"), [])
    np.testing.assert_array_equal(w.dense(), np.zeros((2, 2)))


def test_self_edge_rejected():
    with pytest.raises(SpatialError, match="self-edge"):
        build_weights(part("a", "b"), [("a", "a")])


def test_unknown_unit_rejected():
    with pytest.raises(SpatialError, match="unknown unit id 'z'"):
        build_weights(part("a", "b"), [("a", "z")])


def test_duplicate_edges_idempotent():
    w1 = build_weights(part("a", "b", "c"), [("a", "b")])
    w2 = build_weights(part("a", "b", "c"), [("a", "b"), ("b", "a"), ("a", "b")])
    np.testing.assert_array_equal(w1.dense(), w2.dense())


def test_partition_invariants():
    with pytest.raises(SpatialError, match="unique"):
        part("a", "a")
    with pytest.raises(SpatialError, match="at least 2"):
        part("a")
    bowtie = [np.array([[0, 0], [1, 1], [1, 0], [0, 1]], float)]
    square = [np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)]
    with pytest.raises(SpatialError, match="self-intersects"):
        part("a", "b", polygons=[bowtie, square])


def test_weights_validation():
    with pytest.raises(SpatialError, match="symmetric"):
        weights_from_dense([[0, 1], [0, 0]])
    with pytest.raises(SpatialError, match="binary"):
        weights_from_dense([[0, 2], [2, 0]])


# ---------------------------------------------------------------- precision


def test_precision_path():
    q = build_precision(path_weights(3)).dense()
    np.testing.assert_array_equal(q, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def test_precision_isolated_node():
    w = build_weights(part("a", "b", "c"), [("a", "b")])
    q = build_precision(w).dense()
    assert not q[2].any() and not q[:, 2].any()


def test_precision_complete_graph():
    q = build_precision(weights_from_dense(np.ones((3, 3)) - np.eye(3))).dense()
    np.testing.assert_array_equal(np.diag(q), [2, 2, 2])
    np.testing.assert_array_equal(q[~np.eye(3, dtype=bool)], -np.ones(6))


@given(st.integers(2, 50), st.floats(0.05, 0.9), st.integers(0, 10_000))
def test_precision_laplacian_properties(n, p, seed):
    q = build_precision(random_graph(n, p, np.random.default_rng(seed))).dense()
    np.testing.assert_array_equal(q.sum(axis=1), np.zeros(n))
    np.testing.assert_array_equal(q, q.T)
    assert np.linalg.eigvalsh(q).min() >= -1e-10


# ---------------------------------------------------------------- spectral bounds


def test_bounds_two_nodes():
    b = spectral_bounds(path_weights(2))
    assert b.lower == pytest.approx(-1) and b.upper == pytest.approx(1)


def test_bounds_path3_dense_oracle():
    vals = np.linalg.eigvalsh(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float))
    np.testing.assert_allclose(vals, [-np.sqrt(2), 0, np.sqrt(2)], atol=1e-12)
    b = spectral_bounds(path_weights(3))
    assert b.lower == pytest.approx(1 / vals[0]) and b.upper == pytest.approx(1 / vals[-1])
    assert b.upper == pytest.approx(1 / np.sqrt(2))


def test_bounds_cycle4():
    a = np.zeros((4, 4))
    for i in range(4):
        a[i, (i + 1) % 4] = a[(i + 1) % 4, i] = 1
    b = spectral_bounds(weights_from_dense(a))
    assert (b.omega_min, b.omega_max) == pytest.approx((-2, 2))
    assert (b.lower, b.upper) == pytest.approx((-0.5, 0.5))


def test_bounds_edgeless_error():
    with pytest.raises(SpatialError, match="edgeless"):
        spectral_bounds(weights_from_dense(np.zeros((3, 3))))


@given(st.integers(3, 50), st.integers(0, 10_000), st.floats(0.001, 0.999))
def test_cholesky_inside_bounds(n, seed, frac):
    rng = np.random.default_rng(seed)
    w = random_graph(n, 0.3, rng)
    if w.n_edges == 0:
        return
    b = spectral_bounds(w)
    rho = b.lower + frac * (b.upper - b.lower)
    linalg.cholesky(np.eye(n) - rho * w.dense())
    with pytest.raises(linalg.LinAlgError):
        linalg.cholesky(np.eye(n) - (b.upper + 1e-6) * w.dense())


def test_large_path_uses_sparse_route():
    # path-graph eigenvalues are 2 cos(k pi / (n + 1))
    n = 2500
    w = path_weights(n)
    omega = 2 * np.cos(np.arange(1, n + 1) * np.pi / (n + 1))
    b = spectral_bounds(w)
    assert b.omega_max == pytest.approx(omega.max(), rel=1e-8)
    assert b.omega_min == pytest.approx(omega.min(), rel=1e-8)
    for rho in (-0.3, 0.2, 0.45):
        assert w.logdet(rho) == pytest.approx(np.sum(np.log1p(-rho * omega)), rel=1e-9)


@given(st.integers(2, 30), st.integers(0, 10_000), st.floats(-0.99, 0.99))
def test_logdet_matches_dense(n, seed, frac):
    w = random_graph(n, 0.3, np.random.default_rng(seed))
    if w.n_edges == 0:
        return
    b = spectral_bounds(w)
    rho = frac * (b.upper if frac > 0 else -b.lower)
    sign, ref = np.linalg.slogdet(np.eye(n) - rho * w.dense())
    assert sign > 0
    assert w.logdet(rho) == pytest.approx(ref, abs=1e-8)


# ---------------------------------------------------------------- Moran's I


def cycle(n):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1
    return weights_from_dense(a)


def moran_dense(y, a):
    """Textbook normality-assumption Moran moments from a dense W."""
    n = len(y)
    z = y - y.mean()
    s0 = a.sum()
    s1 = 0.5 * ((a + a.T) ** 2).sum()
    s2 = ((a.sum(0) + a.sum(1)) ** 2).sum()
    i = n / s0 * z @ a @ z / (z @ z)
    e = -1 / (n - 1)
    v = (n * n * s1 - n * s2 + 3 * s0 ** 2) / ((n * n - 1) * s0 ** 2) - e * e
    return i, e, v


def test_moran_zero_variance():
    with pytest.raises(SpatialError, match="zero variance"):
        morans_i(np.ones(4), cycle(4))


def test_moran_alternating_cycle():
    assert morans_i(np.array([1, -1, 1, -1.0]), cycle(4)).i_stat == pytest.approx(-1)


def test_moran_matches_dense_moments():
    rng = np.random.default_rng(3)
    w = random_graph(25, 0.2, rng)
    y = rng.normal(size=25)
    r = morans_i(y, w)
    i, e, v = moran_dense(y, w.dense())
    assert (r.i_stat, r.expected, r.variance) == pytest.approx((i, e, v), rel=1e-12)
    assert r.variance > 0


def test_moran_smooth_path_significant_permutation_oracle():
    n = 30
    w = path_weights(n)
    y = np.arange(1, n + 1, dtype=float)
    r = morans_i(y, w)
    assert r.i_stat > 0 and r.p < 0.05
    rng = np.random.default_rng(0)
    perm = np.array([morans_i(rng.permutation(y), w).i_stat for _ in range(999)])
    p_perm = (1 + np.sum(perm >= r.i_stat)) / 1000
    assert p_perm < 0.05


def test_moran_p_monotone_in_z():
    w = cycle(12)
    rng = np.random.default_rng(1)
    res = sorted((morans_i(rng.normal(size=12), w) for _ in range(40)), key=lambda r: abs(r.z))
    ps = [r.p for r in res]
    assert all(a >= b for a, b in zip(ps, ps[1:]))


@given(st.lists(st.floats(-100, 100), min_size=8, max_size=8).filter(lambda v: np.ptp(v) > 1e-3),
       st.floats(0.01, 50).flatmap(lambda a: st.sampled_from([a, -a])), st.floats(-1e3, 1e3))
def test_moran_affine_invariance(y, a, b):
    w = cycle(8)
    y = np.array(y)
    assert morans_i(a * y + b, w).i_stat == pytest.approx(morans_i(y, w).i_stat, abs=1e-10)


def test_moran_null_mean():
    rng = np.random.default_rng(7)
    w = random_graph(20, 0.25, rng)
    vals = np.array([morans_i(rng.standard_normal(20), w).i_stat for _ in range(1000)])
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - (-1 / 19)) < 3 * se


# ---------------------------------------------------------------- point assignment


def winding_owner(polygons, pt):
    """Lowest-indexed polygon whose closure contains pt, by winding number."""
    x, y = pt
    for i, rings in enumerate(polygons):
        wn, on_edge = 0, False
        for ring in rings:
            for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
                cross = (x2 - x1) * (y - y1) - (x - x1) * (y2 - y1)
                if (abs(cross) < 1e-12 and min(x1, x2) <= x <= max(x1, x2)
                        and min(y1, y2) <= y <= max(y1, y2)):
                    on_edge = True
                if y1 <= y < y2 and cross > 0:
                    wn += 1
                elif y2 <= y < y1 and cross < 0:
                    wn -= 1
        if on_edge or wn != 0:
            return i
    return None


def test_assign_centroid_outside_and_boundary():
    p = lattice_partition(2)
    assert assign_points(p, [(0.5, 0.5), (1.5, 1.5), (5, 5)]) == ["u0000", "u0003", None]
    assert assign_points(p, [(1.0, 0.5), (1.0, 1.0)]) == ["u0000", "u0000"]
    assert assign_points(p, [(1.5, 1.0)]) == ["u0001"]


def test_assign_matches_winding_oracle():
    p = lattice_partition(3)
    rng = np.random.default_rng(11)
    pts = np.vstack([rng.uniform(-0.5, 3.5, (400, 2)),
                     rng.integers(0, 4, (100, 2)).astype(float),
                     np.column_stack([rng.integers(0, 4, 100), rng.uniform(0, 3, 100)])])
    got = assign_points(p, pts)
    want = [winding_owner(p.polygons, pt) for pt in pts]
    assert got == [None if k is None else p.units[k] for k in want]


def test_assign_polygon_with_hole():
    outer = np.array([[0, 0], [4, 0], [4, 4], [0, 4]], float)
    hole = np.array([[1, 1], [3, 1], [3, 3], [1, 3]], float)
    p = part("ring", "core", polygons=[[outer, hole], [hole]])
    assert assign_points(p, [(0.5, 0.5), (2, 2), (5, 5)]) == ["ring", "core", None]


def test_assign_requires_polygons():
    with pytest.raises(SpatialError, match="no polygons"):
        assign_points(part("a", "b"), [(0, 0)])


def test_rook_edges_match_lattice():
    assert sorted(rook_edges(lattice_partition(4))) == sorted(lattice_edges(4))
