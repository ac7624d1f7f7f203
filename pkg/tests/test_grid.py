import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpodkrig.errors import DegenerateMapError, DomainError
from cpodkrig.grid import (GeometryParams, Grid, Region, build_rescale_map, idw_interpolate,
                           idw_weights, partition_grid, select_reference)


def geom(L=50.0, R_n=3.0, dL=2.0, x_max=90.0, y_max=13.0):
    return GeometryParams(L=L, R_n=R_n, delta=1.0, theta=60.0, dL=dL, x_max=x_max, y_max=y_max)


def test_partition_boundaries_go_to_lower_region():
    g = geom()
    pts = np.array([[2.0, 1.0], [2.0 + 1e-9, 1.0], [50.0, 5.0], [50.1, 3.0], [50.1, 3.1], [0.0, 0.0]])
    lab = partition_grid(pts, g)
    assert lab.tolist() == [Region.HEAD_END_TO_INLET, Region.INLET_TO_EXIT, Region.INLET_TO_EXIT,
                            Region.DOWNSTREAM_BOTTOM, Region.DOWNSTREAM_TOP, Region.HEAD_END_TO_INLET]


def test_partition_rejects_negative_coordinates():
    with pytest.raises(DomainError, match="negative"):
        partition_grid(np.array([[1.0, -0.1]]), geom())


def test_geometry_validation():
    with pytest.raises(DomainError):
        geom(dL=60.0)
    with pytest.raises(DomainError):
        GeometryParams(L=10.0, R_n=3.0, delta=1.0, theta=60.0, dL=2.0, validate_ranges=True)
    d = geom().to_dict()
    assert GeometryParams.from_dict(d) == geom()


def test_identity_map():
    g = geom()
    pts = np.random.default_rng(0).random((50, 2)) * [90.0, 13.0]
    assert np.allclose(build_rescale_map(g, g).apply(pts), pts, atol=1e-12)


def test_map_sends_landmarks_to_landmarks():
    src, ref = geom(), geom(L=30.0, R_n=4.0, dL=3.0, x_max=80.0, y_max=12.0)
    m = build_rescale_map(src, ref)
    pts = np.array([[2.0, 0.0], [50.0, 3.0], [90.0, 13.0], [90.0, 3.0], [0.0, 3.0]])
    out = m.apply(pts)
    assert np.allclose(out, [[3.0, 0.0], [30.0, 4.0], [80.0, 12.0], [80.0, 4.0], [0.0, 4.0]])


def test_map_is_continuous_across_region_faces():
    src, ref = geom(), geom(L=30.0, R_n=4.0, dL=3.0, x_max=80.0, y_max=12.0)
    m = build_rescale_map(src, ref)
    eps = 1e-9
    # faces of the physical domain: injector (y <= R_n) plus downstream box
    for face in ([2.0, 1.5], [50.0, 1.5], [70.0, 3.0]):
        a, b = np.array(face), np.array(face)
        if face[1] == 3.0:
            a[1] -= eps
            b[1] += eps
        else:
            a[0] -= eps
            b[0] += eps
        assert np.abs(m.apply(a) - m.apply(b)).max() < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(25.0, 95.0), st.floats(2.0, 5.0), st.floats(1.0, 4.0),
       st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=20))
def test_map_round_trip(L, R_n, dL, unit):
    src = geom(L=L, R_n=R_n, dL=dL, x_max=L + 30.0, y_max=R_n + 9.0)
    ref = geom()
    pts = np.array(unit) * [src.x_max, src.y_max]
    m = build_rescale_map(src, ref)
    back = m.inverse().apply(m.apply(pts))
    assert np.allclose(back, pts, atol=1e-9)
    # regions are preserved
    assert np.array_equal(partition_grid(m.apply(pts), ref)[~_on_face(pts, src)],
                          partition_grid(pts, src)[~_on_face(pts, src)])


def _on_face(pts, g, tol=1e-9):
    return (np.abs(pts[:, 0] - g.dL) < tol) | (np.abs(pts[:, 0] - g.L) < tol) | (np.abs(pts[:, 1] - g.R_n) < tol)


def test_degenerate_map():
    with pytest.raises(DegenerateMapError, match="X_max - L"):
        build_rescale_map(geom(x_max=50.0), geom())
    with pytest.raises(DegenerateMapError, match="extent"):
        build_rescale_map(GeometryParams(50.0, 3.0, 1.0, 60.0, 2.0), geom())


def test_grid_rejects_duplicates():
    with pytest.raises(DomainError, match="coincident"):
        Grid(np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]))


def test_select_reference_ties_lowest_index():
    grids = [np.zeros((3, 2)), np.zeros((5, 2)), np.zeros((5, 2))]
    assert select_reference(grids) == 1


def test_idw_matches_brute_force(rng):
    src = rng.random((60, 2))
    qry = rng.random((15, 2))
    vals = rng.standard_normal(60)
    got = idw_interpolate(src, vals, qry, k=10)
    for q, g in zip(qry, got):
        d = np.linalg.norm(src - q, axis=1)
        nn = np.argsort(d)[:10]
        w = 1 / d[nn] ** 2
        assert g == pytest.approx(np.sum(w * vals[nn]) / w.sum(), rel=1e-12)


def test_idw_exact_hit_and_constants(rng):
    src = rng.random((30, 2))
    vals = rng.standard_normal((30, 3))
    out = idw_interpolate(src, vals, src[[4, 7]], k=10)
    assert np.array_equal(out, vals[[4, 7]])
    const = idw_interpolate(src, np.full(30, 2.5), rng.random((10, 2)))
    assert np.allclose(const, 2.5, atol=1e-14)
    idx, w = idw_weights(src, rng.random((5, 2)))
    assert np.allclose(w.sum(axis=1), 1.0)


def test_idw_needs_k_points():
    with pytest.raises(DomainError):
        idw_interpolate(np.zeros((3, 2)) + np.arange(3)[:, None], np.ones(3), np.zeros((1, 2)), k=10)
