import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geoflux.geo import EARTH_RADIUS_KM, GeoPoint, centroid, destination, haversine, haversine_matrix, haversine_pairs

# reference values from an independent atan2 (Vincenty-on-sphere) formula
PARIS_LONDON_KM = 343.55653488088404
ANTIPODAL_KM = 20015.114442035923

lats = st.floats(-90, 90, allow_nan=False)
lons = st.floats(-180, 180, allow_nan=False, exclude_max=True)
points = st.builds(GeoPoint, lats, lons)


def test_identity_is_zero():
    p = GeoPoint(48.85, 2.35)
    assert haversine(p, p) == 0.0


def test_antipodal_equator():
    d = haversine(GeoPoint(0, 0), GeoPoint(0, 180))
    assert d == pytest.approx(math.pi * EARTH_RADIUS_KM, abs=1e-6)
    assert d == pytest.approx(ANTIPODAL_KM, abs=1e-6)


def test_paris_london():
    d = haversine(GeoPoint(48.8566, 2.3522), GeoPoint(51.5074, -0.1278))
    assert abs(d - 343.6) <= 0.5
    assert d == pytest.approx(PARIS_LONDON_KM, rel=1e-9)


def test_longitude_normalized():
    assert GeoPoint(0, 180).longitude == -180.0
    assert GeoPoint(0, 190).longitude == pytest.approx(-170.0)
    assert GeoPoint(0, -180).longitude == -180.0


@pytest.mark.parametrize("lat", [90.01, -91, float("nan")])
def test_invalid_latitude(lat):
    with pytest.raises(ValueError):
        GeoPoint(lat, 0)


def test_centroid_examples():
    assert centroid([GeoPoint(10, 10)]) == GeoPoint(10, 10)
    assert centroid([GeoPoint(0, 0), GeoPoint(2, 4)]) == GeoPoint(1, 2)
    c = centroid([GeoPoint(59.3, 18.0), GeoPoint(59.9, 10.7), GeoPoint(60.2, 24.9)])
    assert c.latitude == pytest.approx(59.8, abs=1e-9)
    assert c.longitude == pytest.approx(17.866666666666667, abs=1e-9)


def test_centroid_empty():
    with pytest.raises(ValueError, match="empty cluster"):
        centroid([])


def test_centroid_antimeridian_warns(caplog):
    centroid([GeoPoint(0, 179), GeoPoint(0, -179)])
    assert "antimeridian" in caplog.text


@given(points, points)
def test_symmetric_nonnegative(a, b):
    d = haversine(a, b)
    assert d >= 0
    assert d == haversine(b, a)


@given(points, points, points)
def test_triangle_inequality(a, b, c):
    assert haversine(a, c) <= haversine(a, b) + haversine(b, c) + 1e-9


@given(st.lists(points, min_size=1, max_size=6))
def test_matrix_matches_scalar(pts):
    D = haversine_matrix([p.latitude for p in pts], [p.longitude for p in pts])
    assert np.all(np.diag(D) == 0)
    np.testing.assert_array_equal(D, D.T)
    for i, a in enumerate(pts):
        for j, b in enumerate(pts):
            assert D[i, j] == pytest.approx(haversine(a, b), abs=1e-6)
    e = haversine_pairs([p.latitude for p in pts], [p.longitude for p in pts], [p.latitude for p in pts[::-1]], [p.longitude for p in pts[::-1]])
    np.testing.assert_allclose(e, [haversine(a, b) for a, b in zip(pts, pts[::-1])], atol=1e-6)


@given(points, st.floats(0, 2 * math.pi), st.floats(0, 5000))
def test_destination_distance(origin, bearing, dist):
    if abs(origin.latitude) > 89.9:
        return
    assert haversine(origin, destination(origin, bearing, dist)) == pytest.approx(dist, abs=1e-6)
