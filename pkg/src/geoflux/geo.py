"""Great-circle distances and cluster centroids."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0088

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeoPoint:
    """A point on the sphere in decimal degrees.

    Longitude is normalized into [-180, 180) on construction.
    """

    latitude: float
    longitude: float

    def __post_init__(self):
        lat = float(self.latitude)
        lon = float(self.longitude)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise ValueError(f"non-finite coordinates ({lat}, {lon})")
        if not -90.0 <= lat <= 90.0:
            raise ValueError(f"latitude {lat} outside [-90, 90]")
        lon = (lon + 180.0) % 360.0 - 180.0
        object.__setattr__(self, "latitude", lat)
        object.__setattr__(self, "longitude", lon)


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in kilometers."""
    if a == b:
        return 0.0
    lat1, lon1 = math.radians(a.latitude), math.radians(a.longitude)
    lat2, lon2 = math.radians(b.latitude), math.radians(b.longitude)
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    # clamp guards asin against h drifting past 1 for antipodes
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def haversine_matrix(lats, lons, lats2=None, lons2=None) -> np.ndarray:
    """Pairwise great-circle distances (km) between coordinate arrays.

    With a single set of coordinates the result is the symmetric
    all-pairs matrix with an exactly-zero diagonal.
    """
    same = lats2 is None
    lat1 = np.radians(np.asarray(lats, dtype=float))[:, None]
    lon1 = np.radians(np.asarray(lons, dtype=float))[:, None]
    if same:
        lat2, lon2 = lat1.T, lon1.T
    else:
        lat2 = np.radians(np.asarray(lats2, dtype=float))[None, :]
        lon2 = np.radians(np.asarray(lons2, dtype=float))[None, :]
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))
    if same:
        d = (d + d.T) / 2
        np.fill_diagonal(d, 0.0)
    return d


def haversine_pairs(lats1, lons1, lats2, lons2) -> np.ndarray:
    """Elementwise great-circle distances (km) between matched coordinate arrays."""
    lat1, lon1 = np.radians(np.asarray(lats1, dtype=float)), np.radians(np.asarray(lons1, dtype=float))
    lat2, lon2 = np.radians(np.asarray(lats2, dtype=float)), np.radians(np.asarray(lons2, dtype=float))
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))
    return np.where((lat1 == lat2) & (lon1 == lon2), 0.0, d)


def centroid(points: Sequence[GeoPoint]) -> GeoPoint:
    """Arithmetic mean of latitudes and of longitudes.

    Clusters whose longitudes span more than 180 degrees straddle the
    antimeridian; the plain mean is then meaningless and a warning is logged.
    """
    if not points:
        raise ValueError("empty cluster")
    lats = [p.latitude for p in points]
    lons = [p.longitude for p in points]
    if max(lons) - min(lons) > 180.0:
        log.warning("cluster of %d points straddles the antimeridian; centroid is uncorrected", len(points))
    return GeoPoint(math.fsum(lats) / len(lats), math.fsum(lons) / len(lons))


def destination(origin: GeoPoint, bearing_rad: float, distance_km: float) -> GeoPoint:
    """Point reached travelling ``distance_km`` from ``origin`` along a bearing."""
    lat1 = math.radians(origin.latitude)
    lon1 = math.radians(origin.longitude)
    ang = distance_km / EARTH_RADIUS_KM
    lat2 = math.asin(math.sin(lat1) * math.cos(ang) + math.cos(lat1) * math.sin(ang) * math.cos(bearing_rad))
    lon2 = lon1 + math.atan2(
        math.sin(bearing_rad) * math.sin(ang) * math.cos(lat1),
        math.cos(ang) - math.sin(lat1) * math.sin(lat2),
    )
    return GeoPoint(max(-90.0, min(90.0, math.degrees(lat2))), math.degrees(lon2))
