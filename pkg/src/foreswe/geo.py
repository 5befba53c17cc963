"""Great-circle distance and angular separation between stations.

Both pairwise matrices feed the additive bias of the spatial attention.
They are min-max scaled over their off-diagonal entries with constants
fitted once on the training stations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
FEET_TO_METERS = 0.3048


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float
    elevation: float = 0.0  # meters

    def __post_init__(self):
        vals = (self.latitude, self.longitude, self.elevation)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("GeoPoint fields must be finite")
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude out of range: {self.latitude}")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude out of range: {self.longitude}")
        if self.elevation < -500.0:
            raise ValueError(f"elevation below -500 m: {self.elevation}")


def _haversine_arrays(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def cartesian(lat, lon, elevation_m):
    """Earth-centred xyz coordinates (meters) at radius ``r + elevation``."""
    rad = EARTH_RADIUS_M + np.asarray(elevation_m, dtype=float)
    phi, lmb = np.radians(lat), np.radians(lon)
    return np.stack(
        [rad * np.cos(phi) * np.cos(lmb), rad * np.cos(phi) * np.sin(lmb), rad * np.sin(phi)],
        axis=-1,
    )


def _angle_arrays(ca, cb):
    # the arccos of the cosine similarity, written as atan2 so that
    # nearly parallel vectors keep full precision
    dot = np.sum(ca * cb, axis=-1)
    cross = np.linalg.norm(np.cross(ca, cb), axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def haversine(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters (elevation ignored)."""
    if (a.latitude, a.longitude) == (b.latitude, b.longitude):
        return 0.0
    return float(_haversine_arrays(a.latitude, a.longitude, b.latitude, b.longitude))


def angularity(a: GeoPoint, b: GeoPoint) -> float:
    """Angle in degrees between the two stations' position vectors."""
    if a == b:
        return 0.0
    ca = cartesian(a.latitude, a.longitude, a.elevation)
    cb = cartesian(b.latitude, b.longitude, b.elevation)
    return float(_angle_arrays(ca, cb))


@dataclass(frozen=True)
class GeoNormalization:
    """Min-max constants for the distance and angle matrices."""

    distance_min: float
    distance_max: float
    angle_min: float
    angle_max: float

    @classmethod
    def fit(cls, distance, angle):
        n = distance.shape[0]
        if n < 2:
            return cls(0.0, 0.0, 0.0, 0.0)
        off = ~np.eye(n, dtype=bool)
        d, a = distance[off], angle[off]
        return cls(float(d.min()), float(d.max()), float(a.min()), float(a.max()))

    def apply(self, distance, angle):
        return (
            _minmax(distance, self.distance_min, self.distance_max),
            _minmax(angle, self.angle_min, self.angle_max),
        )

    def to_dict(self):
        return dict(
            distance_min=self.distance_min,
            distance_max=self.distance_max,
            angle_min=self.angle_min,
            angle_max=self.angle_max,
        )


def _minmax(m, lo, hi):
    span = hi - lo
    # a single pair (or coincident stations) has no spread to scale by
    out = (m - lo) / span if span > 0 else np.zeros_like(m)
    np.fill_diagonal(out, 0.0)
    return out


@dataclass(frozen=True)
class GeoBiasMatrices:
    distance: np.ndarray  # normalized
    angle: np.ndarray  # normalized
    raw_distance: np.ndarray  # meters
    raw_angle: np.ndarray  # degrees
    normalization: GeoNormalization

    @property
    def n(self):
        return self.distance.shape[0]

    def permute(self, order):
        order = np.asarray(order)
        ix = np.ix_(order, order)
        return GeoBiasMatrices(
            self.distance[ix], self.angle[ix], self.raw_distance[ix], self.raw_angle[ix],
            self.normalization,
        )


def pairwise_raw(points):
    """Unnormalized (distance, angle) matrices; each unordered pair is
    evaluated once and mirrored, so both are exactly symmetric."""
    n = len(points)
    lat = np.array([p.latitude for p in points], dtype=float)
    lon = np.array([p.longitude for p in points], dtype=float)
    elev = np.array([p.elevation for p in points], dtype=float)
    dist = np.zeros((n, n))
    ang = np.zeros((n, n))
    if n > 1:
        i, j = np.triu_indices(n, k=1)
        d = _haversine_arrays(lat[i], lon[i], lat[j], lon[j])
        xyz = cartesian(lat, lon, elev)
        a = _angle_arrays(xyz[i], xyz[j])
        same = (lat[i] == lat[j]) & (lon[i] == lon[j])
        d[same] = 0.0
        a[same & (elev[i] == elev[j])] = 0.0
        dist[i, j] = d
        dist[j, i] = d
        ang[i, j] = a
        ang[j, i] = a
    return dist, ang


def pairwise_geo(points, normalization=None):
    """Pairwise bias matrices for ``points``.

    If ``normalization`` is None it is fitted on these points; pass the
    training-set constants to reuse them on another station set.
    """
    if len(points) < 1:
        raise ValueError("need at least one point")
    dist, ang = pairwise_raw(points)
    if normalization is None:
        normalization = GeoNormalization.fit(dist, ang)
    nd, na = normalization.apply(dist, ang)
    return GeoBiasMatrices(nd, na, dist, ang, normalization)
