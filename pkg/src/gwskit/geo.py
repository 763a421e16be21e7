"""Coordinates, UTM-style projection, the regular lon/lat grid and rasterization.

The projection is an ellipsoidal transverse Mercator on WGS84 evaluated with
Krueger's series in the third flattening (4th order), which is accurate to
well below a millimetre within a UTM zone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
UTM_K0 = 0.9996
UTM_FALSE_EASTING = 500000.0
UTM46_CENTRAL_MERIDIAN = 93.0


class DomainError(ValueError):
    """Input outside the domain where an operation is defined."""


def _series_coefficients(f: float = WGS84_F):
    n = f / (2.0 - f)
    n2, n3, n4 = n * n, n ** 3, n ** 4
    rect_radius = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0)
    alpha = (
        n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0,
        13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0,
        61.0 * n3 / 240.0 - 103.0 * n4 / 140.0,
        49561.0 * n4 / 161280.0,
    )
    beta = (
        n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0,
        n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0,
        17.0 * n3 / 480.0 - 37.0 * n4 / 840.0,
        4397.0 * n4 / 161280.0,
    )
    delta = (
        2.0 * n - 2.0 * n2 / 3.0 - 2.0 * n3 + 116.0 * n4 / 45.0,
        7.0 * n2 / 3.0 - 8.0 * n3 / 5.0 - 227.0 * n4 / 45.0,
        56.0 * n3 / 15.0 - 136.0 * n4 / 35.0,
        4279.0 * n4 / 630.0,
    )
    return n, rect_radius, alpha, beta, delta


_N, _RECT_RADIUS, _ALPHA, _BETA, _DELTA = _series_coefficients()


def _check_domain(lon, lat, central_meridian):
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if np.any(~np.isfinite(lat)) or np.any((lat <= -80.0) | (lat >= 84.0)):
        raise DomainError("latitude must lie in (-80, 84) degrees")
    if np.any(~np.isfinite(lon)) or np.any(np.abs(lon - central_meridian) > 30.0):
        raise DomainError(
            f"longitude must lie within 30 degrees of the central meridian {central_meridian}"
        )
    return lon, lat


def project(lon, lat, central_meridian: float = UTM46_CENTRAL_MERIDIAN,
            false_northing: float = 0.0):
    """Forward transverse Mercator (UTM parameters) from degrees to metres.

    Accepts scalars or arrays; returns ``(x, y)`` of the same shape.
    """
    lon, lat = _check_domain(lon, lat, central_meridian)
    phi = np.radians(lat)
    lam = np.radians(lon - central_meridian)
    e_fac = 2.0 * math.sqrt(_N) / (1.0 + _N)
    sin_phi = np.sin(phi)
    t = np.sinh(np.arctanh(sin_phi) - e_fac * np.arctanh(e_fac * sin_phi))
    xi_p = np.arctan2(t, np.cos(lam))
    eta_p = np.arctanh(np.sin(lam) / np.sqrt(1.0 + t * t))
    xi = xi_p.copy()
    eta = eta_p.copy()
    for j, a in enumerate(_ALPHA, start=1):
        xi = xi + a * np.sin(2 * j * xi_p) * np.cosh(2 * j * eta_p)
        eta = eta + a * np.cos(2 * j * xi_p) * np.sinh(2 * j * eta_p)
    x = UTM_FALSE_EASTING + UTM_K0 * _RECT_RADIUS * eta
    y = false_northing + UTM_K0 * _RECT_RADIUS * xi
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def inverse(x, y, central_meridian: float = UTM46_CENTRAL_MERIDIAN,
            false_northing: float = 0.0):
    """Inverse of :func:`project`; returns ``(lon, lat)`` in degrees."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xi = (y - false_northing) / (UTM_K0 * _RECT_RADIUS)
    eta = (x - UTM_FALSE_EASTING) / (UTM_K0 * _RECT_RADIUS)
    xi_p = xi.copy()
    eta_p = eta.copy()
    for j, b in enumerate(_BETA, start=1):
        xi_p = xi_p - b * np.sin(2 * j * xi) * np.cosh(2 * j * eta)
        eta_p = eta_p - b * np.cos(2 * j * xi) * np.sinh(2 * j * eta)
    chi = np.arcsin(np.sin(xi_p) / np.cosh(eta_p))
    phi = chi.copy()
    for j, d in enumerate(_DELTA, start=1):
        phi = phi + d * np.sin(2 * j * chi)
    lam = np.arctan2(np.sinh(eta_p), np.cos(xi_p))
    lon = central_meridian + np.degrees(lam)
    lat = np.degrees(phi)
    if lon.ndim == 0:
        return float(lon), float(lat)
    return lon, lat


@dataclass(frozen=True)
class GeoPoint:
    id: str
    lon: float
    lat: float
    x: float = field(default=float("nan"))
    y: float = field(default=float("nan"))

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise DomainError(f"point {self.id!r} has invalid lon/lat ({self.lon}, {self.lat})")

    @classmethod
    def from_lonlat(cls, id: str, lon: float, lat: float,
                    central_meridian: float = UTM46_CENTRAL_MERIDIAN) -> "GeoPoint":
        x, y = project(lon, lat, central_meridian)
        return cls(id=str(id), lon=float(lon), lat=float(lat), x=x, y=y)

    @classmethod
    def from_xy(cls, id: str, x: float, y: float,
                central_meridian: float = UTM46_CENTRAL_MERIDIAN) -> "GeoPoint":
        lon, lat = inverse(x, y, central_meridian)
        return cls(id=str(id), lon=lon, lat=lat, x=float(x), y=float(y))


def make_points(ids: Sequence[str], lon, lat,
                central_meridian: float = UTM46_CENTRAL_MERIDIAN) -> list[GeoPoint]:
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    x, y = project(lon, lat, central_meridian)
    x, y = np.atleast_1d(x), np.atleast_1d(y)
    return [GeoPoint(str(i), float(a), float(b), float(c), float(d))
            for i, a, b, c, d in zip(ids, lon, lat, x, y)]


def coords_xy(points: Sequence[GeoPoint]) -> np.ndarray:
    """(n, 2) array of projected coordinates."""
    return np.array([[p.x, p.y] for p in points], dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class GridSpec:
    lon_min: float
    lat_min: float
    n_cols: int
    n_rows: int
    cell_size: float = 0.25

    def __post_init__(self):
        if self.n_cols <= 0 or self.n_rows <= 0:
            raise ValueError("grid dimensions must be positive")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def lon_max(self) -> float:
        return self.lon_min + self.n_cols * self.cell_size

    @property
    def lat_max(self) -> float:
        return self.lat_min + self.n_rows * self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Center lon/lat arrays, each of shape (n_rows, n_cols); row 0 is southernmost."""
        lons = self.lon_min + (np.arange(self.n_cols) + 0.5) * self.cell_size
        lats = self.lat_min + (np.arange(self.n_rows) + 0.5) * self.cell_size
        lon_g, lat_g = np.meshgrid(lons, lats)
        return lon_g, lat_g

    def cell_indices(self, lon, lat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized cell lookup: (rows, cols, inside) with half-open cells."""
        lon = np.asarray(lon, dtype=float)
        lat = np.asarray(lat, dtype=float)
        cols = np.floor((lon - self.lon_min) / self.cell_size).astype(np.int64)
        rows = np.floor((lat - self.lat_min) / self.cell_size).astype(np.int64)
        inside = (cols >= 0) & (cols < self.n_cols) & (rows >= 0) & (rows < self.n_rows)
        return rows, cols, inside


def cell_of(point: GeoPoint, grid: GridSpec) -> Optional[tuple[int, int]]:
    rows, cols, inside = grid.cell_indices(point.lon, point.lat)
    if not bool(inside):
        return None
    return int(rows), int(cols)


class MaskedGrid:
    """A 2D field with a validity mask.

    Masked-out cells are stored as NaN internally, but callers only ever see
    them through :meth:`filled` with an explicit fill value.
    """

    __slots__ = ("_data", "_mask")

    def __init__(self, values, mask):
        values = np.array(values, dtype=float)
        mask = np.array(mask, dtype=bool)
        if values.shape != mask.shape or values.ndim != 2:
            raise ValueError("values and mask must be 2D arrays of identical shape")
        if np.any(~np.isfinite(values[mask])):
            raise ValueError("valid cells must hold finite values")
        values[~mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        self._data = values
        self._mask = mask

    @property
    def shape(self) -> tuple[int, int]:
        return self._data.shape

    @property
    def mask(self) -> np.ndarray:
        return self._mask

    def filled(self, fill_value: float = 0.0) -> np.ndarray:
        return np.where(self._mask, self._data, fill_value)

    def compressed(self) -> np.ndarray:
        """Valid values in row-major order."""
        return self._data[self._mask]

    def __repr__(self) -> str:
        return f"MaskedGrid(shape={self.shape}, valid={int(self._mask.sum())})"


def rasterize(obs, grid: GridSpec, t: int) -> MaskedGrid:
    """Average all valid point values at timestep ``t`` into grid cells.

    ``obs`` is anything with ``points``, ``values`` (n, T) and ``valid`` (n, T),
    e.g. a :class:`gwskit.preprocess.PointObservationSet`.
    """
    lon = np.array([p.lon for p in obs.points], dtype=float)
    lat = np.array([p.lat for p in obs.points], dtype=float)
    valid = np.asarray(obs.valid)[:, t]
    vals = np.asarray(obs.values, dtype=float)[:, t]
    rows, cols, inside = grid.cell_indices(lon, lat)
    use = valid & inside
    flat = rows[use] * grid.n_cols + cols[use]
    size = grid.n_rows * grid.n_cols
    counts = np.bincount(flat, minlength=size)
    sums = np.bincount(flat, weights=vals[use], minlength=size)
    mask = counts > 0
    out = np.zeros(size)
    out[mask] = sums[mask] / counts[mask]
    return MaskedGrid(out.reshape(grid.shape), mask.reshape(grid.shape))


def points_in_polygon(lon, lat, ring) -> np.ndarray:
    """Even-odd ray casting test of points against a lon/lat ring."""
    ring = np.asarray(ring, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 3:
        raise ValueError("polygon ring must be an (m >= 3, 2) array of lon/lat vertices")
    px = np.atleast_1d(np.asarray(lon, dtype=float))
    py = np.atleast_1d(np.asarray(lat, dtype=float))
    inside = np.zeros(px.shape, dtype=bool)
    x0, y0 = ring[:, 0], ring[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    for ax, ay, bx, by in zip(x0, y0, x1, y1):
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def study_area_mask(grid: GridSpec, ring=None) -> np.ndarray:
    """Boolean (n_rows, n_cols) mask of cell centers inside the polygon (all true if none)."""
    if ring is None:
        return np.ones(grid.shape, dtype=bool)
    lon_c, lat_c = grid.cell_centers()
    return points_in_polygon(lon_c.ravel(), lat_c.ravel(), ring).reshape(grid.shape)
