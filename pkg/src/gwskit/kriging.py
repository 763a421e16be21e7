"""Ordinary kriging with a factor-once, solve-many global system.

The augmented ordinary-kriging matrix ``[[G, 1], [1^T, 0]]`` is symmetric
but indefinite, so it is factorized with LAPACK's Bunch-Kaufman routine
(``?sytrf``) and reused for every target and timestep. Local mode assembles
and factorizes a neighbourhood subsystem per target instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import get_lapack_funcs
from scipy.spatial.distance import cdist, pdist, squareform

from .geo import (UTM46_CENTRAL_MERIDIAN, DomainError, GeoPoint, GridSpec,
                  MaskedGrid, coords_xy, project, study_area_mask)
from .variogram import VariogramModel, gamma


class DuplicateLocationError(ValueError):
    pass


class SingularSystemError(np.linalg.LinAlgError):
    pass


class NoNeighborsError(ValueError):
    pass


class NumericalConsistencyError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GlobalMode:
    pass


@dataclass(frozen=True)
class LocalMode:
    max_neighbors: int
    search_radius: float = float("inf")

    def __post_init__(self):
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be at least 1")
        if not self.search_radius > 0:
            raise ValueError("search_radius must be positive")


Mode = Union[GlobalMode, LocalMode]


@dataclass(frozen=True)
class KrigingEstimate:
    value: float
    variance: float
    weights: Optional[np.ndarray] = None


class _SymmetricFactor:
    """Bunch-Kaufman LDL^T factorization of a symmetric indefinite matrix."""

    def __init__(self, a: np.ndarray):
        a = np.ascontiguousarray(a, dtype=float)
        sytrf, sytrf_lwork, sytrs, sycon = get_lapack_funcs(
            ("sytrf", "sytrf_lwork", "sytrs", "sycon"), (a,))
        lwork, info = sytrf_lwork(a.shape[0], lower=1)
        ldu, ipiv, info = sytrf(a, lwork=max(int(lwork), 1), lower=1)
        if info > 0:
            raise SingularSystemError(f"kriging matrix is exactly singular (pivot {info})")
        anorm = np.abs(a).sum(axis=0).max()
        rcond, info = sycon(ldu, ipiv, anorm, lower=1)
        if not rcond > 1e3 * np.finfo(float).eps:
            raise SingularSystemError(f"kriging matrix is numerically singular (rcond={rcond:.3g})")
        self._ldu, self._ipiv, self._sytrs = ldu, ipiv, sytrs
        self.rcond = float(rcond)
        self.size = a.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        x, info = self._sytrs(self._ldu, self._ipiv, b, lower=1)
        if info != 0:
            raise SingularSystemError(f"?sytrs failed with info={info}")
        return x


def augmented_matrix(xy: np.ndarray, model: VariogramModel) -> np.ndarray:
    n = len(xy)
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = gamma(model, squareform(pdist(xy)))
    a[:n, n] = 1.0
    a[n, :n] = 1.0
    return a


class KrigingSystem:
    """Ordinary-kriging system over a fixed station set; immutable after build."""

    def __init__(self, points: Sequence[GeoPoint], model: VariogramModel,
                 mode: Mode = GlobalMode(),
                 central_meridian: float = UTM46_CENTRAL_MERIDIAN):
        self.points = tuple(points)
        self.model = model
        self.mode = mode
        self.central_meridian = central_meridian
        self.coords = coords_xy(self.points)
        self.coords.setflags(write=False)
        self.ids = np.array([p.id for p in self.points])
        # rank of each station id, used for deterministic tie-breaking
        self._id_rank = np.argsort(np.argsort(self.ids, kind="stable"), kind="stable")
        self.factor = None
        if isinstance(mode, GlobalMode):
            self.factor = _SymmetricFactor(augmented_matrix(self.coords, model))

    @property
    def n(self) -> int:
        return len(self.points)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve the factorized global system for one or many right-hand sides."""
        if self.factor is None:
            raise ValueError("solve() needs a global-mode system")
        return self.factor.solve(np.asarray(rhs, dtype=float))


def build_system(points: Sequence[GeoPoint], model: VariogramModel,
                 mode: Mode = GlobalMode(),
                 central_meridian: float = UTM46_CENTRAL_MERIDIAN) -> KrigingSystem:
    if len(points) < 2:
        raise ValueError("kriging needs at least two stations")
    xy = coords_xy(points)
    if not np.all(np.isfinite(xy)):
        raise DomainError("station coordinates must be projected and finite")
    _, first, counts = np.unique(xy, axis=0, return_index=True, return_counts=True)
    if np.any(counts > 1):
        dupes = []
        for idx in first[counts > 1]:
            same = np.all(xy == xy[idx], axis=1)
            dupes.append(", ".join(points[i].id for i in np.flatnonzero(same)))
        raise DuplicateLocationError("duplicate station locations: " + "; ".join(dupes))
    return KrigingSystem(points, model, mode, central_meridian)


def _target_xy(target) -> np.ndarray:
    if isinstance(target, GeoPoint):
        return np.array([[target.x, target.y]])
    return np.asarray(target, dtype=float).reshape(-1, 2)


def local_neighbors(sys: KrigingSystem, target) -> np.ndarray:
    """Indices of the nearest stations within the search radius, nearest first.

    Equal distances are ordered by station id.
    """
    if not isinstance(sys.mode, LocalMode):
        raise ValueError("local_neighbors() needs a local-mode system")
    d = cdist(_target_xy(target), sys.coords)[0]
    order = np.lexsort((sys._id_rank, d))
    order = order[d[order] <= sys.mode.search_radius][: sys.mode.max_neighbors]
    if len(order) == 0:
        raise NoNeighborsError("no stations within the search radius")
    return order


def _checked_variance(var: np.ndarray, model: VariogramModel) -> np.ndarray:
    tol = 1e-9 * max(1.0, model.sill)
    if np.any(var < -tol):
        raise NumericalConsistencyError(f"negative kriging variance {var.min():.3g}")
    return np.maximum(var, 0.0)


def _snap_to_stations(dist, weights, mu, var):
    """Targets on a station get its value exactly: since gamma(0) = 0 the
    system is solved by the unit vector, which a solve would only reproduce
    up to the matrix's conditioning (poor for gaussian models without nugget).
    """
    rows, cols = np.nonzero(dist == 0.0)
    weights[rows] = 0.0
    weights[rows, cols] = 1.0
    mu[rows] = 0.0
    var[rows] = 0.0


def kriging_weights(sys: KrigingSystem, targets_xy: np.ndarray):
    """Weights (m, n), Lagrange multipliers (m,) and variances (m,) for targets.

    In local mode stations outside a target's neighbourhood get zero weight;
    targets without neighbours get NaN weights and variance.
    """
    targets_xy = np.asarray(targets_xy, dtype=float).reshape(-1, 2)
    m, n = len(targets_xy), sys.n
    dist = cdist(targets_xy, sys.coords)
    g_star = gamma(sys.model, dist)
    if sys.factor is not None:
        rhs = np.vstack([g_star.T, np.ones((1, m))])
        sol = sys.solve(rhs)
        weights = sol[:n].T
        mu = sol[n]
        var = np.einsum("ij,ij->i", weights, g_star) + mu
        _snap_to_stations(dist, weights, mu, var)
        return weights, mu, _checked_variance(var, sys.model)

    weights = np.full((m, n), np.nan)
    mu = np.full(m, np.nan)
    var = np.full(m, np.nan)
    for k in range(m):
        try:
            idx = local_neighbors(sys, targets_xy[k])
        except NoNeighborsError:
            continue
        fac = _SymmetricFactor(augmented_matrix(sys.coords[idx], sys.model))
        sol = fac.solve(np.append(g_star[k, idx], 1.0))
        w_sub, mu_k = sol[:-1], sol[-1]
        weights[k] = 0.0
        weights[k, idx] = w_sub
        mu[k] = mu_k
        var[k] = float(w_sub @ g_star[k, idx]) + mu_k
    _snap_to_stations(dist, weights, mu, var)
    ok = np.isfinite(var)
    var[ok] = _checked_variance(var[ok], sys.model)
    return weights, mu, var


def krige_point(sys: KrigingSystem, values, target) -> KrigingEstimate:
    z = np.asarray(values, dtype=float)
    if z.shape != (sys.n,):
        raise ValueError(f"expected {sys.n} station values, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("station values must be finite")
    w, mu, var = kriging_weights(sys, _target_xy(target))
    if not np.isfinite(var[0]):
        raise NoNeighborsError("no stations within the search radius")
    return KrigingEstimate(value=float(w[0] @ z), variance=float(var[0]), weights=w[0])


def krige_targets(sys: KrigingSystem, values_per_t, targets_xy):
    """Kriged values (T, m) and variances (m,) at arbitrary projected targets."""
    z = np.asarray(values_per_t, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != sys.n:
        raise ValueError(f"expected {sys.n} station values per timestep")
    if not np.all(np.isfinite(z)):
        raise DomainError("station values must be finite")
    w, _, var = kriging_weights(sys, targets_xy)
    ok = np.isfinite(var)
    est = np.full((z.shape[0], len(var)), np.nan)
    est[:, ok] = z @ w[ok].T
    return est, var


def krige_grid(sys: KrigingSystem, values_per_t, grid: GridSpec, area_ring=None):
    """Krige every timestep onto every grid cell center.

    Returns ``(value_grids, variance_grids)``, two lists of :class:`MaskedGrid`,
    one per timestep. Cells outside the study-area polygon, or without
    neighbours in local mode, are masked out.
    """
    lon_c, lat_c = grid.cell_centers()
    cx, cy = project(lon_c.ravel(), lat_c.ravel(), sys.central_meridian)
    inside = study_area_mask(grid, area_ring).ravel()
    targets = np.column_stack([cx, cy])[inside]
    est, var = krige_targets(sys, values_per_t, targets)
    ok = np.isfinite(var)
    mask = np.zeros(grid.n_rows * grid.n_cols, dtype=bool)
    mask[np.flatnonzero(inside)[ok]] = True
    mask = mask.reshape(grid.shape)
    var_full = np.zeros(grid.n_rows * grid.n_cols)
    var_full[np.flatnonzero(inside)[ok]] = var[ok]
    var_grid = MaskedGrid(var_full.reshape(grid.shape), mask)
    value_grids = []
    for row in est:
        full = np.zeros(grid.n_rows * grid.n_cols)
        full[np.flatnonzero(inside)[ok]] = row[ok]
        value_grids.append(MaskedGrid(full.reshape(grid.shape), mask))
    return value_grids, [var_grid] * len(value_grids)


def idw(station_xy, values_per_t, targets_xy, power: float = 2.0):
    """Inverse-distance weighting; a target on a station takes its value."""
    d = cdist(np.asarray(targets_xy, dtype=float).reshape(-1, 2),
              np.asarray(station_xy, dtype=float).reshape(-1, 2))
    z = np.asarray(values_per_t, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    with np.errstate(divide="ignore"):
        w = 1.0 / d ** power
    hit = d == 0.0
    rows = hit.any(axis=1)
    w[rows] = hit[rows].astype(float)
    w /= w.sum(axis=1, keepdims=True)
    return z @ w.T
