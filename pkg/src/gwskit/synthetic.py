"""Seeded synthetic spatiotemporal datasets for tests, demos and acceptance runs.

The latent field is a Gaussian random field with exponential covariance
(practical range convention), sampled jointly at stations and grid-cell
centers by Cholesky factorization and evolved in time as an AR(1) process,
which keeps the marginal covariance unchanged. Observations add independent
nugget noise. This path shares no code with the kriging solver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .geo import GridSpec, make_points, project
from .preprocess import PointObservationSet, month_axis
from .stack import GridStack

CHANNELS = ("dtws", "precip", "aet", "elevation", "ndvi")


@dataclass
class SyntheticDataset:
    obs: PointObservationSet
    stack: GridStack
    grid: GridSpec
    latent: np.ndarray          # (n_stations, T) noiseless field at stations
    nugget: float
    partial_sill: float
    range_m: float


def exponential_covariance(xy_a, xy_b, partial_sill: float, range_m: float) -> np.ndarray:
    return partial_sill * np.exp(-3.0 * cdist(xy_a, xy_b) / range_m)


def gaussian_field(xy, n_samples: int, partial_sill: float, range_m: float, rng) -> np.ndarray:
    """``n_samples`` independent zero-mean field realisations at ``xy``, shape (n_samples, n)."""
    cov = exponential_covariance(xy, xy, partial_sill, range_m)
    chol = np.linalg.cholesky(cov + 1e-10 * partial_sill * np.eye(len(xy)))
    return (chol @ rng.standard_normal((len(xy), n_samples))).T


def make_dataset(n_stations: int = 100, n_times: int = 60,
                 grid: GridSpec = GridSpec(90.0, 23.0, n_cols=4, n_rows=4, cell_size=0.125),
                 range_m: float = 50_000.0, sill: float = 1.0, nugget: float = 0.1,
                 rho: float = 0.6, start: str = "2002-04", seed: int = 0) -> SyntheticDataset:
    """Stations uniform over the grid box; ``sill`` is the total sill (nugget included)."""
    rng = np.random.default_rng(seed)
    psill = sill - nugget
    lon = rng.uniform(grid.lon_min, grid.lon_max, n_stations)
    lat = rng.uniform(grid.lat_min, grid.lat_max, n_stations)
    points = make_points([f"S{i:03d}" for i in range(n_stations)], lon, lat)
    lon_c, lat_c = grid.cell_centers()
    cx, cy = project(lon_c.ravel(), lat_c.ravel())
    xy = np.vstack([np.array([[p.x, p.y] for p in points]), np.column_stack([cx, cy])])

    innov = gaussian_field(xy, n_times, psill, range_m, rng)
    field = np.empty_like(innov)
    field[0] = innov[0]
    for t in range(1, n_times):
        field[t] = rho * field[t - 1] + np.sqrt(1.0 - rho * rho) * innov[t]
    latent = field[:, :n_stations].T
    cells = field[:, n_stations:].reshape(n_times, grid.n_rows, grid.n_cols)
    values = latent + rng.normal(0.0, np.sqrt(nugget), latent.shape)
    times = month_axis(start, n_times)
    obs = PointObservationSet(points, times, values)

    season = np.sin(2 * np.pi * (times.astype(np.int64) % 12) / 12.0)[:, None, None]
    shape = (n_times, grid.n_rows, grid.n_cols)
    lagged = np.concatenate([cells[:1], cells[:-1]])
    data = np.stack([
        cells + rng.normal(0.0, 0.2, shape),
        2.0 + season + rng.normal(0.0, 0.3, shape),
        lagged + rng.normal(0.0, 0.3, shape),
        np.broadcast_to(rng.uniform(0.0, 50.0, shape[1:]), shape),
        0.5 + 0.2 * season + rng.normal(0.0, 0.05, shape),
    ], axis=1).astype(np.float32)
    return SyntheticDataset(obs, GridStack(data, CHANNELS), grid, latent, nugget, psill, range_m)
