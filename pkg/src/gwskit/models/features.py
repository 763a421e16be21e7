"""Patch features from gridded predictors and radial-basis coordinate embeddings.

Flattening order of a patch is channel-major, then lag (t, t-1, ...), then
row (south to north), then column (west to east). The validity block that
follows has one flag per (lag, row, col): 1 when the cell lies inside the
grid and every channel is finite there. Out-of-grid or missing entries are
zero in the patch block.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..geo import DomainError, GeoPoint, GridSpec


class InsufficientHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    patch: np.ndarray      # (C, L, k, k)
    validity: np.ndarray   # (L, k, k)
    scalars: np.ndarray    # (S,)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.patch.ravel(), self.validity.ravel(), self.scalars.ravel()])


def feature_length(n_channels: int, lags: int, patch_radius: int, n_scalars: int = 0) -> int:
    k = 2 * patch_radius + 1
    return n_channels * lags * k * k + lags * k * k + n_scalars


def unflatten(vec, n_channels: int, lags: int, patch_radius: int) -> FeatureVector:
    vec = np.asarray(vec)
    k = 2 * patch_radius + 1
    n_patch = n_channels * lags * k * k
    n_valid = lags * k * k
    return FeatureVector(vec[:n_patch].reshape(n_channels, lags, k, k),
                         vec[n_patch:n_patch + n_valid].reshape(lags, k, k),
                         vec[n_patch + n_valid:])


def _site_cells(grid: GridSpec, sites: Sequence[GeoPoint]):
    rows, cols, inside = grid.cell_indices([s.lon for s in sites], [s.lat for s in sites])
    if not np.all(inside):
        bad = [s.id for s, ok in zip(sites, np.atleast_1d(inside)) if not ok]
        raise DomainError(f"sites outside the grid: {bad}")
    return np.atleast_1d(rows), np.atleast_1d(cols)


def feature_tensor(data: np.ndarray, grid: GridSpec, sites: Sequence[GeoPoint], times,
                   patch_radius: int = 1, lags: int = 1, site_scalars=None) -> np.ndarray:
    """Feature vectors for every (site, time) pair, shape (n_sites, n_times, F).

    ``data`` is a (T, C, H, W) array. ``site_scalars`` is an optional
    (n_sites, S) array appended unchanged to each vector.
    """
    data = np.asarray(data, dtype=float)
    times = np.atleast_1d(np.asarray(times, dtype=np.int64))
    if len(times) and times.min() < lags - 1:
        raise InsufficientHistoryError(f"time {times.min()} has fewer than {lags - 1} earlier steps")
    if len(times) and times.max() >= data.shape[0]:
        raise IndexError("time index beyond the grid stack")
    n_t, n_c, h, w = data.shape
    p = patch_radius
    k = 2 * p + 1
    padded = np.full((n_t, n_c, h + 2 * p, w + 2 * p), np.nan)
    padded[:, :, p:p + h, p:p + w] = data
    rows, cols = _site_cells(grid, sites)
    lag_times = times[:, None] - np.arange(lags)[None, :]          # (nt, L)
    if site_scalars is None:
        site_scalars = np.zeros((len(sites), 0))
    site_scalars = np.asarray(site_scalars, dtype=float).reshape(len(sites), -1)
    out = np.empty((len(sites), len(times),
                    feature_length(n_c, lags, p, site_scalars.shape[1])))
    for s, (r, c) in enumerate(zip(rows, cols)):
        block = padded[:, :, r:r + k, c:c + k][lag_times]          # (nt, L, C, k, k)
        block = np.transpose(block, (0, 2, 1, 3, 4))                # (nt, C, L, k, k)
        finite = np.isfinite(block)
        valid = finite.all(axis=1)                                   # (nt, L, k, k)
        vals = np.where(finite, block, 0.0)
        out[s] = np.concatenate([vals.reshape(len(times), -1),
                                 valid.reshape(len(times), -1).astype(float),
                                 np.broadcast_to(site_scalars[s], (len(times), site_scalars.shape[1]))],
                                axis=1)
    return out


def extract_features(stack, grid: GridSpec, site: GeoPoint, t: int, patch_radius: int = 1,
                     lags: int = 1, site_scalars=None) -> FeatureVector:
    data = stack.data if hasattr(stack, "data") else stack
    n_c = np.shape(data)[1]
    scal = None if site_scalars is None else np.asarray(site_scalars, dtype=float)[None, :]
    vec = feature_tensor(data, grid, [site], [t], patch_radius, lags, scal)[0, 0]
    return unflatten(vec, n_c, lags, patch_radius)


def rbf_embed(coords, centers, bandwidth) -> np.ndarray:
    """Gaussian radial basis activations exp(-|u - c_k|^2 / (2 b_k^2)), shape (N, K)."""
    u = np.asarray(coords, dtype=float)
    c = np.asarray(centers, dtype=float)
    if u.ndim == 1:
        u = u[:, None] if c.ndim == 1 or c.shape[-1] == 1 else u[None, :]
    if c.ndim == 1:
        c = c[:, None]
    b = np.broadcast_to(np.asarray(bandwidth, dtype=float), (c.shape[0],))
    if np.any(b <= 0):
        raise DomainError("bandwidth must be positive")
    d2 = ((u[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-d2 / (2.0 * b * b))


def multires_centers(levels: Sequence[int], dim: int, bandwidth_scale: float = 1.0):
    """Regular knot grids on [0, 1]^dim, one per level; bandwidth = knot spacing * scale."""
    centers, widths = [], []
    for m in levels:
        if m < 2:
            raise ValueError("each level needs at least 2 knots per axis")
        axis = np.linspace(0.0, 1.0, m)
        mesh = np.meshgrid(*([axis] * dim), indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=1)
        centers.append(pts)
        widths.append(np.full(len(pts), bandwidth_scale / (m - 1)))
    return np.vstack(centers), np.concatenate(widths)
