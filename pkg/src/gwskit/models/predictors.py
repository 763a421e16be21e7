"""Grid-to-point predictors behind a common fit/predict interface.

Predictors see only what the CV harness hands them: a :class:`TrainData`
with targets of the training wells over the training window (min-max scaled),
and at prediction time a :class:`PredictContext`. Predictions are returned in
the scaled target space unless ``output_space == "physical"``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..geo import GeoPoint, GridSpec
from ..preprocess import ScalingParams
from .features import feature_tensor, multires_centers, rbf_embed
from .nn import QuantileNet, train


class RidgeSolverError(np.linalg.LinAlgError):
    pass


@dataclass
class TrainData:
    sites: list
    targets: np.ndarray            # (n_sites, n_train), scaled
    months: np.ndarray             # calendar month of every timestep on the full axis
    n_times_total: int
    grids: Optional[np.ndarray] = None   # (n_train, C, H, W), scaled
    grid: Optional[GridSpec] = None
    scaler: Optional[ScalingParams] = None
    seed: int = 0

    @property
    def n_train(self) -> int:
        return self.targets.shape[1]


@dataclass
class PredictContext:
    months: np.ndarray
    n_times_total: int
    grids: Optional[np.ndarray] = None   # (T, C, H, W), scaled
    grid: Optional[GridSpec] = None
    scaler: Optional[ScalingParams] = None
    observed: Optional[Callable] = None  # observed(site_ids, times) -> scaled values


class Predictor:
    name = "predictor"
    output_space = "scaled"

    def fit(self, data: TrainData) -> "Predictor":
        raise NotImplementedError

    def predict(self, ctx: PredictContext, sites: Sequence[GeoPoint], times) -> np.ndarray:
        raise NotImplementedError


class Climatology(Predictor):
    name = "climatology"

    def fit(self, data):
        months = data.months[: data.n_train]
        self.table = {}
        for s, row in zip(data.sites, data.targets):
            clim = np.full(13, np.nan)
            for m in range(1, 13):
                sel = (months == m) & np.isfinite(row)
                if sel.any():
                    clim[m] = row[sel].mean()
            self.table[s.id] = clim
        return self

    def predict(self, ctx, sites, times):
        times = np.asarray(times)
        out = np.full((len(sites), len(times)), np.nan)
        for i, s in enumerate(sites):
            if s.id in self.table:
                out[i] = self.table[s.id][ctx.months[times]]
        return out


class Persistence(Predictor):
    """Value observed one step earlier; undefined at t = 0."""

    name = "persistence"

    def fit(self, data):
        return self

    def predict(self, ctx, sites, times):
        times = np.asarray(times)
        out = np.full((len(sites), len(times)), np.nan)
        ok = times >= 1
        if ok.any():
            out[:, ok] = ctx.observed([s.id for s in sites], times[ok] - 1)
        return out


def ridge_fit(x, y, alpha: float):
    """Closed-form ridge coefficients (X^T X + alpha I)^-1 X^T y, no intercept."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    a = x.T @ x + alpha * np.eye(x.shape[1])
    try:
        if alpha == 0 and np.linalg.matrix_rank(a) < a.shape[0]:
            raise np.linalg.LinAlgError("singular normal matrix")
        return np.linalg.solve(a, x.T @ y)
    except np.linalg.LinAlgError as exc:
        raise RidgeSolverError(
            f"ridge normal equations are singular ({exc}); use alpha > 0") from exc


class Ridge(Predictor):
    """Ridge regression on lagged predictor patches around each site."""

    name = "ridge"

    def __init__(self, alpha: float = 1.0, patch_radius: int = 1, lags: int = 1,
                 site_coords: bool = True):
        self.alpha = alpha
        self.patch_radius = patch_radius
        self.lags = lags
        self.site_coords = site_coords

    def _scalars(self, grid: GridSpec, sites):
        if not self.site_coords:
            return None
        return np.array([[(s.lon - grid.lon_min) / (grid.lon_max - grid.lon_min),
                          (s.lat - grid.lat_min) / (grid.lat_max - grid.lat_min)] for s in sites])

    def _features(self, grids, grid, sites, times):
        return feature_tensor(grids, grid, sites, times, self.patch_radius, self.lags,
                              self._scalars(grid, sites))

    def fit(self, data):
        if data.grids is None:
            raise ValueError("ridge needs gridded predictors")
        times = np.arange(self.lags - 1, data.n_train)
        feats = self._features(data.grids, data.grid, data.sites, times)
        x = feats.reshape(-1, feats.shape[-1])
        y = data.targets[:, times].ravel()
        ok = np.isfinite(y)
        x, y = x[ok], y[ok]
        self.x_mean = x.mean(axis=0)
        self.y_mean = y.mean()
        self.coef = ridge_fit(x - self.x_mean, y - self.y_mean, self.alpha)
        return self

    def predict(self, ctx, sites, times):
        times = np.asarray(times)
        out = np.full((len(sites), len(times)), np.nan)
        ok = times >= self.lags - 1
        if ok.any():
            feats = self._features(ctx.grids, ctx.grid, sites, times[ok])
            out[:, ok] = (feats - self.x_mean) @ self.coef + self.y_mean
        return out


@dataclass
class RbfConfig:
    space_levels: tuple = (3, 5, 9)
    time_levels: tuple = (4, 12, 36)
    bandwidth_scale: float = 1.0
    hidden: tuple = (64, 64)
    levels: tuple = (0.1, 0.5, 0.9)
    use_scalar_predictors: bool = True
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 64
    patience: int = 20
    inner_val_fraction: float = 0.1
    activation: str = "relu"


class RbfQuantile(Predictor):
    """Quantile network on multi-resolution RBF embeddings of (lon, lat, t).

    Optionally appends the predictor values of the site's own cell at time t
    (scalars only, no neighbourhood). Early stopping uses a seeded random
    fraction of the training samples, so it never looks past the training
    window; the median head is the point prediction.
    """

    name = "rbf_quantile"

    def __init__(self, config: Optional[RbfConfig] = None, **overrides):
        cfg = config or RbfConfig()
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise TypeError(f"unknown rbf_quantile option {k!r}")
            setattr(cfg, k, tuple(v) if isinstance(v, list) else v)
        self.cfg = cfg
        self.space_centers, self.space_bw = multires_centers(cfg.space_levels, 2, cfg.bandwidth_scale)
        self.time_centers, self.time_bw = multires_centers(cfg.time_levels, 1, cfg.bandwidth_scale)

    def _inputs(self, grids, grid, n_total, sites, times):
        lon = np.array([s.lon for s in sites])
        lat = np.array([s.lat for s in sites])
        u = np.column_stack([(lon - grid.lon_min) / (grid.lon_max - grid.lon_min),
                             (lat - grid.lat_min) / (grid.lat_max - grid.lat_min)])
        es = rbf_embed(u, self.space_centers, self.space_bw)                 # (n, Ks)
        et = rbf_embed((np.asarray(times, dtype=float) / max(n_total - 1, 1))[:, None],
                       self.time_centers, self.time_bw)                       # (nt, Kt)
        n, nt = len(sites), len(times)
        parts = [np.repeat(es, nt, axis=0), np.tile(et, (n, 1))]
        if self.cfg.use_scalar_predictors and grids is not None:
            feats = feature_tensor(grids, grid, sites, times, 0, 1)
            n_c = grids.shape[1]
            parts.append(feats[:, :, :n_c].reshape(n * nt, n_c))
        return np.concatenate(parts, axis=1)

    def fit(self, data):
        if data.grid is None:
            raise ValueError("rbf_quantile needs the grid definition to normalize coordinates")
        cfg = self.cfg
        times = np.arange(data.n_train)
        x = self._inputs(data.grids, data.grid, data.n_times_total, data.sites, times)
        y = data.targets.ravel()
        ok = np.isfinite(y)
        x, y = x[ok], y[ok]
        rng = np.random.default_rng(data.seed)
        is_val = rng.random(len(y)) < cfg.inner_val_fraction
        sizes = (x.shape[1], *cfg.hidden, len(cfg.levels))
        self.net = QuantileNet(sizes, cfg.levels, seed=data.seed, activation=cfg.activation)
        self.history = train(self.net, x[~is_val], y[~is_val], x[is_val], y[is_val], lr=cfg.lr,
                             epochs=cfg.epochs, batch_size=cfg.batch_size, patience=cfg.patience,
                             seed=data.seed)
        return self

    def predict_quantiles(self, ctx, sites, times):
        x = self._inputs(ctx.grids, ctx.grid, ctx.n_times_total, sites, np.asarray(times))
        q = self.net.predict_quantiles(x)
        return q.reshape(len(sites), len(times), -1)

    def predict(self, ctx, sites, times):
        q = self.predict_quantiles(ctx, sites, times)
        median = int(np.argmin(np.abs(np.asarray(self.cfg.levels) - 0.5)))
        return q[:, :, median]


class ExternalPredictions(Predictor):
    """Scores predictions produced elsewhere (CSV: well_id,time_index,value in metres)."""

    name = "external"
    output_space = "physical"

    def __init__(self, table: dict):
        self.table = table

    @classmethod
    def from_csv(cls, path) -> "ExternalPredictions":
        table = {}
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            if rd.fieldnames is None or list(rd.fieldnames)[:3] != ["well_id", "time_index", "value"]:
                raise ValueError(f"{path}: header must be well_id,time_index,value")
            for lineno, row in enumerate(rd, start=2):
                try:
                    key = (row["well_id"], int(row["time_index"]))
                    table[key] = float(row["value"])
                except (TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from exc
        return cls(table)

    def fit(self, data):
        return self

    def predict(self, ctx, sites, times):
        return np.array([[self.table.get((s.id, int(t)), np.nan) for t in times] for s in sites])


PREDICTOR_KINDS = {
    "climatology": Climatology,
    "persistence": Persistence,
    "ridge": Ridge,
    "rbf_quantile": RbfQuantile,
}


def make_predictor(kind: str, **params) -> Predictor:
    if kind == "external":
        return ExternalPredictions.from_csv(params["path"])
    if kind not in PREDICTOR_KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}; choose from {sorted(PREDICTOR_KINDS)}")
    return PREDICTOR_KINDS[kind](**params)
