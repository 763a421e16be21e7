"""Spatial holdout plus expanding-window temporal cross-validation.

Fold k trains on ``[0, e_k)``, validates on ``[e_k, e_k + L)`` and tests on
``[e_k + L, e_k + 2L)`` with ``e_k = T - 2L - (n_folds - k) L``; the final
fold's test window ends at the last timestep and consecutive test windows
are adjacent. Every read of target or predictor data made by the harness
goes through an :class:`AccessLog`, so a run can be audited for leakage.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Optional, Sequence

import numpy as np

from .geo import GridSpec, coords_xy, rasterize
from .kriging import GlobalMode, LocalMode, build_system, krige_targets
from .metrics import (ROLES, SPLITS, CompositeLossConfig, MetricsReport, UndefinedR2Error,
                      composite_loss, mse, r2)
from .models.predictors import PredictContext, Predictor, TrainData
from .preprocess import PointObservationSet, ScalingParams
from .variogram import FAMILIES, empirical_variogram, fit, fit_best

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    holdout_fraction: float
    seed: int
    holdout_ids: tuple
    model_ids: tuple


@dataclass(frozen=True)
class FoldSpec:
    fold_index: int
    train: range
    val: range
    test: range

    @property
    def train_end(self) -> int:
        return self.train.stop

    def window(self, split: str) -> range:
        return getattr(self, split)


def holdout_count(n: int, fraction: float) -> int:
    # decimal arithmetic so 0.5 * n rounds half up exactly
    return int((Decimal(repr(float(fraction))) * n).to_integral_value(ROUND_HALF_UP))


def spatial_split(wells: Sequence[str], fraction: float = 0.08, seed: int = 0) -> SplitSpec:
    """Uniform sample without replacement of round-half-up(fraction * n) holdout wells."""
    wells = [str(w) for w in wells]
    if not 0.0 < fraction < 1.0:
        raise ValueError("holdout fraction must be in (0, 1)")
    if len(wells) < 2:
        raise ValueError("need at least two wells to split")
    if len(set(wells)) != len(wells):
        raise ValueError("well ids must be unique")
    k = holdout_count(len(wells), fraction)
    if k == 0 or k == len(wells):
        raise ValueError(f"holdout fraction {fraction} gives {k} of {len(wells)} wells")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(len(wells), size=k, replace=False).tolist())
    hold = tuple(w for i, w in enumerate(wells) if i in chosen)
    model = tuple(w for i, w in enumerate(wells) if i not in chosen)
    return SplitSpec(float(fraction), int(seed), hold, model)


def temporal_folds(n_times: int, n_folds: int = 10, eval_len: int = 8) -> list[FoldSpec]:
    if n_folds < 1 or eval_len < 1:
        raise ValueError("n_folds and eval_len must be positive")
    need = (n_folds + 2) * eval_len
    if n_times < need:
        raise ValueError(f"{n_folds} folds with eval_len {eval_len} need at least "
                         f"{need} timesteps, got {n_times}")
    folds = []
    for k in range(1, n_folds + 1):
        e = n_times - 2 * eval_len - (n_folds - k) * eval_len
        folds.append(FoldSpec(k, range(0, e), range(e, e + eval_len),
                              range(e + eval_len, e + 2 * eval_len)))
    return folds


@dataclass(frozen=True)
class Access:
    fold: int
    phase: str      # "fit", "predict" or "score"
    kind: str       # "targets" or "grids"
    wells: frozenset
    t_min: int
    t_max: int      # inclusive


@dataclass
class AccessLog:
    entries: list = field(default_factory=list)

    def record(self, fold, phase, kind, wells, times):
        times = np.atleast_1d(np.asarray(times, dtype=np.int64))
        if times.size == 0:
            return
        self.entries.append(Access(int(fold), phase, kind, frozenset(wells),
                                   int(times.min()), int(times.max())))


def audit_leakage(log: AccessLog, split: SplitSpec, folds: Sequence[FoldSpec]) -> list[str]:
    """Violations of the no-leakage rules; an empty list means the run is clean.

    Holdout-well targets may only be read for scoring, and every read made
    while fitting fold k must precede that fold's training end.
    """
    ends = {f.fold_index: f.train_end for f in folds}
    hold = set(split.holdout_ids)
    problems = []
    for a in log.entries:
        if a.kind == "targets" and a.phase != "score" and a.wells & hold:
            problems.append(f"fold {a.fold}: holdout wells {sorted(a.wells & hold)} read during {a.phase}")
        if a.phase == "fit" and a.t_max >= ends.get(a.fold, -1):
            problems.append(f"fold {a.fold}: {a.kind} at t={a.t_max} read while fitting "
                            f"(train ends at {ends.get(a.fold)})")
    return problems


@dataclass
class PredictorSpec:
    name: str
    factory: Callable[[], Predictor]
    interpolation: str = "krige"     # or "direct" for predictors that accept any site


@dataclass
class ExperimentConfig:
    variogram_family: str = "exponential"     # or "auto"
    variogram_bins: int = 15
    variogram_max_lag: Optional[float] = None
    kriging_mode: object = GlobalMode()
    scaler_fit: str = "train"                 # "all" leaks and exists to exercise the audit
    loss: CompositeLossConfig = CompositeLossConfig()
    seed: int = 0


@dataclass
class ExperimentData:
    obs: PointObservationSet
    stack: Optional[object] = None    # GridStack aligned with obs.times
    grid: Optional[GridSpec] = None


@dataclass
class ExperimentResult:
    report: MetricsReport
    per_well: list = field(default_factory=list)       # (fold, predictor, role, split, well, r2)
    composite: list = field(default_factory=list)      # (fold, predictor, split, value)
    final_predictions: list = field(default_factory=list)  # (predictor, role, well, t, value)
    variograms: dict = field(default_factory=dict)
    access_log: AccessLog = field(default_factory=AccessLog)


def _safe_minmax(data: np.ndarray, axis) -> ScalingParams:
    with np.errstate(all="ignore"):
        lo = np.nanmin(data, axis=axis)
        hi = np.nanmax(data, axis=axis)
    lo = np.atleast_1d(np.where(np.isfinite(lo), lo, 0.0))
    hi = np.atleast_1d(np.where(np.isfinite(hi), hi, 1.0))
    hi = np.where(hi > lo, hi, lo + 1.0)
    return ScalingParams(lo.astype(float), hi.astype(float))


class _Source:
    """Logged access to the experiment's raw arrays."""

    def __init__(self, data: ExperimentData, log: AccessLog):
        self.data = data
        self.log = log
        self.ids = np.array(data.obs.ids)
        self.values = np.where(data.obs.valid, data.obs.values, np.nan)
        self.grids = None if data.stack is None else np.asarray(data.stack.data, dtype=float)

    def targets(self, fold, phase, rows, times):
        rows = np.asarray(rows, dtype=np.int64)
        times = np.asarray(times, dtype=np.int64)
        self.log.record(fold, phase, "targets", self.ids[rows].tolist(), times)
        return self.values[np.ix_(rows, times)]

    def stack(self, fold, phase, times):
        times = np.asarray(times, dtype=np.int64)
        self.log.record(fold, phase, "grids", (), times)
        return self.grids[times]


def score_block(report, per_well, fold, name, role, split, pred, obs, ids):
    ok = np.isfinite(pred) & np.isfinite(obs)
    try:
        v_r2 = r2(pred[ok], obs[ok])
    except UndefinedR2Error:
        v_r2 = math.nan
    v_mse = mse(pred[ok], obs[ok]) if ok.any() else math.nan
    report.add(fold, name, role, split, "r2", v_r2)
    report.add(fold, name, role, split, "mse", v_mse)
    for i, well in enumerate(ids):
        row_ok = ok[i]
        if row_ok.sum() >= 2 and np.var(obs[i][row_ok]) > 0:
            per_well.append((fold, name, role, split, well, r2(pred[i][row_ok], obs[i][row_ok])))


def _fit_variogram(cfg: ExperimentConfig, xy, values):
    emp = empirical_variogram(xy, values, cfg.variogram_bins, cfg.variogram_max_lag)
    if cfg.variogram_family == "auto":
        return fit_best(emp, FAMILIES)
    return fit(emp, cfg.variogram_family)


def _run_fold(src: _Source, data: ExperimentData, predictors, split, fold: FoldSpec,
              cfg: ExperimentConfig, result: ExperimentResult, is_final: bool):
    obs = data.obs
    id_pos = {w: i for i, w in enumerate(obs.ids)}
    model_rows = np.array([id_pos[w] for w in split.model_ids])
    hold_rows = np.array([id_pos[w] for w in split.holdout_ids])
    model_sites = [obs.points[i] for i in model_rows]
    hold_sites = [obs.points[i] for i in hold_rows]
    k = fold.fold_index
    e = fold.train_end
    t_end = fold.test.stop
    train_t = np.arange(e)
    all_t = np.arange(t_end)
    scale_t = train_t if cfg.scaler_fit == "train" else np.arange(obs.n_times)

    y_train = src.targets(k, "fit", model_rows, scale_t)
    y_scaler = _safe_minmax(y_train.reshape(1, -1), axis=1)
    if cfg.scaler_fit != "train":
        y_train = src.targets(k, "fit", model_rows, train_t)
    g_scaler = grids_scaled = None
    if src.grids is not None:
        g_fit = src.stack(k, "fit", scale_t)
        g_scaler = _safe_minmax(np.moveaxis(g_fit, 1, 0).reshape(g_fit.shape[1], -1), axis=1)
        g_train = g_scaler.transform(np.moveaxis(src.stack(k, "fit", train_t), 1, 0))
        grids_scaled = np.moveaxis(g_train, 0, 1)

    train_data = TrainData(sites=model_sites, targets=y_scaler.transform(y_train[None])[0],
                           months=obs.months_of_year, n_times_total=obs.n_times,
                           grids=grids_scaled, grid=data.grid, scaler=y_scaler, seed=cfg.seed)

    vg = _fit_variogram(cfg, coords_xy(model_sites), y_train.T)
    result.variograms[k] = vg
    ksys = build_system(model_sites, vg, cfg.kriging_mode)

    def observed(site_ids, times):
        rows = np.array([id_pos[w] for w in site_ids])
        return y_scaler.transform(src.targets(k, "predict", rows, times)[None])[0]

    full_grids = None
    if src.grids is not None:
        full_grids = np.moveaxis(g_scaler.transform(np.moveaxis(src.stack(k, "predict", all_t), 1, 0)), 0, 1)
    ctx = PredictContext(months=obs.months_of_year, n_times_total=obs.n_times, grids=full_grids,
                         grid=data.grid, scaler=y_scaler, observed=observed)

    truth_model = src.targets(k, "score", model_rows, all_t)
    truth_hold = src.targets(k, "score", hold_rows, all_t)
    report = result.report
    for spec in predictors:
        model = spec.factory().fit(train_data)
        pred = model.predict(ctx, model_sites, all_t)
        if spec.interpolation == "direct":
            pred_hold = model.predict(ctx, hold_sites, all_t)
        if model.output_space == "scaled":
            pred = y_scaler.inverse_transform(pred[None])[0]
            if spec.interpolation == "direct":
                pred_hold = y_scaler.inverse_transform(pred_hold[None])[0]
        if spec.interpolation != "direct":
            pred_hold = np.full((len(hold_sites), len(all_t)), np.nan)
            complete = np.all(np.isfinite(pred), axis=0)
            if complete.any():
                est, _ = krige_targets(ksys, pred[:, complete].T, coords_xy(hold_sites))
                pred_hold[:, complete] = est.T
        for split_name in SPLITS:
            w = np.asarray(fold.window(split_name))
            score_block(report, result.per_well, k, spec.name, "prediction", split_name,
                        pred[:, w], truth_model[:, w], split.model_ids)
            score_block(report, result.per_well, k, spec.name, "interpolation", split_name,
                        pred_hold[:, w], truth_hold[:, w], split.holdout_ids)
            if data.grid is not None:
                result.composite.append((k, spec.name, split_name,
                                         _composite(data.grid, model_sites, pred[:, w],
                                                    truth_model[:, w], cfg.loss)))
        if is_final:
            for role, sites, p in (("prediction", model_sites, pred), ("interpolation", hold_sites, pred_hold)):
                for i, s in enumerate(sites):
                    for t in all_t:
                        result.final_predictions.append((spec.name, role, s.id, int(t), float(p[i, t])))


class _Obs:
    def __init__(self, points, values):
        self.points = points
        self.values = values
        self.valid = np.isfinite(values)


def _composite(grid, sites, pred, truth, cfg):
    """Composite loss between rasterized predictions and rasterized observations."""
    both = np.isfinite(pred) & np.isfinite(truth)
    p_src = _Obs(sites, np.where(both, pred, np.nan))
    t_src = _Obs(sites, np.where(both, truth, np.nan))
    p_grids, t_grids = [], []
    for t in range(pred.shape[1]):
        if both[:, t].any():
            p_grids.append(rasterize(p_src, grid, t))
            t_grids.append(rasterize(t_src, grid, t))
    if not p_grids:
        return math.nan
    return composite_loss(p_grids, t_grids, cfg)


def run_experiment(data: ExperimentData, predictors: Sequence[PredictorSpec], split: SplitSpec,
                   folds: Sequence[FoldSpec], config: ExperimentConfig = ExperimentConfig(),
                   access_log: Optional[AccessLog] = None) -> ExperimentResult:
    """Train and score every predictor on every fold.

    Prediction scores use the model wells; interpolation scores use the
    holdout wells, reached by kriging the model-well predictions (or by
    predicting directly for ``interpolation="direct"``). A failing fold is
    recorded in ``report.failures`` and the run continues.
    """
    if data.stack is not None and data.stack.data.shape[0] != data.obs.n_times:
        raise ValueError("grid stack and observations must share the time axis")
    result = ExperimentResult(MetricsReport(), access_log=access_log or AccessLog())
    src = _Source(data, result.access_log)
    last = max(f.fold_index for f in folds)
    for fold in folds:
        try:
            _run_fold(src, data, predictors, split, fold, config, result, fold.fold_index == last)
        except Exception as exc:  # noqa: BLE001 - a fold failure must not end the run
            logger.exception("fold %d failed", fold.fold_index)
            result.report.failures[fold.fold_index] = f"{type(exc).__name__}: {exc}"
            result.report.rows = [r for r in result.report.rows if r[0] != fold.fold_index]
    return result
