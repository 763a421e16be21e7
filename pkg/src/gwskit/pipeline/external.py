"""Score an externally produced gridded product against the point observations."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..cv import FoldSpec, SplitSpec, score_block
from ..geo import GridSpec
from ..metrics import SPLITS, MetricsReport
from ..preprocess import PointObservationSet, anomaly_normalize
from ..stack import GridStack
from .config import ValidationError


class AlignmentError(ValidationError):
    pass


def sample_at_wells(product: GridStack, grid: GridSpec, obs: PointObservationSet, channel=0) -> np.ndarray:
    """Product value in each well's cell, (n_wells, T); NaN for wells off the grid."""
    if product.shape[2:] != grid.shape:
        raise AlignmentError(f"product is {product.shape[2]}x{product.shape[3]} cells, "
                             f"grid is {grid.n_rows}x{grid.n_cols}")
    lon = np.array([p.lon for p in obs.points])
    lat = np.array([p.lat for p in obs.points])
    rows, cols, inside = grid.cell_indices(lon, lat)
    data = product.channel(channel)
    out = np.full((obs.n_wells, product.shape[0]), np.nan)
    out[inside] = data[:, rows[inside], cols[inside]].T
    return out


def evaluate_external(product: GridStack, obs: PointObservationSet, grid: GridSpec,
                      split: SplitSpec, folds: Sequence[FoldSpec], baseline=("2004-01", "2009-12"),
                      product_times=None, channel=0, name: str = "external",
                      per_well: Optional[list] = None) -> MetricsReport:
    """R2 / MSE of baseline anomalies, product vs wells, over the CV window geometry.

    Model wells are reported under the ``prediction`` role and holdout wells
    under ``interpolation``, matching the rows produced for internal
    predictors. Wells whose series miss the baseline are left out.
    """
    if product.shape[0] != obs.n_times:
        raise AlignmentError(f"product has {product.shape[0]} timesteps, observations have {obs.n_times}")
    if product_times is not None:
        product_times = np.asarray(product_times, dtype="datetime64[M]")
        if len(product_times) != obs.n_times or np.any(product_times != obs.times):
            raise AlignmentError("product and observation time axes differ "
                                 f"({product_times[0]}.. vs {obs.times[0]}..)")
    sampled = sample_at_wells(product, grid, obs, channel)
    truth = np.where(obs.valid, obs.values, np.nan)
    p_anom = np.full_like(sampled, np.nan)
    t_anom = np.full_like(truth, np.nan)
    for i in range(obs.n_wells):
        try:
            p_anom[i] = anomaly_normalize(sampled[i], obs.times, baseline)
            t_anom[i] = anomaly_normalize(truth[i], obs.times, baseline)
        except ValueError:
            p_anom[i] = t_anom[i] = np.nan
    pos = {w: i for i, w in enumerate(obs.ids)}
    groups = (("prediction", split.model_ids), ("interpolation", split.holdout_ids))
    report = MetricsReport()
    per_well = per_well if per_well is not None else []
    for fold in folds:
        for role, ids in groups:
            rows = np.array([pos[w] for w in ids], dtype=np.int64)
            for split_name in SPLITS:
                w = np.asarray(fold.window(split_name))
                score_block(report, per_well, fold.fold_index, name, role, split_name,
                            p_anom[np.ix_(rows, w)], t_anom[np.ix_(rows, w)], list(ids))
    return report
