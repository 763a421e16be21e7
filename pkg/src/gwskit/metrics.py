"""Scores: R2, MSE, masked grid losses and the composite trend/mean-penalized loss."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geo import MaskedGrid


class UndefinedR2Error(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


def r2(pred, obs) -> float:
    """Coefficient of determination, pooled over every element given."""
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape:
        raise ValueError("pred and obs must have the same size")
    if obs.size < 2:
        raise UndefinedR2Error("R2 needs at least two observations")
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedR2Error("observations have zero variance")
    return 1.0 - float(np.sum((obs - pred) ** 2)) / ss_tot


def mse(pred, obs) -> float:
    pred = np.asarray(pred, dtype=float).ravel()
    obs = np.asarray(obs, dtype=float).ravel()
    if pred.shape != obs.shape or obs.size == 0:
        raise ValueError("mse needs equal, nonempty inputs")
    return float(np.mean((pred - obs) ** 2))


def _as_stack(grids):
    """Sequence of MaskedGrid (or a single one) -> (values (T,H,W), mask (T,H,W))."""
    if isinstance(grids, MaskedGrid):
        grids = [grids]
    vals = np.stack([g.filled(0.0) for g in grids])
    mask = np.stack([g.mask for g in grids])
    return vals, mask


def masked_mse(pred, truth) -> float:
    """Mean squared difference over cells valid in both inputs (pooled over time)."""
    pv, pm = _as_stack(pred)
    tv, tm = _as_stack(truth)
    if pv.shape != tv.shape:
        raise ValueError("grids must have the same shape")
    joint = pm & tm
    if not joint.any():
        raise EmptyMaskError("no cell is valid in both grids")
    diff = pv[joint] - tv[joint]
    return float(np.mean(diff * diff))


def lowpass(grid: MaskedGrid, pool_size: int = 3) -> MaskedGrid:
    """Mask-aware box average: valid-neighbour sum divided by valid-neighbour count."""
    if pool_size < 3 or pool_size % 2 == 0:
        raise ValueError("pool_size must be an odd integer >= 3")
    r = pool_size // 2
    vals = np.pad(grid.filled(0.0), r)
    cnt = np.pad(grid.mask.astype(float), r)
    h, w = grid.shape
    acc = np.zeros((h, w))
    num = np.zeros((h, w))
    for di in range(pool_size):
        for dj in range(pool_size):
            acc += vals[di:di + h, dj:dj + w]
            num += cnt[di:di + h, dj:dj + w]
    out = np.where(grid.mask, acc / np.where(num > 0, num, 1.0), 0.0)
    return MaskedGrid(out, grid.mask)


@dataclass(frozen=True)
class CompositeLossConfig:
    w_main: float = 1.0
    w_trend: float = 0.5
    w_mean: float = 0.5
    pool_size: int = 3

    def __post_init__(self):
        ws = (self.w_main, self.w_trend, self.w_mean)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError("weights must be nonnegative with at least one positive")
        if self.pool_size < 3 or self.pool_size % 2 == 0:
            raise ValueError("pool_size must be an odd integer >= 3")


def composite_loss(pred, truth, cfg: CompositeLossConfig = CompositeLossConfig()) -> float:
    """Masked MSE plus penalties on low-pass (trend) fields and on spatial means.

    ``pred`` and ``truth`` are equal-length sequences of :class:`MaskedGrid`
    (one per timestep). Spatial means use the cells valid in both grids.
    """
    if isinstance(pred, MaskedGrid):
        pred, truth = [pred], [truth]
    if len(pred) != len(truth):
        raise ValueError("pred and truth must have the same number of timesteps")
    total = 0.0
    if cfg.w_main:
        total += cfg.w_main * masked_mse(pred, truth)
    if cfg.w_trend:
        total += cfg.w_trend * masked_mse([lowpass(g, cfg.pool_size) for g in pred],
                                          [lowpass(g, cfg.pool_size) for g in truth])
    if cfg.w_mean:
        diffs = []
        for p, t in zip(pred, truth):
            joint = p.mask & t.mask
            if not joint.any():
                raise EmptyMaskError("no cell is valid in both grids")
            diffs.append(p.filled(0.0)[joint].mean() - t.filled(0.0)[joint].mean())
        total += cfg.w_mean * float(np.mean(np.square(diffs)))
    return total


ROLES = ("prediction", "interpolation")
SPLITS = ("train", "val", "test")
METRICS = ("r2", "mse")


def _fmt(v: float) -> str:
    return repr(float(v))


@dataclass
class MetricsReport:
    """Per-fold scores in long format; cross-fold summaries are always derived."""

    rows: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    HEADER = ("fold", "predictor", "role", "split", "metric", "value")

    def add(self, fold: int, predictor: str, role: str, split: str, metric: str, value: float):
        self.rows.append((int(fold), str(predictor), role, split, metric, float(value)))

    def extend(self, other: "MetricsReport"):
        self.rows.extend(other.rows)
        self.failures.update(other.failures)

    def values(self, predictor: str, role: str, split: str, metric: str) -> np.ndarray:
        return np.array([r[5] for r in self.rows
                         if r[1] == predictor and r[2] == role and r[3] == split and r[4] == metric])

    def aggregate(self) -> list[tuple]:
        """(predictor, role, split, metric, mean, std, n_folds) recomputed from rows.

        Non-finite fold values are left out of the summary.
        """
        keys = sorted({r[1:5] for r in self.rows})
        out = []
        for key in keys:
            vals = self.values(*key)
            vals = vals[np.isfinite(vals)]
            mean = float(vals.mean()) if len(vals) else math.nan
            std = float(vals.std(ddof=1)) if len(vals) > 1 else math.nan
            out.append((*key, mean, std, len(vals)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for row in sorted(self.rows, key=lambda r: r[:5]):
            w.writerow([*row[:5], _fmt(row[5])])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("predictor", "role", "split", "metric", "mean", "std", "n_folds"))
        for row in self.aggregate():
            w.writerow([*row[:4], _fmt(row[4]), _fmt(row[5]), row[6]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rep = cls()
        rd = csv.reader(io.StringIO(text))
        header = next(rd, None)
        if header is None or tuple(header) != cls.HEADER:
            raise ValueError("not a metrics report CSV")
        for row in rd:
            rep.add(int(row[0]), row[1], row[2], row[3], row[4], float(row[5]))
        return rep
