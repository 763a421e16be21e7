"""Curation of monthly point series: segmentation, gap filling, storage
conversion, baseline anomalies and min-max scaling.

Pipeline order is fixed: segment -> fill -> depth-to-storage -> anomaly,
with min-max scaling applied last (per CV fold) so it can be inverted for
reporting in metres.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geo import DomainError, GeoPoint

logger = logging.getLogger(__name__)


class UnusableSeriesError(ValueError):
    """A series fails the preconditions for gap filling."""


class ConstantChannelError(ValueError):
    pass


def month_axis(start: str, n: int) -> np.ndarray:
    """``n`` consecutive calendar months from ``start`` ('YYYY-MM')."""
    return np.datetime64(start, "M") + np.arange(n)


@dataclass
class PointObservationSet:
    points: list
    times: np.ndarray
    values: np.ndarray
    valid: Optional[np.ndarray] = None
    units: str = "m"

    def __post_init__(self):
        self.points = list(self.points)
        self.times = np.asarray(self.times, dtype="datetime64[M]")
        self.values = np.array(self.values, dtype=float).reshape(len(self.points), len(self.times))
        if self.valid is None:
            self.valid = np.isfinite(self.values)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValueError("valid mask must match values")
        if len(self.times) > 1 and np.any(np.diff(self.times.astype(np.int64)) != 1):
            raise ValueError("times must be consecutive calendar months")
        if np.any(self.valid != np.isfinite(self.values)):
            raise ValueError("valid must be true exactly where values are finite")
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise ValueError("well ids must be unique")

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.points]

    @property
    def n_wells(self) -> int:
        return len(self.points)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def months_of_year(self) -> np.ndarray:
        return self.times.astype(np.int64) % 12 + 1

    def subset(self, indices) -> "PointObservationSet":
        idx = np.asarray(indices, dtype=np.int64)
        return PointObservationSet([self.points[i] for i in idx], self.times,
                                   self.values[idx], self.valid[idx], self.units)


@dataclass
class ScalingParams:
    mins: np.ndarray
    maxs: np.ndarray

    def transform(self, data):
        data = np.asarray(data, dtype=float)
        shape = (-1,) + (1,) * (data.ndim - 1)
        lo, hi = self.mins.reshape(shape), self.maxs.reshape(shape)
        return (data - lo) / (hi - lo)

    def inverse_transform(self, data):
        data = np.asarray(data, dtype=float)
        shape = (-1,) + (1,) * (data.ndim - 1)
        lo, hi = self.mins.reshape(shape), self.maxs.reshape(shape)
        return data * (hi - lo) + lo


def minmax_fit_transform(data, fit_subset):
    """Scale each channel (axis 0) to [0, 1] using statistics of ``fit_subset`` only.

    ``fit_subset`` indexes axis 1 (samples); may be an index array or boolean mask.
    Non-finite entries are ignored when computing the statistics.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[None, :]
    fit_part = data[:, fit_subset]
    if fit_part.shape[1] == 0:
        raise ValueError("fit_subset must be nonempty")
    flat = fit_part.reshape(fit_part.shape[0], -1)
    with np.errstate(all="ignore"):
        mins = np.nanmin(np.where(np.isfinite(flat), flat, np.nan), axis=1)
        maxs = np.nanmax(np.where(np.isfinite(flat), flat, np.nan), axis=1)
    bad = ~(maxs > mins)
    if np.any(bad):
        raise ConstantChannelError(f"channels {np.flatnonzero(bad).tolist()} are constant on the fit subset")
    params = ScalingParams(mins, maxs)
    return params.transform(data), params


def _rolling_stats(x: np.ndarray, ok: np.ndarray, window: int):
    """Mean and variance of each length-``window`` block starting at i (valid entries only)."""
    xz = np.where(ok, x, 0.0)
    c = np.concatenate([[0], np.cumsum(ok)])
    s1 = np.concatenate([[0.0], np.cumsum(xz)])
    s2 = np.concatenate([[0.0], np.cumsum(xz * xz)])
    cnt = c[window:] - c[:-window]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = (s1[window:] - s1[:-window]) / cnt
        var = (s2[window:] - s2[:-window]) / cnt - mean * mean
    return mean, np.maximum(var, 0.0), cnt


def _ratio(num, den):
    tiny = 1e-12 * (1.0 + np.abs(num))
    out = np.where(den > tiny, num / np.where(den > tiny, den, 1.0), np.inf)
    return np.where(num <= tiny, 0.0, out)


def segment_series(values, valid=None, window: int = 24, z_threshold: float = 4.0) -> list[int]:
    """Split indices where a series changes level or variability abruptly.

    At each candidate index k the ``window`` months before and after are
    compared; the absolute differences of their means and of their standard
    deviations are divided by the pooled within-window standard deviation.
    Contiguous runs above ``z_threshold`` contribute their peak, and accepted
    splits are at least ``window`` apart.
    """
    if window < 12:
        raise ValueError("window must be at least 12 months")
    x = np.asarray(values, dtype=float)
    ok = np.isfinite(x) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(x)
    n = len(x)
    if n < 2 * window:
        return []
    mean, var, cnt = _rolling_stats(x, ok, window)
    ks = np.arange(window, n - window + 1)
    left, right = ks - window, ks
    enough = (cnt[left] >= window // 2) & (cnt[right] >= window // 2)
    pooled = np.sqrt(0.5 * (var[left] + var[right]))
    z_mean = _ratio(np.abs(mean[right] - mean[left]), pooled)
    z_sd = _ratio(np.abs(np.sqrt(var[right]) - np.sqrt(var[left])), pooled)
    z = np.where(enough, np.maximum(z_mean, z_sd), 0.0)

    above = z > z_threshold
    peaks = []
    i = 0
    while i < len(z):
        if above[i]:
            j = i
            while j + 1 < len(z) and above[j + 1]:
                j += 1
            seg = z[i:j + 1]
            # centre of the plateau of maxima, so a clean step lands exactly on the step
            tops = np.flatnonzero(seg == seg.max())
            peaks.append((seg.max(), int(ks[i + tops[len(tops) // 2]])))
            i = j + 1
        else:
            i += 1
    chosen: list[int] = []
    for _, k in sorted(peaks, key=lambda p: (-p[0], p[1])):
        if all(abs(k - c) >= window for c in chosen):
            chosen.append(k)
    return sorted(chosen)


def split_ranges(n: int, boundaries: Sequence[int]) -> list[tuple[int, int]]:
    edges = [0, *boundaries, n]
    return [(a, b) for a, b in zip(edges[:-1], edges[1:])]


def fill_gaps(values, valid=None, months=None, min_valid: int = 24) -> np.ndarray:
    """Fill missing months with monthly climatology plus interpolated anomalies.

    The deseasonalized series (value minus calendar-month mean) is linearly
    interpolated across interior gaps; leading and trailing gaps get the
    climatology alone. Valid entries pass through unchanged.
    """
    x = np.asarray(values, dtype=float)
    ok = np.isfinite(x) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(x)
    if months is None:
        months = np.arange(len(x)) % 12 + 1
    months = np.asarray(months, dtype=np.int64)
    if ok.sum() < min_valid:
        raise UnusableSeriesError(f"only {int(ok.sum())} valid months (< {min_valid})")
    clim = np.full(13, np.nan)
    for m in range(1, 13):
        sel = ok & (months == m)
        if not sel.any():
            raise UnusableSeriesError(f"no valid value for calendar month {m}")
        clim[m] = x[sel].mean()
    if ok.all():
        return x.copy()
    seasonal = clim[months]
    idx = np.arange(len(x))
    anom = np.interp(idx, idx[ok], x[ok] - seasonal[ok], left=0.0, right=0.0)
    first, last = idx[ok][0], idx[ok][-1]
    anom[(idx < first) | (idx > last)] = 0.0
    out = seasonal + anom
    out[ok] = x[ok]
    return out


def gwl_to_gws(depth, sy: float):
    """Depth to water (m below ground) to storage in metres of water."""
    if not (0.0 < sy <= 1.0):
        raise DomainError(f"storage coefficient must be in (0, 1], got {sy}")
    return -sy * np.asarray(depth, dtype=float)


def anomaly_normalize(series, times, baseline=("2004-01", "2009-12"), valid=None,
                      min_overlap: int = 12):
    """Subtract the mean over the (inclusive) baseline months."""
    x = np.asarray(series, dtype=float)
    times = np.asarray(times, dtype="datetime64[M]")
    lo, hi = np.datetime64(baseline[0], "M"), np.datetime64(baseline[1], "M")
    ok = np.isfinite(x) if valid is None else np.asarray(valid, dtype=bool) & np.isfinite(x)
    in_base = (times >= lo) & (times <= hi) & ok
    if in_base.sum() < min_overlap:
        raise ValueError(f"baseline {baseline[0]}..{baseline[1]} overlaps only "
                         f"{int(in_base.sum())} valid months (< {min_overlap})")
    return x - x[in_base].mean()


@dataclass
class CurationLog:
    entries: list = field(default_factory=list)

    def add(self, well_id: str, action: str, reason: str):
        self.entries.append((well_id, action, reason))
        logger.info("%s %s: %s", well_id, action, reason)

    def lines(self) -> list[str]:
        return [f"{w}\t{a}\t{r}" for w, a, r in self.entries]


def deduplicate_locations(obs: PointObservationSet, log: Optional[CurationLog] = None):
    """Keep one series per exact coordinate: the one with most valid months (then lowest id)."""
    log = log if log is not None else CurationLog()
    groups: dict = {}
    for i, p in enumerate(obs.points):
        groups.setdefault((p.lon, p.lat), []).append(i)
    keep = []
    for members in groups.values():
        best = min(members, key=lambda i: (-int(obs.valid[i].sum()), obs.points[i].id))
        keep.append(best)
        for i in members:
            if i != best:
                log.add(obs.points[i].id, "dropped", f"duplicate location of {obs.points[best].id}")
    return obs.subset(sorted(keep)), log


def curate(obs: PointObservationSet, storage: Optional[Mapping[str, float]] = None,
           baseline=("2004-01", "2009-12"), window: int = 24, z_threshold: float = 4.0,
           input_kind: str = "depth"):
    """Run segment -> fill -> (depth to storage) -> anomaly on every well.

    Subseries produced by segmentation become wells ``<id>_1``, ``<id>_2``...,
    gap-filled and holding values only within their own span. Wells failing any step are
    dropped with the reason recorded in the returned :class:`CurationLog`.
    """
    if input_kind not in ("depth", "storage"):
        raise ValueError("input_kind must be 'depth' or 'storage'")
    log = CurationLog()
    months = obs.months_of_year
    pieces = []
    for i, p in enumerate(obs.points):
        x = np.where(obs.valid[i], obs.values[i], np.nan)
        cuts = segment_series(x, obs.valid[i], window, z_threshold)
        if cuts:
            log.add(p.id, "segmented", f"split at time indices {cuts}")
            for k, (a, b) in enumerate(split_ranges(len(x), cuts), start=1):
                sub = np.full_like(x, np.nan)
                sub[a:b] = x[a:b]
                pieces.append((GeoPoint(f"{p.id}_{k}", p.lon, p.lat, p.x, p.y), p.id, sub, (a, b)))
        else:
            pieces.append((p, p.id, x, (0, len(x))))

    out_points, out_values = [], []
    for point, source_id, x, (a, b) in pieces:
        try:
            # a piece is filled only inside its own span
            filled = np.full_like(x, np.nan)
            filled[a:b] = fill_gaps(x[a:b], None, months[a:b])
            if input_kind == "depth":
                if storage is None or source_id not in storage:
                    raise UnusableSeriesError("no storage coefficient")
                filled = gwl_to_gws(filled, storage[source_id])
            anom = anomaly_normalize(filled, obs.times, baseline, valid=np.isfinite(x))
        except (UnusableSeriesError, DomainError, ValueError) as exc:
            log.add(point.id, "dropped", str(exc))
            continue
        out_points.append(point)
        out_values.append(anom)
    if not out_points:
        return PointObservationSet([], obs.times, np.zeros((0, obs.n_times))), log
    curated = PointObservationSet(out_points, obs.times, np.array(out_values))
    curated, log = deduplicate_locations(curated, log)
    return curated, log
