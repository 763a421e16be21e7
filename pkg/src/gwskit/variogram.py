"""Empirical semivariograms and parametric model fitting.

Ranges follow the "practical range" convention: exponential and gaussian
models reach ~95% of the sill at ``range`` (scale factors 3 and sqrt(3)),
the spherical model reaches the sill exactly at ``range``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from .geo import DomainError, coords_xy

logger = logging.getLogger(__name__)

FAMILIES = ("spherical", "exponential", "gaussian")


class EmptyVariogramError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalVariogram:
    bin_centers: np.ndarray
    semivariances: np.ndarray
    pair_counts: np.ndarray

    def __len__(self):
        return len(self.bin_centers)


@dataclass(frozen=True)
class VariogramModel:
    family: str
    nugget: float
    partial_sill: float
    range: float
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown variogram family {self.family!r}; expected one of {FAMILIES}")
        if self.nugget < 0 or self.partial_sill < 0:
            raise ValueError("nugget and partial_sill must be nonnegative")
        if not self.range > 0:
            raise ValueError("range must be positive")

    @property
    def sill(self) -> float:
        return self.nugget + self.partial_sill

    def __call__(self, h):
        return gamma(self, h)

    def to_dict(self) -> dict:
        return {"family": self.family, "nugget": self.nugget,
                "partial_sill": self.partial_sill, "range": self.range}

    @classmethod
    def from_dict(cls, d: dict) -> "VariogramModel":
        return cls(str(d["family"]), float(d["nugget"]), float(d["partial_sill"]), float(d["range"]))


def _structure(family: str, h: np.ndarray, rng: float) -> np.ndarray:
    if family == "exponential":
        return 1.0 - np.exp(-3.0 * h / rng)
    if family == "gaussian":
        return 1.0 - np.exp(-3.0 * h * h / (rng * rng))
    r = np.minimum(h / rng, 1.0)
    return 1.5 * r - 0.5 * r ** 3


def gamma(model: VariogramModel, h):
    """Semivariance at lag(s) ``h``; exactly zero at ``h == 0``."""
    h_arr = np.asarray(h, dtype=float)
    if np.any(h_arr < 0) or np.any(np.isnan(h_arr)):
        raise DomainError("lag distance must be nonnegative")
    out = model.nugget + model.partial_sill * _structure(model.family, h_arr, model.range)
    out = np.where(h_arr == 0.0, 0.0, out)
    if out.ndim == 0:
        return float(out)
    return out


def _pair_arrays(points, values):
    xy = points if isinstance(points, np.ndarray) else coords_xy(points)
    z = np.asarray(values, dtype=float)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[1] != len(xy):
        raise ValueError("values must have one entry per point")
    if len(xy) < 2:
        raise InsufficientDataError("need at least two points")
    return xy, z


def empirical_variogram(points, values, n_bins: int = 15,
                        max_lag: Optional[float] = None) -> EmpiricalVariogram:
    """Matheron semivariogram estimator on equal-width lag bins.

    ``values`` may be a length-n vector or a (T, n) array, in which case
    squared differences are pooled over timesteps. ``bin_centers`` holds the
    mean pair distance of each nonempty bin. Pairs farther than ``max_lag``
    (default: half the maximum pair distance) are discarded.
    """
    xy, z = _pair_arrays(points, values)
    d = pdist(xy)
    if max_lag is None:
        max_lag = 0.5 * float(d.max())
    if not max_lag > 0:
        raise ValueError("max_lag must be positive")
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    width = max_lag / n_bins
    keep = d <= max_lag
    if not keep.any():
        raise EmptyVariogramError("no point pairs within max_lag")
    bins = np.minimum((d[keep] / width).astype(np.int64), n_bins - 1)
    iu, ju = np.triu_indices(xy.shape[0], k=1)
    iu, ju = iu[keep], ju[keep]
    sq = np.zeros(len(bins))
    for row in z:
        diff = row[iu] - row[ju]
        sq += diff * diff
    t_count = z.shape[0]
    counts = np.bincount(bins, minlength=n_bins) * t_count
    sums = np.bincount(bins, weights=sq, minlength=n_bins)
    dist_sums = np.bincount(bins, weights=d[keep], minlength=n_bins) * t_count
    nz = counts > 0
    return EmpiricalVariogram(
        bin_centers=dist_sums[nz] / counts[nz],
        semivariances=sums[nz] / (2.0 * counts[nz]),
        pair_counts=counts[nz],
    )


def _objective(params, family, h, g, n):
    nugget, psill, rng = params
    model_g = nugget + psill * _structure(family, h, rng)
    model_g = np.maximum(model_g, 1e-300)
    return float(np.sum(n * ((g - model_g) / model_g) ** 2))


def fit(emp: EmpiricalVariogram, family: str = "exponential") -> VariogramModel:
    """Cressie-weighted least-squares fit of nugget, partial sill and range.

    Derivative-free Nelder-Mead over log-parameters from a fixed grid of
    starting points, followed by a polish of the best start. Deterministic.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown variogram family {family!r}")
    if len(emp) < 3:
        raise InsufficientDataError("variogram fitting needs at least 3 nonempty bins")
    h = np.asarray(emp.bin_centers, dtype=float)
    g = np.asarray(emp.semivariances, dtype=float)
    n = np.asarray(emp.pair_counts, dtype=float)
    scale = float(g.max())
    if scale <= 0.0:
        return VariogramModel(family, 0.0, 0.0, float(h.max()),
                              warnings=("degenerate fit: all semivariances are zero",))

    # a range shorter than twice the first lag is indistinguishable from a pure nugget
    lo = np.log([1e-10 * scale, 1e-10 * scale, 2.0 * h[0]])
    hi = np.log([10.0 * scale, 10.0 * scale, 10.0 * h[-1]])
    lo[2] = min(lo[2], hi[2] - 1.0)

    def f(theta):
        theta = np.clip(theta, lo, hi)
        return _objective(np.exp(theta), family, h, g, n)

    starts = itertools.product((0.01, 0.3), (0.5, 1.0), (0.2, 0.5, 1.0))
    best = None
    for fn, fp, fr in starts:
        x0 = np.clip(np.log([fn * scale, fp * scale, fr * h[-1]]), lo, hi)
        # starts only need to land in the right basin; the polish below refines
        res = minimize(f, x0, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 600})
        if best is None or res.fun < best.fun:
            best = res
    theta = np.clip(best.x, lo, hi)
    for _ in range(3):
        res = minimize(f, theta, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-16, "maxiter": 4000})
        theta = np.clip(res.x, lo, hi)

    at_bound = np.isclose(theta, lo, atol=1e-6) | np.isclose(theta, hi, atol=1e-6)
    nugget, psill, rng = (float(v) for v in np.exp(theta))
    if nugget < 1e-8 * scale:
        nugget = 0.0
    if psill < 1e-8 * scale:
        psill = 0.0
    warns = ()
    if at_bound.all():
        warns = ("degenerate fit: optimizer stopped on the bounds of every parameter",)
        logger.warning("degenerate %s variogram fit", family)
    return VariogramModel(family, nugget, psill, rng, warnings=warns)


def fit_best(emp: EmpiricalVariogram, families=FAMILIES) -> VariogramModel:
    """Fit every family and keep the one with the lowest weighted residual."""
    scored = []
    for fam in families:
        m = fit(emp, fam)
        obj = _objective((m.nugget, m.partial_sill, m.range), fam,
                         emp.bin_centers, emp.semivariances, emp.pair_counts)
        scored.append((obj, FAMILIES.index(fam), m))
    return min(scored, key=lambda s: (s[0], s[1]))[2]
