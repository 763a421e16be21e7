"""Run configuration loaded from a TOML file.

Relative paths resolve against the directory holding the config file. Every
field has a documented range; :func:`load_config` rejects anything outside it
with a :class:`ConfigError` naming the offending key.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from ..geo import GridSpec
from ..kriging import GlobalMode, LocalMode
from ..metrics import CompositeLossConfig
from ..models.predictors import PREDICTOR_KINDS
from ..variogram import FAMILIES


class ValidationError(Exception):
    """Bad user input: configuration, file contents or command-line usage."""


class ConfigError(ValidationError):
    pass


@dataclass
class Paths:
    points: Optional[Path] = None
    grids: Optional[Path] = None
    storage: Optional[Path] = None
    polygon: Optional[Path] = None
    product: Optional[Path] = None


@dataclass
class PreprocessConfig:
    enabled: bool = True
    input_kind: str = "depth"
    baseline: tuple = ("2004-01", "2009-12")
    window: int = 24
    z_threshold: float = 4.0


@dataclass
class CVConfig:
    n_folds: int = 10
    eval_len: int = 8
    holdout_fraction: float = 0.08
    seed: int = 0
    scaler_fit: str = "train"


@dataclass
class VariogramConfig:
    family: str = "exponential"
    n_bins: int = 15
    max_lag: Optional[float] = None


@dataclass
class KrigingConfig:
    mode: str = "global"
    max_neighbors: int = 16
    search_radius: float = float("inf")

    def build(self):
        if self.mode == "global":
            return GlobalMode()
        return LocalMode(self.max_neighbors, self.search_radius)


@dataclass
class PredictorEntry:
    name: str
    kind: str
    interpolation: str = "krige"
    params: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    source: Optional[Path]
    paths: Paths
    grid: GridSpec
    time_start: Optional[str] = None
    n_months: Optional[int] = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    cv: CVConfig = field(default_factory=CVConfig)
    predictors: list = field(default_factory=list)
    loss: CompositeLossConfig = field(default_factory=CompositeLossConfig)
    variogram: VariogramConfig = field(default_factory=VariogramConfig)
    kriging: KrigingConfig = field(default_factory=KrigingConfig)

    def require(self, *names: str):
        for name in names:
            p = getattr(self.paths, name)
            if p is None:
                raise ConfigError(f"paths.{name} is required for this command")
            if not p.exists():
                raise ConfigError(f"paths.{name}: file not found: {p}")

    def flat(self) -> list[tuple[str, str]]:
        """Sorted ``(key, value)`` pairs covering every setting, for the manifest."""
        out = []

        def walk(prefix, obj):
            if isinstance(obj, dict):
                for k in sorted(obj):
                    walk(f"{prefix}.{k}" if prefix else str(k), obj[k])
            elif isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], dict):
                for i, item in enumerate(obj):
                    walk(f"{prefix}[{i}]", item)
            else:
                out.append((prefix, _text(obj)))

        d = {
            "paths": asdict(self.paths),
            "grid": asdict(self.grid),
            "time": {"start": self.time_start, "n_months": self.n_months},
            "preprocess": asdict(self.preprocess),
            "cv": asdict(self.cv),
            "loss": asdict(self.loss),
            "variogram": asdict(self.variogram),
            "kriging": asdict(self.kriging),
            "predictors": [asdict(p) for p in self.predictors],
        }
        walk("", d)
        return out


def _text(v) -> str:
    if isinstance(v, Path):
        return v.as_posix()
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_text(x) for x in v) + "]"
    return repr(v) if isinstance(v, float) else str(v)


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _take(sec: dict, section: str, key: str, kind, default, check=None, why: str = ""):
    if key not in sec:
        return default
    v = sec.pop(key)
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is int and isinstance(v, bool) or not isinstance(v, kind):
        raise ConfigError(f"{section}.{key}: expected {getattr(kind, '__name__', kind)}, got {v!r}")
    if check is not None and not check(v):
        raise ConfigError(f"{section}.{key} = {v!r} out of range ({why})")
    return v


def _no_leftovers(sec: dict, section: str):
    if sec:
        raise ConfigError(f"[{section}]: unknown key(s) {sorted(sec)}")


def _month(v: str) -> bool:
    try:
        np.datetime64(v, "M")
        return len(v) == 7
    except ValueError:
        return False


def parse_config(doc: dict, base_dir: Path, source: Optional[Path] = None) -> RunConfig:
    doc = dict(doc)
    known = {"paths", "grid", "time", "preprocess", "cv", "predictors", "loss", "variogram", "kriging"}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)}")

    sec = _section(doc, "paths")
    paths = Paths()
    for key in ("points", "grids", "storage", "polygon", "product"):
        v = _take(sec, "paths", key, str, None)
        if v is not None:
            p = Path(v)
            setattr(paths, key, p if p.is_absolute() else (base_dir / p))
    _no_leftovers(sec, "paths")

    sec = _section(doc, "grid")
    for key in ("lon_min", "lat_min", "n_cols", "n_rows"):
        if key not in sec:
            raise ConfigError(f"grid.{key} is required")
    try:
        grid = GridSpec(
            _take(sec, "grid", "lon_min", float, None),
            _take(sec, "grid", "lat_min", float, None),
            n_cols=_take(sec, "grid", "n_cols", int, None),
            n_rows=_take(sec, "grid", "n_rows", int, None),
            cell_size=_take(sec, "grid", "cell_size", float, 0.25),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[grid]: {exc}") from exc
    _no_leftovers(sec, "grid")

    sec = _section(doc, "time")
    time_start = _take(sec, "time", "start", str, None, _month, "YYYY-MM")
    n_months = _take(sec, "time", "n_months", int, None, lambda v: v >= 1, ">= 1")
    _no_leftovers(sec, "time")

    sec = _section(doc, "preprocess")
    pp = PreprocessConfig(
        enabled=_take(sec, "preprocess", "enabled", bool, True),
        input_kind=_take(sec, "preprocess", "input_kind", str, "depth",
                         lambda v: v in ("depth", "storage"), "depth or storage"),
        baseline=tuple(_take(sec, "preprocess", "baseline", list, ["2004-01", "2009-12"],
                             lambda v: len(v) == 2 and all(isinstance(x, str) and _month(x) for x in v)
                             and v[0] <= v[1], "two YYYY-MM months, start <= end")),
        window=_take(sec, "preprocess", "window", int, 24, lambda v: v >= 2, ">= 2"),
        z_threshold=_take(sec, "preprocess", "z_threshold", float, 4.0, lambda v: v > 0, "> 0"),
    )
    _no_leftovers(sec, "preprocess")

    sec = _section(doc, "cv")
    cv = CVConfig(
        n_folds=_take(sec, "cv", "n_folds", int, 10, lambda v: v >= 1, ">= 1"),
        eval_len=_take(sec, "cv", "eval_len", int, 8, lambda v: v >= 1, ">= 1"),
        holdout_fraction=_take(sec, "cv", "holdout_fraction", float, 0.08,
                               lambda v: 0.0 < v < 1.0, "0 < f < 1"),
        seed=_take(sec, "cv", "seed", int, 0, lambda v: 0 <= v < 2**64, "unsigned 64-bit"),
        scaler_fit=_take(sec, "cv", "scaler_fit", str, "train", lambda v: v in ("train", "all"),
                         "train or all"),
    )
    _no_leftovers(sec, "cv")

    sec = _section(doc, "loss")
    try:
        loss = CompositeLossConfig(
            w_main=_take(sec, "loss", "w_main", float, 1.0),
            w_trend=_take(sec, "loss", "w_trend", float, 0.5),
            w_mean=_take(sec, "loss", "w_mean", float, 0.5),
            pool_size=_take(sec, "loss", "pool_size", int, 3),
        )
    except ValueError as exc:
        raise ConfigError(f"[loss]: {exc}") from exc
    _no_leftovers(sec, "loss")

    sec = _section(doc, "variogram")
    vg = VariogramConfig(
        family=_take(sec, "variogram", "family", str, "exponential",
                     lambda v: v in FAMILIES or v == "auto", f"one of {FAMILIES} or auto"),
        n_bins=_take(sec, "variogram", "n_bins", int, 15, lambda v: v >= 3, ">= 3"),
        max_lag=_take(sec, "variogram", "max_lag", float, None, lambda v: v > 0, "> 0 metres"),
    )
    _no_leftovers(sec, "variogram")

    sec = _section(doc, "kriging")
    kr = KrigingConfig(
        mode=_take(sec, "kriging", "mode", str, "global", lambda v: v in ("global", "local"),
                   "global or local"),
        max_neighbors=_take(sec, "kriging", "max_neighbors", int, 16, lambda v: v >= 1, ">= 1"),
        search_radius=_take(sec, "kriging", "search_radius", float, float("inf"),
                            lambda v: v > 0, "> 0 metres"),
    )
    _no_leftovers(sec, "kriging")

    roster = doc.get("predictors", [{"kind": "climatology"}, {"kind": "persistence"},
                                    {"kind": "ridge"}, {"kind": "rbf_quantile"}])
    if not isinstance(roster, list) or not roster:
        raise ConfigError("predictors must be a non-empty array of tables ([[predictors]])")
    predictors = []
    for i, entry in enumerate(roster):
        if not isinstance(entry, dict):
            raise ConfigError(f"predictors[{i}] must be a table")
        entry = dict(entry)
        where = f"predictors[{i}]"
        kind = _take(entry, where, "kind", str, None,
                     lambda v: v in PREDICTOR_KINDS or v == "external",
                     f"one of {sorted(PREDICTOR_KINDS) + ['external']}")
        if kind is None:
            raise ConfigError(f"{where}.kind is required")
        name = _take(entry, where, "name", str, kind)
        interp = _take(entry, where, "interpolation", str, "krige",
                       lambda v: v in ("krige", "direct"), "krige or direct")
        if kind == "external":
            p = Path(_take(entry, where, "path", str, ""))
            entry["path"] = str(p if p.is_absolute() else base_dir / p)
            if not Path(entry["path"]).is_file():
                raise ConfigError(f"{where}.path: file not found: {entry['path']}")
        predictors.append(PredictorEntry(name, kind, interp, entry))
    names = [p.name for p in predictors]
    if len(set(names)) != len(names):
        raise ConfigError(f"predictor names must be unique, got {names}")

    return RunConfig(source=source, paths=paths, grid=grid, time_start=time_start, n_months=n_months,
                     preprocess=pp, cv=cv, predictors=predictors, loss=loss, variogram=vg, kriging=kr)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not valid TOML ({exc})") from exc
    return parse_config(doc, path.resolve().parent, path)
