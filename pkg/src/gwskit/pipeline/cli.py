"""Command-line entry point: ``gwskit <subcommand> --config run.toml --out DIR``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import __version__
from ..cv import (AccessLog, ExperimentConfig, ExperimentData, PredictorSpec, audit_leakage,
                  run_experiment, spatial_split, temporal_folds)
from ..geo import coords_xy
from ..kriging import DuplicateLocationError, build_system, krige_grid
from ..models.predictors import make_predictor
from ..preprocess import PointObservationSet, UnusableSeriesError, curate
from ..stack import GridStack
from ..variogram import FAMILIES, empirical_variogram, fit, fit_best
from .config import ConfigError, RunConfig, ValidationError, load_config
from .external import evaluate_external
from .io import (file_digest, ingest_points, read_grids, read_polygon, read_storage,
                 write_grids, write_manifest, write_points)
from .report import write_report

logger = logging.getLogger("gwskit")

SUBCOMMANDS = ("ingest", "preprocess", "variogram", "krige", "cv-run", "evaluate-external",
               "report", "make-synthetic")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this toolkit reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _add_common(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="run configuration (TOML)")
    p.add_argument("--seed", type=_seed, default=d, help="overrides cv.seed")
    p.add_argument("--out", default=argparse.SUPPRESS if suppress else "run", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gwskit", description="Groundwater storage interpolation and evaluation toolkit")
    parser.add_argument("--version", action="version", version=f"gwskit {__version__}")
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    common = _Parser(add_help=False)
    _add_common(common, suppress=True)
    helps = {
        "ingest": "validate inputs and write the normalized observation table",
        "preprocess": "segment, gap-fill, convert and anomaly-normalize the wells",
        "variogram": "fit the variogram model on all wells",
        "krige": "krige every month onto the grid (value and variance stacks)",
        "cv-run": "run the cross-validation experiment",
        "evaluate-external": "score an external gridded product against the wells",
        "report": "emit CSV tables and SVG plots from a cv-run directory",
        "make-synthetic": "write a seeded synthetic dataset and matching config",
    }
    subs = {name: sub.add_parser(name, parents=[common], help=helps[name]) for name in SUBCOMMANDS}
    subs["report"].add_argument("--run", help="cv-run output directory (default: --out)")
    syn = subs["make-synthetic"]
    syn.add_argument("--n-stations", type=int, default=100)
    syn.add_argument("--n-months", type=int, default=60)
    syn.add_argument("--start", default="2002-04")
    return parser


# ---- shared steps ---------------------------------------------------------

def _config(args) -> RunConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.cv.seed = args.seed
    # only create the output directory once the inputs look usable
    Path(args.out).mkdir(parents=True, exist_ok=True)
    return cfg


def _raw_obs(cfg: RunConfig) -> PointObservationSet:
    cfg.require("points")
    return ingest_points(cfg.paths.points, cfg.time_start, cfg.n_months)


def _observations(cfg: RunConfig, out: Path = None) -> PointObservationSet:
    """Raw observations, curated when preprocessing is enabled."""
    obs = _raw_obs(cfg)
    if not cfg.preprocess.enabled:
        return obs
    storage = None
    if cfg.preprocess.input_kind == "depth":
        cfg.require("storage")
        storage = read_storage(cfg.paths.storage)
    pp = cfg.preprocess
    curated, log = curate(obs, storage, pp.baseline, pp.window, pp.z_threshold, pp.input_kind)
    if out is not None:
        (out / "curation_log.tsv").write_text("".join(f"{line}\n" for line in log.lines()), encoding="utf-8")
    if curated.n_wells == 0:
        raise UnusableSeriesError("no well survived preprocessing; see curation_log.tsv")
    return curated


def _stack(cfg: RunConfig, n_times: int, required: bool = False):
    if cfg.paths.grids is None and not required:
        return None
    cfg.require("grids")
    stack = read_grids(cfg.paths.grids)
    if stack.shape[2:] != cfg.grid.shape:
        raise ValidationError(f"{cfg.paths.grids}: {stack.shape[2]}x{stack.shape[3]} cells, "
                              f"config grid is {cfg.grid.n_rows}x{cfg.grid.n_cols}")
    if stack.shape[0] != n_times:
        raise ValidationError(f"{cfg.paths.grids}: {stack.shape[0]} timesteps, observations have {n_times}")
    return stack


def _fit_model(cfg: RunConfig, obs: PointObservationSet):
    values = np.where(obs.valid, obs.values, np.nan).T
    emp = empirical_variogram(coords_xy(obs.points), values, cfg.variogram.n_bins, cfg.variogram.max_lag)
    if cfg.variogram.family == "auto":
        return emp, fit_best(emp, FAMILIES)
    return emp, fit(emp, cfg.variogram.family)


def deviations(cfg: RunConfig) -> list[tuple[str, str]]:
    loss = cfg.loss
    return [
        ("deviation.gap_fill", "monthly climatology plus linear interpolation of the deseasonalized "
                               "series; leading and trailing gaps take climatology"),
        ("deviation.scaling_fit", f"min-max statistics fitted per fold on the {cfg.cv.scaler_fit} window"),
        ("deviation.fold_stride", f"folds advance by eval_len = {cfg.cv.eval_len} months; "
                                  "the final test window ends at the last month"),
        ("deviation.loss_weights", f"w_main={loss.w_main!r} w_trend={loss.w_trend!r} "
                                   f"w_mean={loss.w_mean!r} pool_size={loss.pool_size}"),
        ("deviation.variogram_fit", f"{cfg.variogram.family}, Cressie-weighted least squares, "
                                    "Nelder-Mead on log parameters"),
        ("deviation.kriging_mode", cfg.kriging.mode if cfg.kriging.mode == "global" else
                                   f"local, max_neighbors={cfg.kriging.max_neighbors}, "
                                   f"search_radius={cfg.kriging.search_radius!r}"),
        ("deviation.pipeline_order", "segment -> gap-fill -> depth to storage -> baseline anomaly -> "
                                     "deduplicate locations -> per-fold min-max scaling"),
        ("deviation.interpolation_role", "holdout wells estimated by kriging the model-well predictions"),
    ]


def _manifest(args, cfg: RunConfig, out: Path, outputs, extra=()):
    entries = [("command", args.command), ("toolkit_version", __version__), ("seed", str(cfg.cv.seed))]
    if cfg.source is not None:
        entries.append(("config_file", Path(cfg.source).name))
        entries.append(("config_sha256", file_digest(cfg.source)))
    for name in ("points", "grids", "storage", "polygon", "product"):
        p = getattr(cfg.paths, name)
        if p is not None and p.is_file():
            entries.append((f"input.{name}.sha256", file_digest(p)))
    entries += [(f"config.{k}", v) for k, v in cfg.flat() if not k.startswith("paths.")]
    entries += deviations(cfg)
    entries += list(extra)
    entries += [("output", name) for name in outputs]
    write_manifest(out / "manifest.txt", entries)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _write(out: Path, name: str, text: str, outputs: list):
    (out / name).write_text(text, encoding="utf-8")
    outputs.append(name)


# ---- subcommands ----------------------------------------------------------

def cmd_ingest(args, out: Path) -> int:
    cfg = _config(args)
    obs = _raw_obs(cfg)
    stack = _stack(cfg, obs.n_times)
    outputs = []
    write_points(obs, out / "observations.csv")
    outputs.append("observations.csv")
    lines = [f"wells = {obs.n_wells}", f"months = {obs.n_times}",
             f"first_month = {obs.times[0]}", f"last_month = {obs.times[-1]}",
             f"valid_fraction = {obs.valid.mean()!r}"]
    if stack is not None:
        lines.append(f"grid_stack = {'x'.join(map(str, stack.shape))} ({', '.join(stack.channels)})")
    _write(out, "ingest_summary.txt", "\n".join(lines) + "\n", outputs)
    _manifest(args, cfg, out, outputs)
    print("\n".join(lines))
    return 0


def cmd_preprocess(args, out: Path) -> int:
    cfg = _config(args)
    cfg.preprocess.enabled = True
    obs = _observations(cfg, out)
    write_points(obs, out / "curated.csv")
    _manifest(args, cfg, out, ["curated.csv", "curation_log.tsv"])
    print(f"{obs.n_wells} wells after preprocessing")
    return 0


def cmd_variogram(args, out: Path) -> int:
    cfg = _config(args)
    obs = _observations(cfg)
    emp, model = _fit_model(cfg, obs)
    outputs = []
    _write(out, "variogram.json", json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n", outputs)
    _write(out, "empirical_variogram.csv",
           _csv_text(("lag_m", "semivariance", "pairs"),
                     [(float(h), float(g), int(n)) for h, g, n in
                      zip(emp.bin_centers, emp.semivariances, emp.pair_counts)]), outputs)
    _manifest(args, cfg, out, outputs, [("variogram.warnings", "; ".join(model.warnings) or "none")])
    print(json.dumps(model.to_dict(), sort_keys=True))
    return 0


def krige_months(cfg: RunConfig, obs: PointObservationSet, model, ring=None):
    """(T, H, W) value and variance arrays, NaN where masked.

    Months sharing the same set of reporting wells share one factorized
    system.
    """
    t_n = obs.n_times
    values = np.full((t_n, *cfg.grid.shape), np.nan)
    variances = np.full((t_n, *cfg.grid.shape), np.nan)
    patterns: dict = {}
    for t in range(t_n):
        key = obs.valid[:, t].tobytes()
        patterns.setdefault(key, []).append(t)
    mode = cfg.kriging.build()
    for key, times in patterns.items():
        rows = np.flatnonzero(np.frombuffer(key, dtype=bool))
        if len(rows) == 0:
            continue
        sys_ = build_system([obs.points[i] for i in rows], model, mode)
        vals, vars_ = krige_grid(sys_, obs.values[np.ix_(rows, times)].T, cfg.grid, ring)
        for t, g, v in zip(times, vals, vars_):
            values[t] = g.filled(np.nan)
            variances[t] = v.filled(np.nan)
    return values, variances


def cmd_krige(args, out: Path) -> int:
    cfg = _config(args)
    obs = _observations(cfg)
    ring = None
    if cfg.paths.polygon is not None:
        cfg.require("polygon")
        ring = read_polygon(cfg.paths.polygon)
    _, model = _fit_model(cfg, obs)
    values, variances = krige_months(cfg, obs, model, ring)
    write_grids(GridStack(values[:, None].astype(np.float32), ("gws_anomaly",)), out / "krige_value.gstk")
    write_grids(GridStack(variances[:, None].astype(np.float32), ("kriging_variance",)),
                out / "krige_variance.gstk")
    _write(out, "variogram.json", json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n", [])
    _manifest(args, cfg, out, ["krige_value.gstk", "krige_variance.gstk", "variogram.json"],
              [("krige.dims", f"{obs.n_times}x1x{cfg.grid.n_rows}x{cfg.grid.n_cols}")])
    print(f"kriged {obs.n_times} months onto {cfg.grid.n_rows}x{cfg.grid.n_cols} cells")
    return 0


def _protocol(cfg: RunConfig, obs: PointObservationSet):
    split = spatial_split(obs.ids, cfg.cv.holdout_fraction, cfg.cv.seed)
    try:
        folds = temporal_folds(obs.n_times, cfg.cv.n_folds, cfg.cv.eval_len)
    except ValueError as exc:
        raise ConfigError(f"cv: {exc}") from exc
    return split, folds


def cmd_cv_run(args, out: Path) -> int:
    cfg = _config(args)
    obs = _observations(cfg, out)
    needs_grids = any(p.kind in ("ridge", "rbf_quantile") for p in cfg.predictors)
    stack = _stack(cfg, obs.n_times, required=any(p.kind == "ridge" for p in cfg.predictors))
    if stack is None and needs_grids:
        logger.warning("no grid stack configured; rbf_quantile runs on coordinates only")
    split, folds = _protocol(cfg, obs)
    specs = [PredictorSpec(p.name, (lambda p=p: make_predictor(p.kind, **p.params)), p.interpolation)
             for p in cfg.predictors]
    exp_cfg = ExperimentConfig(variogram_family=cfg.variogram.family, variogram_bins=cfg.variogram.n_bins,
                               variogram_max_lag=cfg.variogram.max_lag, kriging_mode=cfg.kriging.build(),
                               scaler_fit=cfg.cv.scaler_fit, loss=cfg.loss, seed=cfg.cv.seed)
    log = AccessLog()
    result = run_experiment(ExperimentData(obs, stack, cfg.grid), specs, split, folds, exp_cfg, log)
    problems = audit_leakage(log, split, folds)

    outputs = ["curation_log.tsv"] if cfg.preprocess.enabled else []
    _write(out, "metrics.csv", result.report.to_csv(), outputs)
    _write(out, "summary.csv", result.report.summary_csv(), outputs)
    _write(out, "composite_loss.csv",
           _csv_text(("fold", "predictor", "split", "value"), sorted(result.composite)), outputs)
    _write(out, "per_well.csv",
           _csv_text(("fold", "predictor", "role", "split", "well_id", "r2"), sorted(result.per_well)), outputs)
    pos = {w: i for i, w in enumerate(obs.ids)}
    rows = []
    for name, role, well, t, value in sorted(result.final_predictions):
        i = pos[well]
        o = float(obs.values[i, t]) if obs.valid[i, t] else ""
        rows.append((name, role, well, t, value if np.isfinite(value) else "", o))
    _write(out, "predictions.csv",
           _csv_text(("predictor", "role", "well_id", "time_index", "predicted", "observed"), rows), outputs)
    _write(out, "variograms.csv",
           _csv_text(("fold", "family", "nugget", "partial_sill", "range_m"),
                     [(k, m.family, m.nugget, m.partial_sill, m.range) for k, m in sorted(result.variograms.items())]),
           outputs)
    _write(out, "split.csv", _csv_text(("well_id", "role"),
                                       [(w, "model") for w in split.model_ids] +
                                       [(w, "holdout") for w in split.holdout_ids]), outputs)
    _write(out, "audit.txt", "".join(f"{p}\n" for p in problems) or "no leakage detected\n", outputs)
    failures = [(f"failure.fold{k}", v) for k, v in sorted(result.report.failures.items())]
    _manifest(args, cfg, out, outputs,
              [("folds", str(len(folds))), ("wells.model", str(len(split.model_ids))),
               ("wells.holdout", str(len(split.holdout_ids))),
               ("audit", "pass" if not problems else f"FAIL ({len(problems)} findings)")] + failures)
    for k, msg in failures:
        print(f"warning: {k}: {msg}", file=sys.stderr)
    if problems:
        print(f"error: leakage audit found {len(problems)} problem(s); see audit.txt", file=sys.stderr)
        return 2
    if len(result.report.failures) == len(folds):
        print("error: every fold failed", file=sys.stderr)
        return 2
    print(result.report.summary_csv(), end="")
    return 0


def cmd_evaluate_external(args, out: Path) -> int:
    cfg = _config(args)
    cfg.require("product")
    obs = _observations(cfg)
    product = read_grids(cfg.paths.product)
    split, folds = _protocol(cfg, obs)
    report = evaluate_external(product, obs, cfg.grid, split, folds, cfg.preprocess.baseline)
    outputs = []
    _write(out, "external_metrics.csv", report.to_csv(), outputs)
    _write(out, "external_summary.csv", report.summary_csv(), outputs)
    _manifest(args, cfg, out, outputs)
    print(report.summary_csv(), end="")
    return 0


def cmd_report(args, out: Path) -> int:
    # without --run, --out names the run directory and the report goes inside it
    if getattr(args, "run", None):
        run, dest = Path(args.run), out
    else:
        run, dest = out, out / "report"
    files = write_report(run, dest)
    for f in files:
        print(f)
    return 0


def cmd_make_synthetic(args, out: Path) -> int:
    from ..synthetic import make_dataset
    if args.n_stations < 3 or args.n_months < 24:
        raise UsageError("make-synthetic needs at least 3 stations and 24 months")
    seed = args.seed if args.seed is not None else 0
    ds = make_dataset(n_stations=args.n_stations, n_times=args.n_months, start=args.start, seed=seed)
    rng = np.random.default_rng(seed + 1)
    sy = {w: float(v) for w, v in zip(ds.obs.ids, np.round(rng.uniform(0.05, 0.2, ds.obs.n_wells), 3))}
    depth = np.array([-ds.obs.values[i] / sy[w] for i, w in enumerate(ds.obs.ids)])
    write_points(PointObservationSet(ds.obs.points, ds.obs.times, depth), out / "points.csv")
    (out / "storage.csv").write_text("well_id,sy\n" + "".join(f"{w},{v!r}\n" for w, v in sy.items()),
                                     encoding="utf-8")
    write_grids(ds.stack, out / "grids.gstk")
    g = ds.grid
    cut = g.cell_size
    ring = [(g.lon_min, g.lat_min), (g.lon_max, g.lat_min), (g.lon_max, g.lat_max - cut),
            (g.lon_max - cut, g.lat_max), (g.lon_min, g.lat_max)]
    (out / "polygon.txt").write_text("# lon lat\n" + "".join(f"{x!r} {y!r}\n" for x, y in ring), encoding="utf-8")
    n_folds = min(3, (args.n_months - 16) // 8)
    (out / "config.toml").write_text(f"""\
[paths]
points = "points.csv"
grids = "grids.gstk"
storage = "storage.csv"
polygon = "polygon.txt"

[grid]
lon_min = {g.lon_min!r}
lat_min = {g.lat_min!r}
n_cols = {g.n_cols}
n_rows = {g.n_rows}
cell_size = {g.cell_size!r}

[time]
start = "{args.start}"
n_months = {args.n_months}

[preprocess]
input_kind = "depth"
baseline = ["2004-01", "2009-12"]

[cv]
n_folds = {n_folds}
eval_len = 8
holdout_fraction = 0.2
seed = {seed}

[variogram]
family = "exponential"

[kriging]
mode = "global"

[[predictors]]
kind = "climatology"

[[predictors]]
kind = "persistence"

[[predictors]]
kind = "ridge"
alpha = 1.0

[[predictors]]
kind = "rbf_quantile"
epochs = 100
""", encoding="utf-8")
    print(f"wrote synthetic dataset ({args.n_stations} stations, {args.n_months} months) to {out}")
    return 0


HANDLERS = {
    "ingest": cmd_ingest, "preprocess": cmd_preprocess, "variogram": cmd_variogram, "krige": cmd_krige,
    "cv-run": cmd_cv_run, "evaluate-external": cmd_evaluate_external, "report": cmd_report,
    "make-synthetic": cmd_make_synthetic,
}

INPUT_ERRORS = (ValidationError, DuplicateLocationError, UnusableSeriesError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("gwskit: error: a subcommand is required", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.command == "make-synthetic":
            out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](args, out)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - map every other failure to exit 2
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
