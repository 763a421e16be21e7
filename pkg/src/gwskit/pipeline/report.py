"""Static report emission: summary CSVs plus hand-templated SVG plots."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from ..metrics import MetricsReport
from .config import ValidationError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")
BOX_HEADER = ("predictor", "role", "split", "metric", "n", "min", "q1", "median", "q3", "max")


class NoResultsError(ValidationError):
    pass


def _f(v: float) -> str:
    return repr(float(v))


def box_stats(report: MetricsReport) -> list[tuple]:
    """Five-number summary of every (predictor, role, split, metric) across folds."""
    groups = defaultdict(list)
    for fold, pred, role, split, metric, value in report.rows:
        if math.isfinite(value):
            groups[(pred, role, split, metric)].append(value)
    out = []
    for key in sorted(groups):
        v = np.asarray(groups[key])
        q = np.percentile(v, [0, 25, 50, 75, 100])
        out.append((*key, len(v), *(float(x) for x in q)))
    return out


def box_csv(rows) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(BOX_HEADER)
    for r in rows:
        wr.writerow([*r[:5], *(_f(x) for x in r[5:])])
    return buf.getvalue()


class _Axis:
    """Linear map from data range to pixel range."""

    def __init__(self, lo, hi, p0, p1):
        if not hi > lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.lo, self.hi, self.p0, self.p1 = lo, hi, p0, p1

    def __call__(self, v):
        return self.p0 + (v - self.lo) / (self.hi - self.lo) * (self.p1 - self.p0)

    def ticks(self, n=5):
        return np.linspace(self.lo, self.hi, n)


def _frame(width, height, title, body, ylab, y: _Axis, left, right, top, bottom) -> str:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>',
             f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>']
    for tv in y.ticks():
        py = y(tv)
        parts.append(f'<line x1="{left - 4}" y1="{py:.1f}" x2="{right}" y2="{py:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{left - 6}" y="{py + 4:.1f}" text-anchor="end">{tv:.3g}</text>')
    parts.append(f'<text x="14" y="{(top + bottom) / 2:.1f}" transform="rotate(-90 14 {(top + bottom) / 2:.1f})" '
                 f'text-anchor="middle">{escape(ylab)}</text>')
    parts.extend(body)
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def boxplot_svg(rows, role: str, split: str = "test", metric: str = "r2") -> str:
    """One box per predictor, whiskers at min/max across folds."""
    sel = [r for r in rows if r[1] == role and r[2] == split and r[3] == metric]
    width, height = max(240, 90 * len(sel) + 80), 300
    left, right, top, bottom = 60, width - 20, 30, height - 40
    lo = min((r[5] for r in sel), default=0.0)
    hi = max((r[9] for r in sel), default=1.0)
    y = _Axis(lo, hi, bottom, top)
    body = []
    slot = (right - left) / max(len(sel), 1)
    for i, r in enumerate(sel):
        cx = left + slot * (i + 0.5)
        half = min(25.0, slot / 3)
        color = PALETTE[i % len(PALETTE)]
        mn, q1, med, q3, mx = (y(v) for v in r[5:10])
        body += [
            f'<line x1="{cx:.1f}" y1="{mx:.1f}" x2="{cx:.1f}" y2="{mn:.1f}" stroke="{color}"/>',
            f'<rect x="{cx - half:.1f}" y="{q3:.1f}" width="{2 * half:.1f}" height="{max(q1 - q3, 0.5):.1f}" '
            f'fill="{color}" fill-opacity="0.3" stroke="{color}"/>',
            f'<line x1="{cx - half:.1f}" y1="{med:.1f}" x2="{cx + half:.1f}" y2="{med:.1f}" '
            f'stroke="{color}" stroke-width="2"/>',
            f'<text x="{cx:.1f}" y="{bottom + 16}" text-anchor="middle">{escape(r[0])}</text>',
        ]
    return _frame(width, height, f"{metric} by fold, {role}, {split}", body, metric, y,
                  left, right, top, bottom)


def timeseries_svg(well: str, times, observed, predicted: dict) -> str:
    """Observed series (black) overlaid with each predictor's series."""
    width, height = 640, 280
    left, right, top, bottom = 60, width - 130, 30, height - 40
    times = np.asarray(times, dtype=float)
    series = [np.asarray(observed, dtype=float)] + [np.asarray(v, dtype=float) for v in predicted.values()]
    finite = np.concatenate([s[np.isfinite(s)] for s in series] + [np.zeros(0)])
    y = _Axis(float(finite.min()) if finite.size else 0.0, float(finite.max()) if finite.size else 1.0,
              bottom, top)
    x = _Axis(float(times.min()), float(times.max()), left, right)
    body = []
    for tv in x.ticks():
        body.append(f'<text x="{x(tv):.1f}" y="{bottom + 16}" text-anchor="middle">{tv:.0f}</text>')
    names = ["observed", *predicted]
    colors = ["black", *(PALETTE[i % len(PALETTE)] for i in range(len(predicted)))]
    for k, (name, s, color) in enumerate(zip(names, series, colors)):
        segs, cur = [], []
        for tv, v in zip(times, s):
            if math.isfinite(v):
                cur.append(f"{x(tv):.1f},{y(v):.1f}")
            elif cur:
                segs.append(cur)
                cur = []
        if cur:
            segs.append(cur)
        for seg in segs:
            body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(seg)}"/>')
        ly = top + 14 * k + 6
        body.append(f'<line x1="{right + 10}" y1="{ly}" x2="{right + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{right + 34}" y="{ly + 4}">{escape(name)}</text>')
    return _frame(width, height, f"well {well}", body, "anomaly (m)", y, left, right, top, bottom)


def read_predictions(path) -> dict:
    """``predictions.csv`` to {(role, well): {"t": [...], "observed": [...], predictor: [...]}}."""
    table: dict = defaultdict(lambda: defaultdict(dict))
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["role"], row["well_id"])
            t = int(row["time_index"])
            table[key]["observed"][t] = float(row["observed"]) if row["observed"] else math.nan
            table[key][row["predictor"]][t] = float(row["predicted"]) if row["predicted"] else math.nan
    return table


def write_report(run_dir, out_dir, max_wells: int = 4) -> list[Path]:
    run_dir, out_dir = Path(run_dir), Path(out_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.is_file():
        raise NoResultsError(f"no results found in {run_dir} (missing metrics.csv)")
    report = MetricsReport.from_csv(metrics_path.read_text(encoding="utf-8"))
    if not report.rows:
        raise NoResultsError(f"no results found in {run_dir} (metrics.csv has no rows)")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, text):
        p = out_dir / name
        p.write_text(text, encoding="utf-8")
        written.append(p)

    rows = box_stats(report)
    emit("boxplot_data.csv", box_csv(rows))
    emit("summary.csv", report.summary_csv())
    for role in sorted({r[1] for r in rows}):
        emit(f"boxplot_{role}_test_r2.svg", boxplot_svg(rows, role))

    pred_path = run_dir / "predictions.csv"
    if pred_path.is_file():
        table = read_predictions(pred_path)
        for role in ("interpolation", "prediction"):
            wells = sorted(w for r, w in table if r == role)[:max_wells]
            for well in wells:
                entry = table[(role, well)]
                ts = sorted(entry["observed"])
                preds = {k: [v.get(t, math.nan) for t in ts] for k, v in sorted(entry.items()) if k != "observed"}
                emit(f"series_{role}_{well}.svg",
                     timeseries_svg(well, ts, [entry["observed"][t] for t in ts], preds))
    return written
