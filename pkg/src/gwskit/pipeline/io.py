"""File formats: point CSV, grid stack binary, storage coefficients, polygon, manifest.

Grid stack layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"GSTK"
    4       4     u32 format version (1)
    8       16    u32 T, C, H, W
    24      ...   C channel names, each u16 byte length + UTF-8 bytes
    ...     4*N   float32 LE payload, N = T*C*H*W, order T, C, H, W

Missing cells are quiet NaNs. Float32 bits are copied verbatim in both
directions, so any NaN payload survives a round trip.
"""
from __future__ import annotations

import csv
import hashlib
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from ..geo import make_points
from ..preprocess import PointObservationSet, month_axis
from ..stack import GridStack
from .config import ValidationError

MAGIC = b"GSTK"
VERSION = 1
POINT_HEADER = ["well_id", "lon", "lat", "date", "value"]
_HEAD = struct.Struct("<4sI4I")


class IngestError(ValidationError):
    pass


class CorruptFileError(ValidationError):
    pass


def _parse_month(text: str):
    if len(text) != 7 or text[4] != "-":
        raise ValueError(f"date {text!r} is not YYYY-MM")
    return np.datetime64(text, "M")


def ingest_points(path, time_start: Optional[str] = None, n_months: Optional[int] = None) -> PointObservationSet:
    """Read ``well_id,lon,lat,date,value`` rows into a wells x months matrix.

    Wells come out sorted by id. The time axis is ``time_start`` plus
    ``n_months`` when given, otherwise the span of dates in the file.
    """
    path = Path(path)
    wells: dict = {}
    cells: dict = {}
    dups = []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or [h.strip() for h in header] != POINT_HEADER:
            raise IngestError(f"{path}:1: header must be {','.join(POINT_HEADER)}")
        for row in rd:
            line = rd.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise IngestError(f"{path}:{line}: expected 5 fields, got {len(row)}")
            wid, lon_s, lat_s, date_s, val_s = (c.strip() for c in row)
            try:
                if not wid:
                    raise ValueError("empty well_id")
                lon, lat = float(lon_s), float(lat_s)
                if not (np.isfinite(lon) and np.isfinite(lat)):
                    raise ValueError("non-finite coordinate")
                month = _parse_month(date_s)
                value = float(val_s) if val_s else np.nan
            except ValueError as exc:
                raise IngestError(f"{path}:{line}: malformed row ({exc})") from exc
            if wid in wells and wells[wid] != (lon, lat):
                raise IngestError(f"{path}:{line}: well {wid} changes location "
                                  f"from {wells[wid]} to {(lon, lat)}")
            wells.setdefault(wid, (lon, lat))
            key = (wid, month)
            if key in cells:
                dups.append(f"line {line} ({wid}, {date_s}; first at line {cells[key][1]})")
                continue
            cells[key] = (value, line)
    if dups:
        raise IngestError(f"{path}: duplicate (well, month) rows: " + "; ".join(dups))
    if not wells:
        raise IngestError(f"{path}: no observations")

    months = sorted({m for _, m in cells})
    if time_start is None:
        start = months[0]
        n = int(months[-1] - months[0]) + 1
    else:
        start = np.datetime64(time_start, "M")
        n = n_months if n_months is not None else int(months[-1] - start) + 1
    times = month_axis(str(start), n)
    ids = sorted(wells)
    row_of = {w: i for i, w in enumerate(ids)}
    values = np.full((len(ids), n), np.nan)
    for (wid, month), (value, line) in cells.items():
        t = int(month - start)
        if not 0 <= t < n:
            raise IngestError(f"{path}:{line}: date {month} outside the time axis "
                              f"{times[0]}..{times[-1]}")
        values[row_of[wid], t] = value
    lon = np.array([wells[w][0] for w in ids])
    lat = np.array([wells[w][1] for w in ids])
    try:
        points = make_points(ids, lon, lat)
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from exc
    return PointObservationSet(points, times, values)


def write_points(obs: PointObservationSet, path):
    """Inverse of :func:`ingest_points`; missing slots are written as empty values."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(POINT_HEADER)
        for i, p in enumerate(obs.points):
            for t, month in enumerate(obs.times):
                v = repr(float(obs.values[i, t])) if obs.valid[i, t] else ""
                wr.writerow([p.id, repr(p.lon), repr(p.lat), str(month), v])


def write_grids(stack: GridStack, path):
    data = np.asarray(stack.data)
    if data.dtype != np.float32:
        data = data.astype(np.float32)
    t, c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, t, c, h, w))
        for name in stack.channels:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"channel name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_grids(path) -> GridStack:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < _HEAD.size:
        raise CorruptFileError(f"{path}: file shorter than the {_HEAD.size}-byte header")
    magic, version, t, c, h, w = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CorruptFileError(f"{path}: unsupported format version {version}")
    n = t * c * h * w
    if n >= 2**32:
        raise CorruptFileError(f"{path}: dims {t}x{c}x{h}x{w} overflow 2^32 cells")
    pos = _HEAD.size
    names = []
    for k in range(c):
        if pos + 2 > len(buf):
            raise CorruptFileError(f"{path}: truncated channel table at entry {k}")
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + ln > len(buf):
            raise CorruptFileError(f"{path}: truncated channel name {k}")
        try:
            names.append(buf[pos:pos + ln].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CorruptFileError(f"{path}: channel name {k} is not UTF-8") from exc
        pos += ln
    payload = len(buf) - pos
    if payload != 4 * n:
        raise CorruptFileError(f"{path}: payload is {payload} bytes, header dims need {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(t, c, h, w)
    return GridStack(data, tuple(names))


def read_storage(path) -> dict:
    """``well_id,sy`` CSV to a dict."""
    path = Path(path)
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None or [h.strip() for h in header] != ["well_id", "sy"]:
            raise IngestError(f"{path}:1: header must be well_id,sy")
        for row in rd:
            if not row:
                continue
            try:
                wid, sy = row[0].strip(), float(row[1])
            except (IndexError, ValueError) as exc:
                raise IngestError(f"{path}:{rd.line_num}: malformed row ({exc})") from exc
            if wid in out:
                raise IngestError(f"{path}:{rd.line_num}: duplicate well {wid}")
            out[wid] = sy
    return out


def read_polygon(path) -> np.ndarray:
    """One ``lon lat`` (or ``lon,lat``) vertex per line; ``#`` starts a comment."""
    path = Path(path)
    ring = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].replace(",", " ").strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) != 2:
                raise ValueError(f"expected 2 numbers, got {len(parts)}")
            ring.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise IngestError(f"{path}:{lineno}: malformed vertex ({exc})") from exc
    if len(ring) < 3:
        raise IngestError(f"{path}: polygon needs at least 3 vertices, got {len(ring)}")
    return np.array(ring)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, entries):
    """``key = value`` lines, in the order given."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in entries:
            fh.write(f"{key} = {value}\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out
