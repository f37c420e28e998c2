"""On-disk container for stacks of rasters, and the feature manifest.

Container layout (all little-endian)::

    0   8 bytes   magic b"GRIDPPFS"
    8   uint16    format version (1)
    10  uint16    dtype code (1 = float32, 2 = float64)
    12  uint32    number of arrays
    16  uint64    manifest length in bytes
    24  ...       UTF-8 JSON manifest
    ..  ...       arrays, row-major, concatenated in manifest order

Arrays are ``(n_lat, n_lon)`` rasters unless the manifest carries an
``array_shapes`` list.  One :class:`FieldSet` is stored per file, named
``<ISO8601 valid time>_<lead>h.fld``.
"""
from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .grid import Grid, GridError, make_grid

MAGIC = b"GRIDPPFS"
VERSION = 1
_HEADER = struct.Struct("<8sHHI")
_LEN = struct.Struct("<Q")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class FieldStoreError(Exception):
    kind = "store"


class FormatError(FieldStoreError):
    kind = "format"


class CountMismatchError(FieldStoreError):
    kind = "count mismatch"


class TruncatedError(FieldStoreError):
    kind = "truncated"


class ShapeMismatchError(FieldStoreError):
    kind = "shape mismatch"


class ManifestError(FieldStoreError):
    kind = "manifest"


# ---------------------------------------------------------------- manifest


@dataclass(frozen=True)
class Feature:
    variable: str
    level: str
    units: str = ""

    @property
    def key(self) -> str:
        return f"{self.variable}@{self.level}" if self.level else self.variable


@dataclass
class FeatureManifest:
    features: list
    grid: Grid
    times: list = field(default_factory=list)
    lead_hours: int = 6

    @property
    def n_features(self) -> int:
        return len(self.features)

    def keys(self) -> list[str]:
        return [f.key for f in self.features]

    def compatible(self, other: "FeatureManifest") -> bool:
        return self.features == other.features and self.grid == other.grid

    def to_dict(self) -> dict:
        return {
            "features": [
                {"variable": f.variable, "level": f.level, "units": f.units} for f in self.features
            ],
            "grid": self.grid.to_dict(),
            "times": [format_time(t) for t in self.times],
            "lead_hours": self.lead_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureManifest":
        try:
            features = [Feature(f["variable"], str(f.get("level", "")), f.get("units", ""))
                        for f in d["features"]]
            grid = Grid.from_dict(d["grid"])
        except (KeyError, TypeError, GridError) as exc:
            raise ManifestError(f"invalid manifest: {exc}") from exc
        times = [parse_time(t) for t in d.get("times", [])]
        return cls(features, grid, times, int(d.get("lead_hours", 0)))


def validate_manifest(manifest: FeatureManifest) -> list[str]:
    """List rule violations; empty when the manifest is well formed."""
    problems = []
    if not manifest.features:
        problems.append("features: empty feature list")
    seen = set()
    for f in manifest.features:
        if not f.variable:
            problems.append("features: empty variable name")
        if f.key in seen:
            problems.append(f"features: duplicate feature {f.key!r}")
        seen.add(f.key)
    try:
        g = manifest.grid
        make_grid(g.n_lat, g.n_lon, g.lat_start, g.lat_step, g.lon_start, g.lon_step)
    except GridError as exc:
        problems.append(f"grid: {exc}")
    times = manifest.times
    if any(b <= a for a, b in zip(times, times[1:])):
        problems.append("times: times not strictly increasing")
    elif len(times) > 2:
        steps = {b - a for a, b in zip(times, times[1:])}
        if len(steps) > 1:
            problems.append("times: time step not constant")
    if manifest.lead_hours < 0:
        problems.append("lead_hours: must be >= 0")
    return problems


def desk_manifest(grid: Grid | None = None, times=(), lead_hours: int = 6) -> FeatureManifest:
    """17-feature default: 5 upper-air variables at 3 levels plus 2 single-level."""
    from .grid import global_grid

    upper = [
        ("temperature", "K"),
        ("geopotential_height", "m"),
        ("u_wind", "m s-1"),
        ("v_wind", "m s-1"),
        ("relative_humidity", "%"),
    ]
    feats = [Feature(v, f"{lev}hPa", u) for v, u in upper for lev in (850, 500, 250)]
    feats += [Feature("precipitable_water", "", "kg m-2"), Feature("surface_pressure", "", "Pa")]
    return FeatureManifest(feats, grid or global_grid(1.0), list(times), lead_hours)


def table1_manifest(grid: Grid | None = None, times=(), lead_hours: int = 6) -> FeatureManifest:
    """Full variable inventory: six variables on 21 levels (10, 50, ..., 1000 hPa) plus
    three single-level fields, on the 0.25 degree grid by default."""
    from .grid import global_grid

    levels = [10] + list(range(50, 1001, 50))
    upper = [
        ("temperature", "K"),
        ("geopotential_height", "m"),
        ("u_wind", "m s-1"),
        ("v_wind", "m s-1"),
        ("relative_humidity", "%"),
        ("cloud_mixing_ratio", "kg kg-1"),
    ]
    feats = [Feature(v, f"{lev}hPa", u) for v, u in upper for lev in levels]
    feats += [
        Feature("precipitable_water", "", "kg m-2"),
        Feature("surface_pressure", "", "Pa"),
        Feature("total_ozone", "", "DU"),
    ]
    return FeatureManifest(feats, grid or global_grid(0.25), list(times), lead_hours)


def generic_manifest(n_features: int, grid: Grid, times=(), lead_hours: int = 6) -> FeatureManifest:
    feats = [Feature(f"var{i:02d}", "", "") for i in range(n_features)]
    return FeatureManifest(feats, grid, list(times), lead_hours)


# ---------------------------------------------------------------- time helpers


def parse_time(value) -> datetime:
    if isinstance(value, datetime):
        t = value
    else:
        s = str(value).strip()
        if s.endswith("Z"):
            s = s[:-1] + "+00:00"
        t = datetime.fromisoformat(s)
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


def format_time(t: datetime) -> str:
    return parse_time(t).strftime("%Y-%m-%dT%H:%M:%SZ")


def field_filename(time: datetime, lead_hours: int) -> str:
    return f"{format_time(time)}_{int(lead_hours)}h.fld"


def time_range(start, step_hours: float, n: int) -> list[datetime]:
    start = parse_time(start)
    return [start + timedelta(hours=step_hours * i) for i in range(n)]


# ---------------------------------------------------------------- field sets


@dataclass
class FieldSet:
    """One raster per manifest feature at a single valid time."""

    manifest: FeatureManifest
    time: datetime
    values: np.ndarray  # (F, n_lat, n_lon)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        expected = (self.manifest.n_features,) + self.manifest.grid.shape
        if self.values.shape != expected:
            raise ShapeMismatchError(f"values shape {self.values.shape}, expected {expected}")
        self.time = parse_time(self.time)

    @property
    def grid(self) -> Grid:
        return self.manifest.grid

    def with_values(self, values) -> "FieldSet":
        return replace(self, values=np.asarray(values))

    def check_compatible(self, other: "FieldSet", what: str = "field sets"):
        if not self.manifest.compatible(other.manifest):
            raise ManifestError(f"{what}: manifest or grid mismatch")


def _atomic_write(path: Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, meta: dict, arrays, dtype="<f4"):
    """Write ``arrays`` with a JSON ``meta`` block to ``path`` atomically."""
    dtype = np.dtype(dtype).newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise FieldStoreError(f"unsupported dtype {dtype}")
    arrays = [np.asarray(a) for a in arrays]
    if "array_shapes" not in meta:
        g = meta["grid"]
        for a in arrays:
            if a.shape != (g["n_lat"], g["n_lon"]):
                raise ShapeMismatchError(f"raster shape {a.shape} does not match grid")
    body = b"".join(np.ascontiguousarray(a, dtype=dtype).tobytes() for a in arrays)
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dtype], len(arrays))
    _atomic_write(path, header + _LEN.pack(len(text)) + text + body)


def read_container(path) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _LEN.size:
        raise TruncatedError(f"{path}: file shorter than header")
    magic, version, code, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    (n_meta,) = _LEN.unpack_from(data, _HEADER.size)
    start = _HEADER.size + _LEN.size
    if len(data) < start + n_meta:
        raise TruncatedError(f"{path}: manifest block truncated")
    try:
        meta = json.loads(data[start : start + n_meta].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest block ({exc})") from exc
    if "array_shapes" in meta:
        shapes = [tuple(s) for s in meta["array_shapes"]]
    else:
        try:
            g = meta["grid"]
            shapes = [(int(g["n_lat"]), int(g["n_lon"]))] * count
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: manifest block lacks grid") from exc
    if len(shapes) != count:
        raise CountMismatchError(f"{path}: manifest declares {len(shapes)} arrays, header {count}")
    offset = start + n_meta
    need = sum(int(np.prod(s)) for s in shapes) * dtype.itemsize
    have = len(data) - offset
    if have < need:
        raise TruncatedError(f"{path}: {have} raster bytes present, {need} declared")
    if have > need:
        raise ShapeMismatchError(f"{path}: {have} raster bytes present, {need} declared")
    arrays = []
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(data, dtype=dtype, count=n, offset=offset).reshape(s).copy())
        offset += n * dtype.itemsize
    return meta, arrays


def write_field_set(fs: FieldSet, path, dtype="<f4", attrs: dict | None = None):
    problems = validate_manifest(fs.manifest)
    if problems:
        raise ManifestError("; ".join(problems))
    meta = fs.manifest.to_dict()
    del meta["times"]
    meta["time"] = format_time(fs.time)
    if attrs:
        meta["attrs"] = attrs
    write_container(path, meta, list(fs.values), dtype=dtype)


def read_field_set(path, with_attrs: bool = False):
    meta, arrays = read_container(path)
    try:
        time = parse_time(meta["time"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: missing or bad time") from exc
    manifest = FeatureManifest.from_dict({**meta, "times": [meta["time"]]})
    if len(arrays) != manifest.n_features:
        raise CountMismatchError(
            f"{path}: manifest declares {manifest.n_features} features, {len(arrays)} rasters present"
        )
    fs = FieldSet(manifest, time, np.stack(arrays))
    if with_attrs:
        return fs, meta.get("attrs", {})
    return fs


_SERIES_NAME = re.compile(r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}Z_\d+h\.fld$")


def write_series(directory, series, dtype="<f4"):
    directory = Path(directory)
    for fs in series:
        write_field_set(fs, directory / field_filename(fs.time, fs.manifest.lead_hours), dtype)


def read_series(directory) -> list[FieldSet]:
    """Read every ``<time>_<lead>h.fld`` in ``directory``, sorted by valid time."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    series = [read_field_set(p) for p in sorted(directory.glob("*.fld")) if _SERIES_NAME.match(p.name)]
    series.sort(key=lambda fs: fs.time)
    return series
