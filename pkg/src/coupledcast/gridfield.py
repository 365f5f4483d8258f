"""Gridded 2-D fields, latitude weighting, bilinear regridding and GFB files.

A :class:`Field` is one masked ``(nlat, nlon)`` snapshot; a
:class:`FieldSeries` stacks snapshots of one variable along a strictly
increasing integer day axis. Longitudes live in ``[0, 360)`` and wrap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPHERES = ("atmosphere", "land", "ocean", "sea-ice")

_REGISTRY = {
    "TP": "atmosphere", "T2M": "atmosphere", "T2M_MIN": "atmosphere",
    "T2M_MAX": "atmosphere", "Z500": "atmosphere", "OLR": "atmosphere",
    "MSL": "atmosphere", "U850": "atmosphere", "U200": "atmosphere",
    "SM100": "land", "ST100": "land",
    "T300": "ocean", "S300": "ocean", "MLT": "ocean", "SSH": "ocean",
    "SIC": "sea-ice", "SIT": "sea-ice",
}


class GridError(ValueError):
    """Incompatible or malformed grids."""


@dataclass(frozen=True)
class VariableId:
    name: str
    sphere: str

    def __post_init__(self):
        if self.sphere not in SPHERES:
            raise ValueError(f"unknown sphere {self.sphere!r}")

    def __str__(self):
        return self.name


def variable(name):
    """Look up a registered variable by name."""
    try:
        return VariableId(name, _REGISTRY[name])
    except KeyError:
        raise KeyError(f"unregistered variable {name!r}") from None


def registry():
    return {name: VariableId(name, s) for name, s in _REGISTRY.items()}


def model_sphere(var):
    """Which model stack carries ``var``: land rides with the atmosphere, sea ice with the ocean."""
    sphere = var.sphere if isinstance(var, VariableId) else variable(var).sphere
    return "atm" if sphere in ("atmosphere", "land") else "ocn"


def _strictly_monotonic(a):
    d = np.diff(a)
    return bool(np.all(d > 0) or np.all(d < 0))


class GridSpec:
    """Explicit latitude/longitude axes in degrees."""

    __slots__ = ("lats", "lons")

    def __init__(self, lats, lons):
        lats = np.array(lats, dtype=np.float64)
        lons = np.array(lons, dtype=np.float64)
        if lats.ndim != 1 or lons.ndim != 1 or lats.size < 2 or lons.size < 2:
            raise GridError("grid needs at least 2 latitudes and 2 longitudes")
        if not _strictly_monotonic(lats) or np.any(np.abs(lats) > 90):
            raise GridError("latitudes must be strictly monotonic within [-90, 90]")
        if not np.all(np.diff(lons) > 0) or lons[0] < 0 or lons[-1] >= 360:
            raise GridError("longitudes must be strictly increasing within [0, 360)")
        lats.flags.writeable = False
        lons.flags.writeable = False
        self.lats = lats
        self.lons = lons

    @classmethod
    def regular(cls, nlat, nlon, lat_span=(-90.0, 90.0)):
        """Cell-centred regular grid."""
        lo, hi = lat_span
        dlat = (hi - lo) / nlat
        lats = lo + dlat * (np.arange(nlat) + 0.5)
        lons = np.arange(nlon) * (360.0 / nlon)
        return cls(lats, lons)

    @property
    def nlat(self):
        return self.lats.size

    @property
    def nlon(self):
        return self.lons.size

    @property
    def shape(self):
        return (self.nlat, self.nlon)

    def weights(self):
        """cos(latitude) weights broadcast to the full grid."""
        return np.broadcast_to(lat_weights(self.lats)[:, None], self.shape)

    def __eq__(self, other):
        return (isinstance(other, GridSpec) and np.array_equal(self.lats, other.lats)
                and np.array_equal(self.lons, other.lons))

    def __hash__(self):
        return hash((self.lats.tobytes(), self.lons.tobytes()))

    def __repr__(self):
        return f"GridSpec(nlat={self.nlat}, nlon={self.nlon})"


def lat_weights(lats):
    return np.cos(np.deg2rad(np.asarray(lats, dtype=np.float64)))


def _check_values(values, mask, shape):
    values = np.array(values, dtype=np.float64)
    if values.shape != shape:
        raise GridError(f"values shape {values.shape} does not match grid {shape}")
    mask = np.ones(shape, dtype=bool) if mask is None else np.array(mask, dtype=bool)
    if mask.shape != shape:
        raise GridError(f"mask shape {mask.shape} does not match grid {shape}")
    if not np.all(np.isfinite(values[mask])):
        raise GridError("non-finite values at valid points")
    return values, mask


@dataclass(eq=False)
class Field:
    grid: GridSpec
    var: VariableId
    values: np.ndarray
    mask: np.ndarray = None
    level: str = None
    time: int = 0

    def __post_init__(self):
        if isinstance(self.var, str):
            self.var = variable(self.var)
        self.values, self.mask = _check_values(self.values, self.mask, self.grid.shape)
        self.time = int(self.time)

    def _combine(self, other, op):
        if isinstance(other, Field):
            if other.grid != self.grid:
                raise GridError("fields live on different grids")
            return Field(self.grid, self.var, op(self.values, other.values),
                         self.mask & other.mask, self.level, self.time)
        return Field(self.grid, self.var, op(self.values, float(other)), self.mask.copy(),
                     self.level, self.time)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, other):
        return self._combine(other, np.multiply)

    __radd__ = __add__
    __rmul__ = __mul__


class FieldSeries:
    """Fields of one variable on one grid, keyed by strictly increasing day index."""

    def __init__(self, grid, var, times, values, mask=None, level=None, meta=None):
        if isinstance(var, str):
            var = variable(var)
        times = np.array(times, dtype=np.int64).reshape(-1)
        if times.size and not np.all(np.diff(times) > 0):
            raise GridError("time indices must be strictly increasing")
        shape = (times.size,) + grid.shape
        self.values, self.mask = _check_values(values, mask, shape)
        self.grid, self.var, self.times, self.level = grid, var, times, level
        self.meta = dict(meta or {})

    @classmethod
    def from_fields(cls, fields):
        fields = list(fields)
        if not fields:
            raise GridError("empty series")
        f0 = fields[0]
        for f in fields[1:]:
            if f.grid != f0.grid or f.var != f0.var or f.level != f0.level:
                raise GridError("series members must share grid, variable and level")
        return cls(f0.grid, f0.var, [f.time for f in fields], np.stack([f.values for f in fields]),
                   np.stack([f.mask for f in fields]), f0.level)

    def __len__(self):
        return self.times.size

    def __contains__(self, t):
        return bool(np.any(self.times == t))

    def __getitem__(self, t):
        idx = np.flatnonzero(self.times == t)
        if idx.size == 0:
            raise KeyError(t)
        i = int(idx[0])
        return Field(self.grid, self.var, self.values[i], self.mask[i], self.level, t)

    def __iter__(self):
        return (self[int(t)] for t in self.times)

    def with_values(self, values, times=None):
        return FieldSeries(self.grid, self.var, self.times if times is None else times, values,
                           self.mask if times is None else None, self.level, self.meta)

    def equals(self, other):
        return (self.grid == other.grid and self.var == other.var and self.level == other.level
                and np.array_equal(self.times, other.times)
                and self.values.tobytes() == other.values.tobytes()
                and np.array_equal(self.mask, other.mask))


def latitude_weighted_mean(f):
    """cos(lat)-weighted mean over the valid points of a field."""
    values = f.values if isinstance(f, Field) else np.asarray(f)
    mask = f.mask if isinstance(f, Field) else np.isfinite(values)
    if not mask.any():
        raise ValueError("empty field")
    w = np.broadcast_to(lat_weights(f.grid.lats)[:, None], values.shape)[mask]
    return float(np.sum(w * values[mask]) / np.sum(w))


def _axis_weights(src, dst, periodic):
    """Sparse-free linear interpolation matrix of shape (len(dst), len(src))."""
    src = np.asarray(src)
    out = np.zeros((dst.size, src.size))
    if periodic:
        ext = np.concatenate([src, [src[0] + 360.0]])
        for i, x in enumerate(dst):
            x = x % 360.0
            if x < ext[0]:
                x += 360.0
            j = min(np.searchsorted(ext, x, side="right") - 1, src.size - 1)
            t = (x - ext[j]) / (ext[j + 1] - ext[j])
            out[i, j] += 1.0 - t
            out[i, (j + 1) % src.size] += t
        return out
    order = np.argsort(src)
    s = src[order]
    for i, x in enumerate(dst):
        if x < s[0] or x > s[-1]:
            raise GridError("extrapolation")
        j = min(np.searchsorted(s, x, side="right") - 1, s.size - 2)
        t = (x - s[j]) / (s[j + 1] - s[j])
        out[i, order[j]] += 1.0 - t
        out[i, order[j + 1]] += t
    return out


def regrid(f, target):
    """Bilinear interpolation of a fully valid field onto ``target``."""
    if not f.mask.all():
        raise GridError("masked regridding is not supported")
    wl = _axis_weights(f.grid.lats, target.lats, periodic=False)
    wx = _axis_weights(f.grid.lons, target.lons, periodic=True)
    return Field(target, f.var, wl @ f.values @ wx.T, None, f.level, f.time)


# -- GFB files ---------------------------------------------------------------

class GfbError(ValueError):
    code = "gfb"


class BadMagic(GfbError):
    code = "bad_magic"


class Truncated(GfbError):
    code = "truncated"


class DimensionMismatch(GfbError):
    code = "dimension_mismatch"


GFB_MAGIC = b"GFB1"
_REQUIRED = ("var", "sphere", "level", "nlat", "nlon", "ntime", "time0")


def _encode_header(series):
    meta = {
        "var": series.var.name, "sphere": series.var.sphere,
        "level": "none" if series.level is None else str(series.level),
        "nlat": series.grid.nlat, "nlon": series.grid.nlon, "ntime": len(series),
        "time0": int(series.times[0]) if len(series) else 0,
    }
    for k, v in series.meta.items():
        if k in meta or "=" in k or "\n" in f"{k}{v}":
            raise GfbError(f"invalid metadata key {k!r}")
        meta[k] = v
    return "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")


def gfb_bytes(series):
    header = _encode_header(series)
    n = series.values.size
    mask_bits = np.packbits(series.mask.reshape(-1), bitorder="little")
    assert mask_bits.size == (n + 7) // 8
    return b"".join([
        GFB_MAGIC, struct.pack("<I", len(header)), header,
        series.grid.lats.astype("<f8").tobytes(), series.grid.lons.astype("<f8").tobytes(),
        series.times.astype("<i8").tobytes(), series.values.astype("<f8").tobytes(),
        mask_bits.tobytes(),
    ])


def write_gfb(path, series):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(gfb_bytes(series))


def parse_gfb(buf):
    if buf[:4] != GFB_MAGIC:
        raise BadMagic("bad magic")
    if len(buf) < 8:
        raise Truncated("truncated")
    (hlen,) = struct.unpack("<I", buf[4:8])
    if len(buf) < 8 + hlen:
        raise Truncated("truncated")
    meta = {}
    for line in buf[8:8 + hlen].decode("utf-8").splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise GfbError(f"malformed header line {line!r}")
        meta[key] = value
    missing = [k for k in _REQUIRED if k not in meta]
    if missing:
        raise GfbError(f"missing header keys {missing}")
    nlat, nlon, ntime = int(meta["nlat"]), int(meta["nlon"]), int(meta["ntime"])
    npts = ntime * nlat * nlon
    need = 8 * (nlat + nlon + ntime + npts) + (npts + 7) // 8
    body = buf[8 + hlen:]
    if len(body) < need:
        raise Truncated("truncated")
    if len(body) > need:
        raise DimensionMismatch("dimension mismatch: payload longer than header promises")
    pos = 0

    def take(n, dtype):
        nonlocal pos
        arr = np.frombuffer(body, dtype=dtype, count=n, offset=pos)
        pos += n * np.dtype(dtype).itemsize
        return arr.astype(np.float64 if dtype == "<f8" else np.int64)

    lats, lons = take(nlat, "<f8"), take(nlon, "<f8")
    times = take(ntime, "<i8")
    values = take(npts, "<f8").reshape(ntime, nlat, nlon)
    bits = np.frombuffer(body, dtype=np.uint8, offset=pos)
    mask = np.unpackbits(bits, bitorder="little")[:npts].astype(bool).reshape(ntime, nlat, nlon)
    if ntime and int(meta["time0"]) != times[0]:
        raise DimensionMismatch("dimension mismatch: time0 disagrees with time axis")
    name, sphere = meta.pop("var"), meta.pop("sphere")
    level = meta.pop("level")
    for k in ("nlat", "nlon", "ntime", "time0"):
        meta.pop(k)
    var = VariableId(name, sphere)
    return FieldSeries(GridSpec(lats, lons), var, times, values, mask,
                       None if level == "none" else level, meta)


def read_gfb(path):
    return parse_gfb(Path(path).read_bytes())
