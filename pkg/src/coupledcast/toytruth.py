"""Synthetic coupled truth: a fast atmospheric Lorenz-96 ring over a slow ocean ring.

Equations (``m(k) = k // J`` is the ocean site under atmospheric site ``k``)::

    da_k/dt = c * [ (a_{k+1} - a_{k-2}) a_{k-1} - a_k + F(t) + h_c * g_a * (o_{m(k)} - x_ref) ]
    do_m/dt = [ (o_{m+1} - o_{m-2}) o_{m-1} - o_m + F(t) + h_c * g_o * (abar_m - x_ref) ] / tau_o

with ``abar_m`` the mean of the ``J`` atmospheric sites above ocean site
``m``. Coupling acts on departures from the reference level ``x_ref`` so
that ``h_c = 0`` leaves two independent rings; ``tau_o`` (``ocn_timescale``)
slows the ocean further. One forecast day spans
``steps_per_day`` RK4 steps of length ``dt`` model time units.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .gridfield import FieldSeries, GridSpec, variable, model_sphere, read_gfb, write_gfb


class IntegrationError(FloatingPointError):
    def __init__(self, step):
        super().__init__(f"non-finite state at integrator step {step}")
        self.step = step


# (kind, latitude profile, amplitude, offset) for each observation operator
DEFAULT_OPERATORS = {
    "T2M": ("site", "cos", 1.0, 15.0),
    "TP": ("smooth", "tropical", 0.5, 3.0),
    "OLR": ("smooth", "tropical", -2.0, 240.0),
    "MSL": ("gradient", "extratropical", 1.5, 1010.0),
    "Z500": ("smooth", "cos", 10.0, 5500.0),
    "U850": ("gradient", "tropical", 1.0, 0.0),
    "U200": ("gradient", "tropical", -1.5, 0.0),
    "SM100": ("smooth5", "uniform", 0.05, 0.3),
    "SSH": ("site", "uniform", 0.05, 0.0),
    "T300": ("smooth", "cos", 0.5, 10.0),
    "MLT": ("gradient", "uniform", 5.0, 50.0),
    "SIC": ("smooth", "polar", -0.05, 0.5),
}


@dataclass
class ToyConfig:
    K_ocn: int = 8
    J: int = 4
    F: float = 8.0
    c: float = 10.0
    h_c: float = 1.0
    atm_gain: float = 2.0
    ocn_gain: float = 1.0
    ocn_timescale: float = 5.0
    x_ref: float = 2.3
    dt: float = 0.005
    steps_per_day: int = 10
    seasonal_amplitude: float = 0.0
    year_length: int = 360
    spinup_days: int = 100
    lats: tuple = (-45.0, -10.0, 10.0, 45.0)
    nlon: int = 32
    operators: dict = field(default_factory=lambda: dict(DEFAULT_OPERATORS))

    def __post_init__(self):
        if self.J < 1 or self.K_ocn < 4:
            raise ValueError("need J >= 1 and K_ocn >= 4")
        if self.dt <= 0 or self.steps_per_day < 1 or self.ocn_timescale <= 0:
            raise ValueError("dt, steps_per_day and ocn_timescale must be positive")
        self.lats = tuple(float(x) for x in self.lats)
        for name in self.operators:
            variable(name)

    @property
    def K_atm(self):
        return self.K_ocn * self.J

    @property
    def grid(self):
        return GridSpec(self.lats, np.arange(self.nlon) * (360.0 / self.nlon))

    def variables(self, sphere):
        return tuple(v for v in self.operators if model_sphere(v) == sphere)

    def to_dict(self):
        return asdict(self)


def tendency(cfg, a, o, day=0.0):
    """Time derivative of both rings; arrays may carry leading batch axes."""
    forcing = cfg.F
    if cfg.seasonal_amplitude:
        forcing = cfg.F * (1.0 + cfg.seasonal_amplitude * np.sin(2 * np.pi * day / cfg.year_length))
    abar = a.reshape(a.shape[:-1] + (cfg.K_ocn, cfg.J)).mean(axis=-1)
    o_under = np.repeat(o, cfg.J, axis=-1)
    adv_a = (np.roll(a, -1, -1) - np.roll(a, 2, -1)) * np.roll(a, 1, -1)
    adv_o = (np.roll(o, -1, -1) - np.roll(o, 2, -1)) * np.roll(o, 1, -1)
    da = cfg.c * (adv_a - a + forcing + cfg.h_c * cfg.atm_gain * (o_under - cfg.x_ref))
    do = (adv_o - o + forcing + cfg.h_c * cfg.ocn_gain * (abar - cfg.x_ref)) / cfg.ocn_timescale
    return da, do


def rk4_step(cfg, a, o, day=0.0):
    h = cfg.dt
    dday = h / (cfg.dt * cfg.steps_per_day)
    k1 = tendency(cfg, a, o, day)
    k2 = tendency(cfg, a + 0.5 * h * k1[0], o + 0.5 * h * k1[1], day + 0.5 * dday)
    k3 = tendency(cfg, a + 0.5 * h * k2[0], o + 0.5 * h * k2[1], day + 0.5 * dday)
    k4 = tendency(cfg, a + h * k3[0], o + h * k3[1], day + dday)
    return (a + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            o + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))


def random_state(cfg, seed):
    rng = np.random.default_rng(seed)
    return (cfg.F * 0.3 + rng.standard_normal(cfg.K_atm),
            cfg.F * 0.3 + rng.standard_normal(cfg.K_ocn))


def integrate(cfg, state0=None, n_days=1, seed=0, day0=0):
    """RK4 trajectory sampled once per day.

    Returns ``(atm, ocn)`` with shapes ``(n_days + 1, ..., K)``; index 0 is the
    initial state. ``state0=None`` draws a random start from ``seed``.
    """
    a, o = random_state(cfg, seed) if state0 is None else (np.array(s, dtype=np.float64) for s in state0)
    if not (np.isfinite(a).all() and np.isfinite(o).all()):
        raise IntegrationError(0)
    atm = np.empty((n_days + 1,) + a.shape)
    ocn = np.empty((n_days + 1,) + o.shape)
    atm[0], ocn[0] = a, o
    n = 0
    for d in range(n_days):
        for s in range(cfg.steps_per_day):
            a, o = rk4_step(cfg, a, o, day0 + d + s / cfg.steps_per_day)
            n += 1
        if not (np.isfinite(a).all() and np.isfinite(o).all()):
            raise IntegrationError(n)
        atm[d + 1], ocn[d + 1] = a, o
    return atm, ocn


# -- observation operators ---------------------------------------------------

def _site_to_lon(n_sites, nlon):
    """Linear interpolation from equally spaced ring sites to longitudes."""
    pos = np.arange(nlon) * n_sites / nlon
    lo = np.floor(pos).astype(int)
    t = pos - lo
    m = np.zeros((nlon, n_sites))
    m[np.arange(nlon), lo % n_sites] += 1 - t
    m[np.arange(nlon), (lo + 1) % n_sites] += t
    return m


def _profile(kind, lats):
    lat = np.deg2rad(np.asarray(lats))
    return {
        "uniform": np.ones_like(lat),
        "cos": np.cos(lat),
        "tropical": np.exp(-(np.rad2deg(lat) / 25.0) ** 2) + 0.2,
        "extratropical": np.abs(np.sin(lat)) + 0.2,
        "polar": np.abs(np.sin(lat)) ** 2 + 0.1,
    }[kind]


def _site_filter(kind, n):
    eye = np.eye(n)
    if kind == "site":
        return eye
    if kind == "smooth":
        return (np.roll(eye, 1, 1) + eye + np.roll(eye, -1, 1)) / 3.0
    if kind == "smooth5":
        return sum(np.roll(eye, s, 1) for s in range(-2, 3)) / 5.0
    if kind == "gradient":
        return (np.roll(eye, -1, 1) - np.roll(eye, 1, 1)) / 2.0
    raise ValueError(f"unknown operator kind {kind!r}")


@dataclass
class ObservationOperator:
    """Affine map from one sphere's site state to a variable plane."""

    name: str
    matrix: np.ndarray  # (nlat * nlon, K)
    offset: np.ndarray  # (nlat, nlon)

    def render(self, state):
        state = np.asarray(state)
        flat = state @ self.matrix.T
        return flat.reshape(state.shape[:-1] + self.offset.shape) + self.offset


def build_operators(cfg):
    grid = cfg.grid
    ops = {}
    for name, (kind, prof, amp, offset) in cfg.operators.items():
        sphere = model_sphere(name)
        k = cfg.K_atm if sphere == "atm" else cfg.K_ocn
        lonmap = _site_to_lon(k, grid.nlon) @ _site_filter(kind, k)
        p = _profile(prof, grid.lats)
        mat = amp * p[:, None, None] * lonmap[None, :, :]
        ops[name] = ObservationOperator(name, mat.reshape(grid.nlat * grid.nlon, k),
                                        np.full(grid.shape, float(offset)))
    return ops


def identity_operator(cfg, site, sphere="atm"):
    """Operator whose plane equals the state of one site everywhere."""
    k = cfg.K_atm if sphere == "atm" else cfg.K_ocn
    grid = cfg.grid
    mat = np.zeros((grid.nlat * grid.nlon, k))
    mat[:, site] = 1.0
    return ObservationOperator(f"site{site}", mat, np.zeros(grid.shape))


def render(cfg, atm, ocn, operators=None):
    """Planes for every configured variable; returns ``(atm_planes, ocn_planes)``.

    Planes are stacked on the axis after the time/batch axes:
    ``(..., C, nlat, nlon)`` in the order of :meth:`ToyConfig.variables`.
    """
    ops = build_operators(cfg) if operators is None else operators
    a = np.stack([ops[v].render(atm) for v in cfg.variables("atm")], axis=-3)
    o = np.stack([ops[v].render(ocn) for v in cfg.variables("ocn")], axis=-3)
    return a, o


# -- datasets ----------------------------------------------------------------

def init_calendar(year_length, per_year):
    """Initialisation days within a pseudo-year, alternating 3- and 4-day gaps."""
    days, d = [], 0
    while len(days) < per_year and d < year_length:
        days.append(d)
        d += 3 if len(days) % 2 else 4
    return days


@dataclass
class ToyDataset:
    """Daily truth planes over ``n_years`` pseudo-years plus a forecast tail.

    ``atm``/``ocn`` have shape ``(n_days, C, nlat, nlon)``; day ``t`` of year
    ``y`` sits at index ``y * year_length + t`` (plus one leading day so every
    initialisation has a previous day).
    """

    cfg: ToyConfig
    atm: np.ndarray
    ocn: np.ndarray
    atm_state: np.ndarray
    ocn_state: np.ndarray
    n_years: int
    inits: list
    horizon: int

    @property
    def grid(self):
        return self.cfg.grid

    def index(self, year, day):
        return 1 + year * self.cfg.year_length + day

    def step_input(self, year, day):
        from .csm import StepInput
        i = self.index(year, day)
        return StepInput(self.atm[i - 1], self.atm[i], self.ocn[i - 1], self.ocn[i])

    def verifying(self, year, day, horizon=None):
        """Truth for lead days 1..horizon after an initialisation."""
        h = self.horizon if horizon is None else horizon
        i = self.index(year, day)
        return self.atm[i + 1:i + 1 + h], self.ocn[i + 1:i + 1 + h]

    def year_slice(self, years):
        lo = self.index(years[0], 0) - 1
        hi = self.index(years[-1], self.cfg.year_length - 1) + 1
        return slice(lo, hi)

    def series(self, var, year):
        """Whole-year truth series of one variable (absolute day index)."""
        sphere = model_sphere(var)
        names = self.cfg.variables(sphere)
        arr = self.atm if sphere == "atm" else self.ocn
        i0 = self.index(year, 0)
        days = np.arange(self.cfg.year_length)
        vals = arr[i0 + days, names.index(var)]
        return FieldSeries(self.grid, var, year * self.cfg.year_length + days, vals)


def emit_dataset(cfg, years, inits_per_year, horizon=60, seed=0):
    """Integrate one long trajectory and render it as daily planes."""
    if years < 3:
        raise ValueError("at least 3 pseudo-years are required")
    calendar = init_calendar(cfg.year_length, inits_per_year)
    if horizon > cfg.year_length:
        raise ValueError("horizon exceeds trajectory")
    n_days = cfg.spinup_days + years * cfg.year_length + horizon + 1
    atm, ocn = integrate(cfg, None, n_days, seed)
    atm, ocn = atm[cfg.spinup_days + 1:], ocn[cfg.spinup_days + 1:]
    a_planes, o_planes = render(cfg, atm, ocn)
    return ToyDataset(cfg, a_planes, o_planes, atm, ocn, years,
                      [(y, d) for y in range(years) for d in calendar], horizon)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(ds, out_dir):
    """Write the GFB directory layout and a manifest CSV; returns the manifest rows."""
    out = Path(out_dir)
    rows = []
    for year in range(ds.n_years):
        for var in ds.cfg.operators:
            path = out / "truth" / str(year) / f"{var}.gfb"
            write_gfb(path, ds.series(var, year))
            rows.append(("truth", year, "", var, path.relative_to(out).as_posix()))
    # the day before year 0 and the forecast tail after the last year
    n = ds.n_years * ds.cfg.year_length
    edge = np.r_[-1, np.arange(n, n + ds.horizon)]
    for sphere, arr in (("atm", ds.atm), ("ocn", ds.ocn)):
        for c, var in enumerate(ds.cfg.variables(sphere)):
            path = out / "truth" / "edge" / f"{var}.gfb"
            write_gfb(path, FieldSeries(ds.grid, var, edge, arr[edge + 1, c]))
            rows.append(("edge", "", "", var, path.relative_to(out).as_posix()))
    for year, day in ds.inits:
        i = ds.index(year, day)
        times = [year * ds.cfg.year_length + day - 1, year * ds.cfg.year_length + day]
        for sphere, arr in (("atm", ds.atm), ("ocn", ds.ocn)):
            for c, var in enumerate(ds.cfg.variables(sphere)):
                path = out / "inits" / str(year) / f"{day:03d}" / f"{var}.gfb"
                write_gfb(path, FieldSeries(ds.grid, var, times, arr[i - 1:i + 1, c]))
                rows.append(("init", year, day, var, path.relative_to(out).as_posix()))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "year", "init_day", "var", "path", "sha256"])
        for r in rows:
            w.writerow(list(r) + [_sha256(out / r[-1])])
    return rows


def read_dataset(cfg, directory, inits_per_year):
    """Rebuild a :class:`ToyDataset` (planes only) from a written directory."""
    root = Path(directory)
    if not (root / "truth" / "edge").is_dir():
        raise FileNotFoundError(f"no truth dataset under {root}")
    years = sorted(int(p.name) for p in (root / "truth").iterdir() if p.name.isdigit())
    if years != list(range(len(years))) or len(years) < 3:
        raise ValueError("truth years must be 0..N-1 with N >= 3")
    planes = {}
    for sphere in ("atm", "ocn"):
        chans = []
        for var in cfg.variables(sphere):
            edge = read_gfb(root / "truth" / "edge" / f"{var}.gfb")
            if edge.grid != cfg.grid:
                raise ValueError(f"{var}: grid does not match the configuration")
            body = [read_gfb(root / "truth" / str(y) / f"{var}.gfb").values for y in years]
            chans.append(np.concatenate([edge.values[:1]] + body + [edge.values[1:]]))
        planes[sphere] = np.stack(chans, axis=1)
    horizon = planes["atm"].shape[0] - 1 - len(years) * cfg.year_length
    calendar = init_calendar(cfg.year_length, inits_per_year)
    return ToyDataset(cfg, planes["atm"], planes["ocn"], None, None, len(years),
                      [(y, d) for y in years for d in calendar], horizon)
