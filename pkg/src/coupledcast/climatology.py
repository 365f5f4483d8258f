"""Hindcast climatologies, anomalies, weekly means, detrending, standardised anomalies.

Climatological statistics are keyed by (initialisation calendar date, lead
day), so lead-dependent model drift is removed together with the mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .gridfield import (Field, FieldSeries, GridSpec, VariableId, lat_weights,
                        read_gfb, write_gfb, variable)

DEFAULT_PERCENTILES = (10.0, 100.0 / 3.0, 200.0 / 3.0, 90.0)


@dataclass
class HindcastSet:
    """Hindcast (or observed) values for every (year, init date) pair.

    ``values`` has shape ``(n_years, n_dates, n_members, n_leads, nlat, nlon)``;
    observations use a single member.
    """

    grid: GridSpec
    var: VariableId
    years: tuple
    dates: tuple
    leads: np.ndarray
    values: np.ndarray
    level: str = None

    def __post_init__(self):
        if isinstance(self.var, str):
            self.var = variable(self.var)
        self.years, self.dates = tuple(self.years), tuple(self.dates)
        self.leads = np.asarray(self.leads, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 5:
            self.values = self.values[:, :, None]
        expect = (len(self.years), len(self.dates))
        if self.values.shape[:2] != expect or self.values.shape[3:] != (self.leads.size,) + self.grid.shape:
            raise ValueError(f"hindcast values of shape {self.values.shape} do not match "
                             f"years x dates x members x leads x grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("hindcast values must be finite")

    @classmethod
    def from_series(cls, runs):
        """Build from ``{(year, date): [FieldSeries per member]}`` (lead-indexed)."""
        years = sorted({y for y, _ in runs})
        dates = sorted({d for _, d in runs})
        missing = [(y, d) for y in years for d in dates if (y, d) not in runs]
        if missing:
            raise ValueError(f"hindcast calendar incomplete, missing {missing[:3]}")
        first = runs[(years[0], dates[0])][0]
        for members in runs.values():
            for s in members:
                if s.grid != first.grid or s.var != first.var:
                    raise ValueError("inconsistent grids or variables across hindcasts")
                if not np.array_equal(s.times, first.times):
                    raise ValueError("inconsistent lead axes across hindcasts")
        vals = np.stack([np.stack([np.stack([s.values for s in runs[(y, d)]]) for d in dates])
                         for y in years])
        return cls(first.grid, first.var, years, dates, first.times, vals, first.level)


class Climatology(TransformerMixin, BaseEstimator):
    """Per-(date, lead) mean, interannual std and percentiles of a hindcast set.

    Parameters
    ----------
    percentiles : tuple of float
        Percentile ranks (0-100) to store, estimated by linear interpolation
        on the pooled year x member sample.
    """

    def __init__(self, percentiles=DEFAULT_PERCENTILES):
        self.percentiles = percentiles

    def fit(self, hindcast, y=None):
        h = hindcast
        if len(h.years) < 2:
            raise ValueError("at least 2 hindcast years are required")
        v = h.values
        self.grid_, self.var_, self.level_ = h.grid, h.var, h.level
        self.dates_ = tuple(h.dates)
        self.leads_ = h.leads.copy()
        self.mean_ = v.mean(axis=(0, 2))
        # interannual spread of per-year (member-mean) values, divisor n
        self.std_ = v.mean(axis=2).std(axis=0)
        pooled = np.moveaxis(v, 2, 1).reshape((-1,) + v.shape[1:2] + v.shape[3:])
        self.percentile_ = {float(q): np.percentile(pooled, q, axis=0) for q in self.percentiles}
        return self

    def _check(self):
        if not hasattr(self, "mean_"):
            raise NotFittedError("Climatology is not fitted")

    def _index(self, date, lead):
        self._check()
        try:
            di = self.dates_.index(date)
        except ValueError:
            raise KeyError(f"missing climatology key: date {date}") from None
        li = np.flatnonzero(self.leads_ == lead)
        if li.size == 0:
            raise KeyError(f"missing climatology key: lead {lead}")
        return di, int(li[0])

    def _field(self, arr, date, lead):
        di, li = self._index(date, lead)
        return Field(self.grid_, self.var_, arr[di, li], None, self.level_, lead)

    def mean_field(self, date, lead):
        return self._field(self.mean_, date, lead)

    def std_field(self, date, lead):
        return self._field(self.std_, date, lead)

    def percentile_field(self, q, date, lead):
        key = min(self.percentile_, key=lambda k: abs(k - q))
        if abs(key - q) > 1e-9:
            raise KeyError(f"percentile {q} not stored")
        return self._field(self.percentile_[key], date, lead)

    def stat(self, name, date, leads):
        """Stacked statistic ``(len(leads), nlat, nlon)``; ``name`` is mean, std or pNN."""
        arr = self.mean_ if name == "mean" else self.std_ if name == "std" else None
        if arr is None:
            arr = self.percentile_[_parse_pct(name, self.percentile_)]
        idx = [self._index(date, int(l)) for l in leads]
        return np.stack([arr[di, li] for di, li in idx])

    def transform(self, X, init_date=None):
        return anomaly(X, self, init_date)

    # -- persistence ---------------------------------------------------------
    def save(self, directory):
        """One GFB per (date, statistic) plus ``index.csv``."""
        self._check()
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        stats = {"mean": self.mean_, "std": self.std_}
        stats.update({_pct_name(q): a for q, a in self.percentile_.items()})
        rows = []
        level = "none" if self.level_ is None else str(self.level_)
        for di, date in enumerate(self.dates_):
            for name, arr in stats.items():
                fname = f"{self.var_.name}_{level}_{date:04d}_{name}.gfb"
                s = FieldSeries(self.grid_, self.var_, self.leads_, arr[di], level=self.level_,
                                meta={"stat": name, "init_date": str(date)})
                write_gfb(out / fname, s)
                rows += [(date, int(l), self.var_.name, level, name, fname) for l in self.leads_]
        with open(out / "index.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "lead", "var", "level", "stat", "filename"])
            w.writerows(rows)
        return rows

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        with open(d / "index.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        files = {}
        for r in rows:
            files.setdefault((int(r["date"]), r["stat"]), r["filename"])
        dates = sorted({k[0] for k in files})
        names = sorted({k[1] for k in files}, key=lambda n: (n[0] != "m", n))
        series = {k: read_gfb(d / f) for k, f in files.items()}
        s0 = series[(dates[0], "mean")]
        obj = cls(percentiles=tuple(_parse_pct(n, None) for n in names if n.startswith("p")))
        obj.grid_, obj.var_, obj.level_ = s0.grid, s0.var, s0.level
        obj.dates_, obj.leads_ = tuple(dates), s0.times.copy()
        stack = lambda n: np.stack([series[(dt, n)].values for dt in dates])
        obj.mean_, obj.std_ = stack("mean"), stack("std")
        obj.percentile_ = {_parse_pct(n, None): stack(n) for n in names if n.startswith("p")}
        return obj


def _pct_name(q):
    return f"p{float(q):.17g}"


def _parse_pct(name, available):
    if not name.startswith("p"):
        raise KeyError(name)
    q = float(name[1:])
    if available is None:
        return q
    key = min(available, key=lambda k: abs(k - q))
    if abs(key - q) > 1e-5:
        raise KeyError(name)
    return key


def build_climatology(hindcast, percentiles=DEFAULT_PERCENTILES):
    return Climatology(percentiles).fit(hindcast)


def anomaly(x, clim, init_date, init_time=None):
    """Subtract the (init_date, lead) climatological mean from a series.

    Series times are lead days unless ``init_time`` is given, in which case
    lead = time - init_time.
    """
    offset = 0 if init_time is None else int(init_time)
    leads = x.times - offset
    means = clim.stat("mean", init_date, leads)
    return x.with_values(x.values - means)


def lead_window_mean(x, first, last):
    """Mean of lead days ``first..last`` (inclusive) of a lead-indexed series."""
    want = np.arange(first, last + 1)
    idx = [np.flatnonzero(x.times == d) for d in want]
    if any(i.size == 0 for i in idx):
        raise ValueError(f"incomplete window: days {first}-{last} not all present")
    sel = np.array([int(i[0]) for i in idx])
    vals = x.values[sel].mean(axis=0)
    return Field(x.grid, x.var, vals, x.mask[sel].all(axis=0), x.level, int(first))


def weekly_mean(x, week):
    """Mean over lead days 7(w-1)+1 .. 7w."""
    if week < 1:
        raise ValueError("weeks are numbered from 1")
    return lead_window_mean(x, 7 * (week - 1) + 1, 7 * week)


def weekly_means(values, n_weeks, axis=0):
    """Array helper: weekly means of a daily lead axis starting at lead 1."""
    values = np.moveaxis(np.asarray(values), axis, 0)
    if values.shape[0] < 7 * n_weeks:
        raise ValueError("incomplete week")
    out = values[:7 * n_weeks].reshape((n_weeks, 7) + values.shape[1:]).mean(axis=1)
    return np.moveaxis(out, 0, axis)


# -- detrending --------------------------------------------------------------

class LinearTrend(BaseEstimator):
    """Pointwise ordinary least-squares trend of values against year."""

    def fit(self, years, values):
        years = np.asarray(years, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if years.size < 3:
            raise ValueError("insufficient trend sample")
        if values.shape[0] != years.size:
            raise ValueError("values must have one leading entry per year")
        ym = years.mean()
        dy = years - ym
        vm = values.mean(axis=0)
        dv = values - vm
        self.slope_ = np.tensordot(dy, dv, axes=(0, 0)) / np.dot(dy, dy)
        self.intercept_ = vm - self.slope_ * ym
        return self

    def predict(self, years):
        years = np.asarray(years, dtype=np.float64)
        if not hasattr(self, "slope_"):
            raise NotFittedError("LinearTrend is not fitted")
        return np.multiply.outer(years, self.slope_) + self.intercept_

    def transform(self, years, values):
        return np.asarray(values, dtype=np.float64) - self.predict(years)


def detrend(pred_hind, obs_hind, years, test_year, pred_test, obs_test):
    """Remove separate linear trends from test-year prediction and observation.

    Trends are fitted over the hindcast years and extrapolated to
    ``test_year``. Returns ``(pred_detrended, obs_detrended)``.
    """
    tp = LinearTrend().fit(years, pred_hind)
    to = LinearTrend().fit(years, obs_hind)
    return (np.asarray(pred_test) - tp.predict(test_year),
            np.asarray(obs_test) - to.predict(test_year))


# -- standardised box anomaly ------------------------------------------------

def box_mask(grid, box):
    """Boolean mask of points inside ``(lat_min, lat_max, lon_min, lon_max)``.

    Longitudes are taken modulo 360; ``lon_min > lon_max`` wraps across 0.
    """
    la0, la1, lo0, lo1 = box
    lo0, lo1 = lo0 % 360.0, lo1 % 360.0
    lat_in = (grid.lats >= min(la0, la1)) & (grid.lats <= max(la0, la1))
    lons = grid.lons
    lon_in = (lons >= lo0) & (lons <= lo1) if lo0 <= lo1 else (lons >= lo0) | (lons <= lo1)
    return lat_in[:, None] & lon_in[None, :]


def standardized_box_anomaly(x, clim, init_date, box, days):
    """Latitude-weighted box mean of anomaly / interannual std, averaged over lead days.

    ``x`` is a lead-indexed anomaly series; ``days`` is ``(first, last)``.
    """
    first, last = days
    window = [d for d in range(first, last + 1)]
    if any(d not in x for d in window):
        raise ValueError("window not covered by series")
    inside = box_mask(x.grid, box)
    if not inside.any():
        raise ValueError("box does not intersect grid")
    w = np.broadcast_to(lat_weights(x.grid.lats)[:, None], x.grid.shape)
    out = []
    for d in window:
        sd = clim.std_field(init_date, d).values
        ok = inside & (sd > 0)
        if (inside & ~(sd > 0)).sum() > 0.5 * inside.sum():
            raise ValueError("degenerate variance")
        f = x[d]
        ok &= f.mask
        out.append(np.sum(w[ok] * f.values[ok] / sd[ok]) / np.sum(w[ok]))
    return float(np.mean(out))
