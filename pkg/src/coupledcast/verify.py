"""Deterministic, probabilistic and extreme-event verification on gridded anomalies.

All per-point statistics reduce over the leading initialisation axis of
``(N, nlat, nlon)`` arrays, so every grid point is independent and the
results do not depend on evaluation order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .gridfield import Field, FieldSeries, GridSpec, lat_weights

METRICS = ("TCC", "RMSE", "RPSS", "BSS", "COR")


@dataclass
class MetricMap:
    grid: GridSpec
    lead_week: int
    metric: str
    values: np.ndarray
    mask: np.ndarray = None
    variable: str = ""

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(self.values.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.grid.shape or self.mask.shape != self.grid.shape:
            raise ValueError("metric map does not match its grid")
        self.values = np.where(self.mask, self.values, 0.0)

    def global_mean(self):
        w = np.broadcast_to(lat_weights(self.grid.lats)[:, None], self.grid.shape)
        if not self.mask.any():
            raise ValueError("empty field")
        return float(np.sum(w[self.mask] * self.values[self.mask]) / np.sum(w[self.mask]))

    def to_series(self, var):
        """Single-time GFB-ready series carrying metric metadata."""
        return FieldSeries(self.grid, var, [self.lead_week], self.values[None], self.mask[None],
                           meta={"metric": self.metric, "lead_week": str(self.lead_week)})


@dataclass
class MatchedSample:
    """N paired prediction/observation anomaly maps at one lead week."""

    grid: GridSpec
    pred: np.ndarray
    obs: np.ndarray
    lead_week: int = 1
    variable: str = ""

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.pred.shape != self.obs.shape or self.pred.shape[1:] != self.grid.shape:
            raise ValueError("prediction and observation stacks must match the grid")

    @property
    def n(self):
        return self.pred.shape[0]


@dataclass
class CategoryProbs:
    """Probabilities ``(K, ...)`` of K ordered categories at every point."""

    probs: np.ndarray
    atol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < -self.atol) or not np.allclose(self.probs.sum(axis=0), 1.0,
                                                             rtol=0, atol=self.atol):
            raise ValueError("category probabilities must be non-negative and sum to 1")

    @property
    def k(self):
        return self.probs.shape[0]


def _pearson(x, y):
    """Pointwise correlation over axis 0; zero-variance points come back masked."""
    dx = x - x.mean(axis=0)
    dy = y - y.mean(axis=0)
    sxx = np.sum(dx * dx, axis=0)
    syy = np.sum(dy * dy, axis=0)
    ok = (sxx > 0) & (syy > 0)
    den = np.sqrt(np.where(ok, sxx, 1.0)) * np.sqrt(np.where(ok, syy, 1.0))
    r = np.clip(np.sum(dx * dy, axis=0) / den, -1.0, 1.0)
    return np.where(ok, r, 0.0), ok


def tcc(sample):
    """Temporal anomaly correlation across initialisations at each point."""
    if sample.n < 2:
        raise ValueError("TCC needs at least 2 initialisations")
    r, ok = _pearson(sample.pred, sample.obs)
    return MetricMap(sample.grid, sample.lead_week, "TCC", r, ok, sample.variable)


def rmse(sample):
    if sample.n < 1:
        raise ValueError("RMSE needs at least 1 initialisation")
    err = sample.pred - sample.obs
    return MetricMap(sample.grid, sample.lead_week, "RMSE", np.sqrt(np.mean(err * err, axis=0)),
                     None, sample.variable)


# -- categorical probabilities ----------------------------------------------

def categorize(values, thresholds):
    """Category index per value: number of thresholds strictly below it.

    A value equal to a boundary falls into the lower category.
    """
    values = np.asarray(values, dtype=np.float64)
    cat = np.zeros(values.shape, dtype=np.int64)
    for t in thresholds:
        cat += values > np.asarray(t)
    return cat


def _check_thresholds(thresholds):
    for lo, hi in zip(thresholds, thresholds[1:]):
        if np.any(np.asarray(lo) > np.asarray(hi)):
            raise ValueError("thresholds must be pointwise ordered")


def category_probs(ensemble, thresholds):
    """Member fractions in each of ``len(thresholds) + 1`` categories.

    ``ensemble`` is ``(M, ...)``.
    """
    ensemble = np.asarray(ensemble, dtype=np.float64)
    if ensemble.shape[0] < 2:
        raise ValueError("ensemble needs at least 2 members")
    _check_thresholds(thresholds)
    cat = categorize(ensemble, thresholds)
    k = len(thresholds) + 1
    return CategoryProbs(np.stack([(cat == i).mean(axis=0) for i in range(k)]))


def observed_probs(obs, thresholds):
    """One-hot category of the observation."""
    _check_thresholds(thresholds)
    cat = categorize(obs, thresholds)
    k = len(thresholds) + 1
    return CategoryProbs(np.stack([(cat == i).astype(np.float64) for i in range(k)]))


def climatological_probs(k, shape):
    """Reference probabilities: equal terciles for K=3, (0.9, 0.1) for the K=2 extreme."""
    if k == 3:
        p = (1 / 3, 1 / 3, 1 / 3)
    elif k == 2:
        p = (0.9, 0.1)
    else:
        p = (1.0 / k,) * k
    return CategoryProbs(np.stack([np.full(shape, v) for v in p]))


def rps(f, o):
    """Ranked probability score per point (unnormalised sum over K categories)."""
    if f.k != o.k:
        raise ValueError("forecast and observation must have the same number of categories")
    cf = np.cumsum(f.probs, axis=0)
    co = np.cumsum(o.probs, axis=0)
    return np.sum((cf - co) ** 2, axis=0)


def _skill_score(score_f, score_ref, grid, lead_week, metric, variable):
    """1 - <score_f>/<score_ref>, averaging over initialisations first."""
    mf = np.mean(score_f, axis=0)
    mr = np.mean(score_ref, axis=0)
    ok = mr > 0
    val = np.where(ok, 1.0 - mf / np.where(ok, mr, 1.0), 0.0)
    return MetricMap(grid, lead_week, metric, val, ok, variable)


def rpss(forecasts, observations, grid, lead_week=1, climatology=None, variable=""):
    """RPSS from per-initialisation CategoryProbs sequences."""
    if len(forecasts) != len(observations) or not forecasts:
        raise ValueError("need matching, non-empty forecast and observation sequences")
    k = forecasts[0].k
    clim = climatology or climatological_probs(k, grid.shape)
    rf = np.stack([rps(f, o) for f, o in zip(forecasts, observations)])
    rc = np.stack([rps(clim, o) for o in observations])
    return _skill_score(rf, rc, grid, lead_week, "RPSS", variable)


def brier(p_forecast, outcome):
    """Squared difference of exceedance probability and the 0/1 outcome."""
    return (np.asarray(p_forecast, dtype=np.float64) - np.asarray(outcome, dtype=np.float64)) ** 2


def bss(p_forecast, outcomes, grid, lead_week=1, clim_rate=0.1, variable=""):
    """Brier skill score; ``p_forecast``/``outcomes`` are ``(N, nlat, nlon)``."""
    p_forecast = np.asarray(p_forecast, dtype=np.float64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if p_forecast.shape != outcomes.shape:
        raise ValueError("forecast probabilities and outcomes must align")
    if np.any((p_forecast < 0) | (p_forecast > 1)) or np.any((outcomes != 0) & (outcomes != 1)):
        raise ValueError("probabilities must lie in [0, 1] and outcomes be 0/1")
    bf = brier(p_forecast, outcomes)
    bc = brier(np.full(outcomes.shape, clim_rate), outcomes)
    return _skill_score(bf, bc, grid, lead_week, "BSS", variable)


def exceedance_probs(ensemble, threshold):
    """Fraction of members strictly above ``threshold`` (ties count as below)."""
    return category_probs(ensemble, [threshold]).probs[1]


def skill_difference(a, b):
    if a.metric != b.metric or a.lead_week != b.lead_week or a.grid != b.grid:
        raise ValueError("metric maps differ in metric, lead or grid")
    mask = a.mask & b.mask
    return MetricMap(a.grid, a.lead_week, a.metric, np.where(mask, a.values - b.values, 0.0),
                     mask, a.variable)


COUPLING_PAIRS = (("SM100", "TP"), ("SM100", "T2M"), ("SM100", "MSL"), ("SSH", "MSL"),
                  ("MLT", "MSL"), ("SIC", "T2M"), ("SIC", "MSL"))


def coupling_correlation(x, y, grid=None, alpha=0.05, lead_week=0):
    """Concurrent correlation map of two anomaly stacks and its significance.

    Significance is a two-sided Student t test with N - 2 degrees of
    freedom. Returns ``(MetricMap, significant)``.
    """
    if isinstance(x, FieldSeries):
        grid = x.grid
        x, y = x.values, y.values
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("coupled fields must align")
    n = x.shape[0]
    if n < 4:
        raise ValueError("insufficient samples")
    r, ok = _pearson(x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = r * np.sqrt((n - 2) / np.maximum(1.0 - r * r, 0.0))
    p = 2.0 * stats.t.sf(np.abs(t), df=n - 2)
    sig = ok & (p < alpha)
    grid = grid or GridSpec(np.linspace(-80, 80, x.shape[1]), np.linspace(0, 359, x.shape[2]))
    return MetricMap(grid, lead_week, "COR", r, ok), sig


def global_skill_curve(maps):
    """Latitude-weighted global mean of each weekly map: ``[(week, value)]``."""
    return [(m.lead_week, m.global_mean()) for m in sorted(maps, key=lambda m: m.lead_week)]


def write_skill_csv(path, rows):
    """Rows of ``(metric, variable, lead_week, value)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "variable", "lead_week", "value"])
        for metric, var, week, value in rows:
            w.writerow([metric, var, int(week), repr(float(value))])
