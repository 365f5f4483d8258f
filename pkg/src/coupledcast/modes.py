"""EOF decomposition, RMM (MJO) and NAO indices, and index skill versus lead."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .climatology import box_mask
from .gridfield import FieldSeries, GridSpec, lat_weights, read_gfb, write_gfb

RMM_BAND = 15.0
NAO_BOX = (20.0, 80.0, -90.0, 40.0)


@dataclass(frozen=True)
class EofBasis:
    """Weighted-orthonormal spatial patterns ``(n_modes, D)``.

    ``grid``/``layout`` optionally place the D state elements on a grid
    (row-major over the True points of ``layout``) for persistence.
    """

    modes: np.ndarray
    explained_variance: np.ndarray
    weights: np.ndarray
    grid: GridSpec = None
    layout: np.ndarray = None
    var: str = "OLR"

    @property
    def n_modes(self):
        return self.modes.shape[0]

    def project(self, x):
        """Principal components of ``(T, D)`` states, without centering."""
        return np.asarray(x, dtype=np.float64) @ (self.modes * self.weights).T

    def save(self, directory, stem="eof"):
        if self.grid is None:
            raise ValueError("basis has no grid layout to persist")
        os.makedirs(directory, exist_ok=True)
        layout = np.ones(self.grid.shape, bool) if self.layout is None else self.layout
        vals = np.zeros((self.n_modes,) + self.grid.shape)
        vals[:, layout] = self.modes
        wts = np.zeros(self.grid.shape)
        wts[layout] = self.weights
        mask = np.broadcast_to(layout, vals.shape)
        write_gfb(os.path.join(directory, f"{stem}_patterns.gfb"),
                  FieldSeries(self.grid, self.var, np.arange(self.n_modes), vals, mask,
                              meta={"kind": "eof"}))
        write_gfb(os.path.join(directory, f"{stem}_weights.gfb"),
                  FieldSeries(self.grid, self.var, [0], wts[None], layout[None]))
        with open(os.path.join(directory, f"{stem}_variance.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["mode", "explained_variance"])
            for k, v in enumerate(self.explained_variance):
                w.writerow([k + 1, repr(float(v))])

    @classmethod
    def load(cls, directory, stem="eof"):
        pats = read_gfb(os.path.join(directory, f"{stem}_patterns.gfb"))
        wts = read_gfb(os.path.join(directory, f"{stem}_weights.gfb"))
        layout = wts.mask[0]
        with open(os.path.join(directory, f"{stem}_variance.csv"), newline="") as fh:
            ev = np.array([float(r["explained_variance"]) for r in csv.DictReader(fh)])
        return cls(pats.values[:, layout], ev, wts.values[0][layout], pats.grid, layout,
                   pats.var.name)


class Eof(TransformerMixin, BaseEstimator):
    """Leading EOFs of a ``(samples, D)`` matrix under positive state weights.

    Parameters
    ----------
    n_modes : int
    weights : array-like of shape (D,), optional
        Defaults to uniform weights.
    rtol : float
        Singular values below ``rtol * s_max`` count as rank deficient.
    """

    def __init__(self, n_modes=2, weights=None, rtol=1e-10):
        self.n_modes = n_modes
        self.weights = weights
        self.rtol = rtol

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[0] < 2:
            raise ValueError("EOF needs at least 2 samples")
        w = np.ones(X.shape[1]) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (X.shape[1],) or np.any(w <= 0):
            raise ValueError("weights must be positive, one per state element")
        self.mean_ = X.mean(axis=0)
        sw = np.sqrt(w)
        _, s, vt = np.linalg.svd((X - self.mean_) * sw, full_matrices=False)
        rank = int(np.sum(s > self.rtol * s[0])) if s.size and s[0] > 0 else 0
        if self.n_modes > rank:
            raise ValueError(f"n_modes={self.n_modes} exceeds data rank {rank}")
        modes = vt[: self.n_modes] / sw
        # sign: largest absolute loading positive
        idx = np.argmax(np.abs(modes), axis=1)
        modes *= np.sign(modes[np.arange(self.n_modes), idx])[:, None]
        var = s * s
        self.components_ = modes
        self.explained_variance_ratio_ = var[: self.n_modes] / var.sum()
        self.weights_ = w
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ (self.components_ * self.weights_).T

    def inverse_transform(self, pcs):
        check_is_fitted(self, "components_")
        return np.asarray(pcs) @ self.components_ + self.mean_

    def basis(self, grid=None, layout=None, var="OLR"):
        check_is_fitted(self, "components_")
        return EofBasis(self.components_.copy(), self.explained_variance_ratio_.copy(),
                        self.weights_.copy(), grid, layout, var)


def eof(data, n_modes, weights=None):
    """Fit and return an :class:`EofBasis`."""
    return Eof(n_modes, weights).fit(data).basis()


# -- RMM ----------------------------------------------------------------------

def tropical_profile(series, band=RMM_BAND):
    """Latitude-weighted mean over ``|lat| <= band``: ``(T, nlon)``."""
    lats = series.grid.lats
    inside = np.abs(lats) <= band
    if lats.min() > -band or lats.max() < band or not inside.any():
        raise ValueError(f"grid does not cover the {band:g}S-{band:g}N band")
    w = lat_weights(lats[inside])[None, :, None] * series.mask[:, inside, :]
    v = np.where(series.mask[:, inside, :], series.values[:, inside, :], 0.0)
    tot = w.sum(axis=1)
    if np.any(tot == 0):
        raise ValueError("empty field")
    return (w * v).sum(axis=1) / tot


def _phase(angle_deg):
    return (np.floor(np.mod(angle_deg - 180.0, 360.0) / 45.0).astype(np.int64) + 1)


@dataclass
class RmmSeries:
    times: np.ndarray
    rmm1: np.ndarray
    rmm2: np.ndarray

    @property
    def amplitude(self):
        return np.hypot(self.rmm1, self.rmm2)

    @property
    def angle(self):
        """atan2(RMM2, RMM1) in degrees."""
        return np.degrees(np.arctan2(self.rmm2, self.rmm1))

    @property
    def phase(self):
        """Octants 1..8 of the angle, counted counterclockwise from 180 degrees."""
        return _phase(self.angle)

    def pairs(self):
        return np.stack([self.rmm1, self.rmm2], axis=-1)


class RmmIndex(BaseEstimator):
    """Combined OLR/U850/U200 EOF index fitted on hindcast-period anomalies."""

    def __init__(self, band=RMM_BAND):
        self.band = band

    def _state(self, olr, u850, u200):
        profs = [tropical_profile(s, self.band) for s in (olr, u850, u200)]
        return profs

    def fit(self, olr, u850, u200):
        profs = self._state(olr, u850, u200)
        self.var_std_ = np.array([p.std() for p in profs])
        if np.any(self.var_std_ == 0):
            raise ValueError("degenerate variance")
        x = np.concatenate([p / s for p, s in zip(profs, self.var_std_)], axis=1)
        nlon = olr.grid.nlon
        grid = GridSpec([-1.0, 0.0, 1.0], olr.grid.lons)
        self.basis_ = Eof(2).fit(x).basis(grid, np.ones((3, nlon), bool), "OLR")
        self.pc_std_ = self.basis_.project(x).std(axis=0)
        return self

    def state(self, olr, u850, u200):
        check_is_fitted(self, "basis_")
        profs = self._state(olr, u850, u200)
        return np.concatenate([p / s for p, s in zip(profs, self.var_std_)], axis=1)

    def transform(self, olr, u850, u200):
        pcs = self.basis_.project(self.state(olr, u850, u200)) / self.pc_std_
        return RmmSeries(olr.times.copy(), pcs[:, 0], pcs[:, 1])


def rmm(olr, u850, u200, basis=None):
    """RMM series of anomaly series; fits the index on the same data if no fitted index is given."""
    index = basis if isinstance(basis, RmmIndex) else RmmIndex().fit(olr, u850, u200)
    return index.transform(olr, u850, u200)


def bivariate_cor(f, o):
    """Bivariate correlation of ``(N, 2)`` forecast and observed RMM pairs.

    Returns None (masked) when the denominator vanishes.
    """
    f = np.asarray(f, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if f.shape != o.shape or f.ndim != 2 or f.shape[1] != 2:
        raise ValueError("expected matching (N, 2) arrays")
    num = np.sum(o * f)
    den = np.sqrt(np.sum(o * o) * np.sum(f * f))
    if den == 0:
        return None
    return float(num / den)


def bivariate_cor_by_lead(f, o):
    """``f``, ``o`` of shape ``(N, L, 2)`` -> ``[(day, cor)]`` for days 1..L."""
    f = np.asarray(f, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    if f.shape[0] < 2:
        raise ValueError("need at least 2 initialisations")
    return [(t + 1, bivariate_cor(f[:, t], o[:, t])) for t in range(f.shape[1])]


def pearson_by_lead(f, o):
    """Correlation across initialisations per lead for ``(N, L)`` scalar indices."""
    f = np.asarray(f, dtype=np.float64)
    o = np.asarray(o, dtype=np.float64)
    out = []
    for t in range(f.shape[1]):
        a, b = f[:, t] - f[:, t].mean(), o[:, t] - o[:, t].mean()
        den = np.sqrt(np.sum(a * a) * np.sum(b * b))
        out.append((t + 1, None if den == 0 else float(np.sum(a * b) / den)))
    return out


# -- NAO ----------------------------------------------------------------------

class NaoIndex(BaseEstimator):
    """Leading EOF of latitude-weighted Z500 anomalies over the North Atlantic box.

    The index is the projection divided by its hindcast standard deviation.
    Hindcast anomalies are deviations from their own climatology, so the
    hindcast mean of the index is zero without a separate centering step.
    """

    def __init__(self, box=NAO_BOX):
        self.box = box

    def _points(self, series):
        inside = box_mask(series.grid, self.box)
        if inside.sum() < 2:
            raise ValueError("NAO domain not covered by the grid")
        if not series.mask[:, inside].all():
            raise ValueError("masked points inside the NAO domain")
        return inside, series.values[:, inside]

    def fit(self, z500):
        inside, x = self._points(z500)
        w = np.broadcast_to(lat_weights(z500.grid.lats)[:, None], z500.grid.shape)[inside]
        self.basis_ = Eof(1, w).fit(x).basis(z500.grid, inside, "Z500")
        self.std_ = float(self.basis_.project(x)[:, 0].std())
        if self.std_ == 0:
            raise ValueError("degenerate variance")
        return self

    def transform(self, z500):
        check_is_fitted(self, "basis_")
        _, x = self._points(z500)
        return self.basis_.project(x)[:, 0] / self.std_


def nao_index(z500, index=None):
    index = index if index is not None else NaoIndex().fit(z500)
    return index.transform(z500)


# -- skill horizon --------------------------------------------------------------

def skill_horizon(cor_by_lead, threshold=0.5):
    """Largest L with COR >= threshold at every lead up to L (first crossing).

    Masked (None) correlations count as below the threshold.
    """
    cor_by_lead = list(cor_by_lead)
    if not cor_by_lead:
        raise ValueError("empty COR series")
    days = [d for d, _ in cor_by_lead]
    if days != list(range(1, len(days) + 1)):
        raise ValueError("leads must run 1, 2, ... without gaps")
    horizon = 0
    for day, c in cor_by_lead:
        if c is None or c < threshold:
            break
        horizon = day
    return horizon


# -- fixtures and output -------------------------------------------------------

def eastward_wave(grid, n_days, period=40.0, amplitude=1.0, noise=0.0, seed=0):
    """Eastward-propagating zonal wavenumber-1 anomalies for OLR, U850 and U200.

    The winds lag and lead the convection by a quarter wavelength, as in a
    canonical MJO structure. Returns three :class:`FieldSeries`.
    """
    rng = np.random.default_rng(seed)
    lon = np.deg2rad(grid.lons)[None, None, :]
    t = np.arange(n_days, dtype=np.float64)[:, None, None]
    env = np.exp(-(grid.lats[None, :, None] / 20.0) ** 2)
    om = 2 * np.pi / period
    out = []
    for var, shift, sign in (("OLR", 0.0, 1.0), ("U850", np.pi / 2, 1.0), ("U200", np.pi / 2, -1.0)):
        v = sign * amplitude * env * np.cos(lon - om * t - shift)
        v = v + noise * rng.standard_normal(v.shape)
        out.append(FieldSeries(grid, var, np.arange(n_days), v))
    return tuple(out)


def write_rmm_csv(path, rows):
    """Rows of ``(init_date, lead_day, RmmSeries-like pair)`` as (rmm1, rmm2)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["init_date", "lead_day", "rmm1", "rmm2", "amplitude", "phase"])
        for init, lead, r1, r2 in rows:
            amp = float(np.hypot(r1, r2))
            ph = int(_phase(np.degrees(np.arctan2(r2, r1))))
            w.writerow([int(init), int(lead), repr(float(r1)), repr(float(r2)), repr(amp), ph])


def write_index_csv(path, rows):
    """Rows of ``(init_date, lead_day, value)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["init_date", "lead_day", "value"])
        for init, lead, v in rows:
            w.writerow([int(init), int(lead), repr(float(v))])
