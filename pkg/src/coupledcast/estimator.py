"""scikit-learn style wrapper around model construction, training and forecasting."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import csm, train


class CoupledForecaster(BaseEstimator):
    """Coupled (or ablated) ensemble emulator.

    Parameters
    ----------
    d_model, n_heads, blocks_per_stack, coupling_every, patch, members :
        Model shape, see :class:`coupledcast.csm.CsmConfig`.
    coupled : bool
        False trains with coupling frozen at zero and forecasts without it.
    train_params : dict, optional
        Extra :class:`coupledcast.train.TrainConfig` fields.
    random_state : int
    """

    def __init__(self, d_model=32, n_heads=4, blocks_per_stack=8, coupling_every=4, patch=2,
                 members=8, coupled=True, train_params=None, random_state=0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.blocks_per_stack = blocks_per_stack
        self.coupling_every = coupling_every
        self.patch = patch
        self.members = members
        self.coupled = coupled
        self.train_params = train_params
        self.random_state = random_state

    def _config(self, atm, ocn, atm_vars, ocn_vars):
        default = csm.CsmConfig()
        kw = {"atm_vars": tuple(atm_vars or default.atm_vars),
              "ocn_vars": tuple(ocn_vars or default.ocn_vars)}
        if len(kw["atm_vars"]) != atm.shape[1] or len(kw["ocn_vars"]) != ocn.shape[1]:
            raise ValueError("variable lists do not match the channel counts")
        return csm.CsmConfig(nlat=atm.shape[2], nlon=atm.shape[3], d_model=self.d_model,
                             n_heads=self.n_heads, blocks_per_stack=self.blocks_per_stack,
                             coupling_every=self.coupling_every, patch=self.patch,
                             members=self.members, **kw)

    def fit(self, atm, ocn, lats, atm_vars=None, ocn_vars=None):
        """Fit on contiguous daily planes ``(T, C, H, W)`` of both spheres."""
        atm = np.asarray(atm, dtype=np.float64)
        ocn = np.asarray(ocn, dtype=np.float64)
        if atm.ndim != 4 or ocn.ndim != 4 or atm.shape[0] != ocn.shape[0]:
            raise ValueError("expected aligned (T, C, H, W) arrays for both spheres")
        data = train.TrainingData(atm, ocn, np.asarray(lats, dtype=np.float64))
        self.config_ = self._config(atm, ocn, atm_vars, ocn_vars)
        params = csm.init_params(self.config_, self.random_state, norm=data.normalisation())
        tcfg = train.TrainConfig(**{**(self.train_params or {}), "seed": self.random_state,
                                    "freeze_coupling": not self.coupled})
        self.params_, self.trace_ = train.fit(params, self.config_, data, tcfg)
        return self

    def predict(self, init, n_steps=None, base_seed=0):
        """Ensemble-mean forecasts ``(B, n_steps, C, H, W)`` for each sphere."""
        check_is_fitted(self, "params_")
        n_steps = self.config_.rollout_days if n_steps is None else n_steps
        return csm.batch_forecast(self.params_, self.config_, init, self.members, base_seed,
                                  n_steps, coupled=self.coupled)

    def predict_ensemble(self, init, n_steps=None, base_seed=0):
        """Member-by-member forecast from a single initialisation."""
        check_is_fitted(self, "params_")
        return csm.ensemble_forecast(self.params_, self.config_, init, self.members, base_seed,
                                     n_steps, coupled=self.coupled)
