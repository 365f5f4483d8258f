"""Coupled-versus-ablated skill experiment on the toy truth.

For each training seed a coupled model and an ablated model (coupling
frozen at zero during training and disabled at forecast time) are fitted on
the same truth, then both forecast every test initialisation. The score is
the latitude-weighted RMSE of weekly-mean atmospheric fields, each variable
divided by its training standard deviation, averaged over variables and
the chosen lead weeks.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import csm, toytruth, train
from .climatology import weekly_means
from .gridfield import lat_weights

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    h_c: float = 1.0
    seeds: tuple = (0, 1, 2, 3, 4)
    years: int = 9
    train_years: int = 8
    inits_per_year: int = 52
    horizon: int = 60
    data_seed: int = 100
    lead_weeks: tuple = (2, 3, 4, 5, 6)
    members: int = 4
    model: dict = field(default_factory=lambda: dict(
        d_model=24, n_heads=4, blocks_per_stack=4, coupling_every=2, members=4))
    train: dict = field(default_factory=dict)


@dataclass
class ArmResult:
    scores: list

    @property
    def median(self):
        return float(np.median(self.scores))

    @property
    def iqr(self):
        return tuple(float(q) for q in np.percentile(self.scores, [25, 75]))


@dataclass
class ExperimentResult:
    h_c: float
    coupled: ArmResult
    ablated: ArmResult
    seconds: float

    def coupled_better(self):
        return self.coupled.median < self.ablated.median

    def iqr_overlap(self):
        (a0, a1), (b0, b1) = self.coupled.iqr, self.ablated.iqr
        return a0 <= b1 and b0 <= a1


def atmospheric_rmse(forecast, truth, lats, std, weeks):
    """Score ``(B, days, C, H, W)`` forecasts against matching truth."""
    n_weeks = max(weeks)
    fw = weekly_means(forecast, n_weeks, axis=1)
    tw = weekly_means(truth, n_weeks, axis=1)
    w = lat_weights(lats)
    w = w / w.mean()
    sel = [k - 1 for k in weeks]
    err = (fw[:, sel] - tw[:, sel]) ** 2 * w[None, None, None, :, None]
    per = np.sqrt(err.mean(axis=(0, 3, 4))) / std[None, :]
    return float(per.mean())


def _stack_inits(ds, inits):
    parts = [ds.step_input(y, d) for y, d in inits]
    return csm.StepInput(*[np.concatenate([getattr(p, k) for p in parts])
                           for k in ("a_prev", "a_cur", "o_prev", "o_cur")])


def run_experiment(cfg=None, h_c=None):
    cfg = cfg or ExperimentConfig()
    h_c = cfg.h_c if h_c is None else h_c
    t0 = time.time()
    toy = toytruth.ToyConfig(h_c=h_c)
    ds = toytruth.emit_dataset(toy, cfg.years, cfg.inits_per_year, cfg.horizon, seed=cfg.data_seed)
    end = ds.index(cfg.train_years - 1, toy.year_length - 1) + 1
    data = train.TrainingData(ds.atm[:end], ds.ocn[:end], np.array(toy.lats))
    std = data.atm.std(axis=(0, 2, 3))
    inits = [(y, d) for y, d in ds.inits if y >= cfg.train_years]
    init = _stack_inits(ds, inits)
    truth = np.stack([ds.verifying(y, d)[0] for y, d in inits])
    mcfg = csm.CsmConfig(nlat=len(toy.lats), nlon=toy.nlon, **cfg.model)
    # full-horizon rollouts; only the chosen lead weeks are scored
    n_steps = cfg.horizon
    scores = {True: [], False: []}
    for seed in cfg.seeds:
        for ablate in (False, True):
            params = csm.init_params(mcfg, seed, norm=data.normalisation())
            tcfg = train.TrainConfig(**{**cfg.train, "seed": seed, "freeze_coupling": ablate})
            params, _ = train.fit(params, mcfg, data, tcfg)
            fa, _ = csm.batch_forecast(params, mcfg, init, cfg.members, 1000 * seed, n_steps,
                                       coupled=not ablate)
            s = atmospheric_rmse(fa, truth, toy.lats, std, cfg.lead_weeks)
            scores[ablate].append(s)
            log.info("h_c=%g seed=%d %s rmse=%.4f (%.0fs)", h_c, seed,
                     "ablated" if ablate else "coupled", s, time.time() - t0)
    return ExperimentResult(h_c, ArmResult(scores[False]), ArmResult(scores[True]), time.time() - t0)
