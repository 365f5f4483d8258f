"""Fitting the coupled emulator: weighted MSE + KL loss, Adam, rollout curriculum."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import csm
from . import tensorad as ta
from .gridfield import lat_weights

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    single_step_iters: int = 800
    finetune_iters: int = 200
    curriculum: tuple = (2, 4)
    pushforward_max: int = 30
    kl_weight: float = 1e-3
    grad_clip: float = 1.0
    final_lr_fraction: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    freeze_coupling: bool = False

    def __post_init__(self):
        self.curriculum = tuple(int(x) for x in self.curriculum)
        if min(self.lr, self.beta1, self.beta2, self.adam_eps) < 0 or self.batch_size < 1:
            raise ValueError("rates must be non-negative and batch_size positive")
        if self.pushforward_max < 0:
            raise ValueError("pushforward_max must be non-negative")
        if any(b < a for a, b in zip(self.curriculum, self.curriculum[1:])):
            raise ValueError("curriculum lengths must be non-decreasing")


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``params`` holds the last good parameters."""

    def __init__(self, step, params):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.params = params


class Adam:
    """Adaptive-moment gradient descent over a dict of Tensors."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1**self.t)
            vhat = self.v[k] / (1 - b2**self.t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def gaussian_kl(mu, log_sigma):
    """Mean over coordinates of KL(N(mu, sigma^2) || N(0, 1))."""
    ones = ta.tensor(np.ones(mu.shape))
    terms = ta.square(mu) + ta.exp(ta.scale(log_sigma, 2.0)) - ones - ta.scale(log_sigma, 2.0)
    return ta.scale(ta.mean(terms), 0.5)


def weighted_mse(pred, target, std, lats):
    """cos(lat)-weighted MSE per variable (normalised by ``std``), summed over variables.

    ``pred``/``target`` are (B, C, H, W); ``target`` may be an array.
    """
    target = target if isinstance(target, ta.Tensor) else ta.tensor(target)
    b, c, h, w = pred.shape
    wlat = lat_weights(lats)
    wlat = wlat / wlat.mean()
    scale = wlat[None, None, :, None] / (np.asarray(std).reshape(1, c, 1, 1) ** 2)
    err = ta.square(pred - target)
    return ta.scale(ta.total(ta.mul(err, ta.tensor(np.broadcast_to(scale, pred.shape)))), 1.0 / (b * h * w))


def loss(pred, target, mu, log_sigma, beta, std=None, lats=None):
    """Weighted MSE plus ``beta`` times the perturbation KL.

    ``pred``/``target``/``std`` may be sequences (one entry per sphere); so
    may ``mu``/``log_sigma``, whose KL terms are averaged.
    Returns ``(total, mse, kl)`` Tensors.
    """
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    targets = target if isinstance(target, (list, tuple)) else [target]
    stds = std if isinstance(std, (list, tuple)) else [std]
    if len(preds) != len(targets):
        raise ValueError("pred and target lists differ in length")
    parts = []
    for p, t, s in zip(preds, targets, stds):
        if p.shape != np.shape(t if not isinstance(t, ta.Tensor) else t.data):
            raise ta.ShapeError(f"loss: prediction {p.shape} vs target {np.shape(t)}")
        s = np.ones(p.shape[1]) if s is None else s
        la = np.zeros(p.shape[2]) if lats is None else lats
        parts.append(weighted_mse(p, t, s, la))
    mse = parts[0]
    for p in parts[1:]:
        mse = mse + p
    mus = mu if isinstance(mu, (list, tuple)) else [mu]
    lss = log_sigma if isinstance(log_sigma, (list, tuple)) else [log_sigma]
    kl = gaussian_kl(mus[0], lss[0])
    for m, s in zip(mus[1:], lss[1:]):
        kl = kl + gaussian_kl(m, s)
    kl = ta.scale(kl, 1.0 / len(mus))
    return mse + ta.scale(kl, beta), mse, kl


# -- data --------------------------------------------------------------------

@dataclass
class TrainingData:
    """Contiguous daily planes ``(T, C, H, W)`` for each sphere."""

    atm: np.ndarray
    ocn: np.ndarray
    lats: np.ndarray

    def __post_init__(self):
        if len(self.atm) != len(self.ocn) or len(self.atm) < 3:
            raise ValueError("training data needs at least 3 aligned days")

    def normalisation(self):
        """Per-variable (mean, std) of each sphere."""
        out = {}
        for name, arr in (("atm", self.atm), ("ocn", self.ocn)):
            mu = arr.mean(axis=(0, 2, 3))
            sd = arr.std(axis=(0, 2, 3))
            out[name] = (mu, np.where(sd > 0, sd, 1.0))
        return out

    def batch(self, starts, length):
        """Inputs at ``starts`` plus ``length`` target days each."""
        s = np.asarray(starts)
        inp = csm.StepInput(self.atm[s - 1], self.atm[s], self.ocn[s - 1], self.ocn[s])
        ta_ = np.stack([self.atm[s + k] for k in range(1, length + 1)])
        to_ = np.stack([self.ocn[s + k] for k in range(1, length + 1)])
        return inp, ta_, to_


def rollout_loss(params, cfg, data, starts, length, rng, kl_weight, sample_eps, coupled,
                 warmup=0):
    """Mean loss over an autoregressive rollout of ``length`` steps.

    With ``warmup > 0`` the model first runs that many steps without
    gradient tracking from the true initial state, and the scored rollout
    starts from its own forecast, so training sees the states it visits
    during long forecasts.
    """
    inp, tgt_a, tgt_o = data.batch(starts, warmup + length)
    b = len(starts)
    shape = cfg.token_shape(b)
    first_eps = sample_eps
    if warmup:
        eps = [(rng.standard_normal(shape), rng.standard_normal(shape)) if sample_eps
               and (k == 0 or cfg.resample_perturbation) else (np.zeros(shape), np.zeros(shape))
               for k in range(warmup)]
        atm, ocn = csm.rollout(params.detached(), cfg, inp, warmup, eps, coupled=coupled)
        prev_a = inp.a_cur if warmup == 1 else atm[-2]
        prev_o = inp.o_cur if warmup == 1 else ocn[-2]
        inp = csm.StepInput(prev_a, atm[-1], prev_o, ocn[-1])
        tgt_a, tgt_o = tgt_a[warmup:], tgt_o[warmup:]
        first_eps = False
    a_prev, a_cur = ta.tensor(inp.a_prev), ta.tensor(inp.a_cur)
    o_prev, o_cur = ta.tensor(inp.o_prev), ta.tensor(inp.o_cur)
    std_a = params["buffer.atm.std"].data
    std_o = params["buffer.ocn.std"].data
    total = mse = kl = None
    for k in range(length):
        if (first_eps and k == 0) or (sample_eps and cfg.resample_perturbation):
            eps_a, eps_o = rng.standard_normal(shape), rng.standard_normal(shape)
        else:
            eps_a = eps_o = np.zeros(shape)
        out = csm.step(params, cfg, None, eps_a, eps_o, coupled=coupled,
                       inputs=(a_prev, a_cur, o_prev, o_cur))
        st = out.stats
        t, m, q = loss([out.a_next, out.o_next], [tgt_a[k], tgt_o[k]],
                       [st["mu_atm"], st["mu_ocn"]], [st["log_sigma_atm"], st["log_sigma_ocn"]],
                       kl_weight, [std_a, std_o], data.lats)
        total = t if total is None else total + t
        mse = m if mse is None else mse + m
        kl = q if kl is None else kl + q
        a_prev, a_cur, o_prev, o_cur = a_cur, out.a_next, o_cur, out.o_next
    inv = 1.0 / length
    return ta.scale(total, inv), mse.data.item() * inv, kl.data.item() * inv


def _grads(params, names):
    return {k: params[k].grad for k in names if params[k].grad is not None}


def _clip(grads, max_norm):
    if not max_norm:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def fit(params, cfg, data, tcfg, checkpoint_dir=None):
    """Train ``params`` in place; returns ``(params, trace)``.

    Phase 1 fits single steps with zero noise; phase 2 fine-tunes on
    autoregressive rollouts of the curriculum lengths with sampled noise,
    each starting after a random free-running warm-up of up to
    ``pushforward_max`` untracked model steps.
    """
    rng = np.random.default_rng(tcfg.seed)
    coupled = not tcfg.freeze_coupling
    if tcfg.freeze_coupling:
        params.zero_coupling()
    names = [k for k in params.trainable()
             if coupled or not k.startswith("couple.")]
    opt = Adam({k: params[k] for k in names}, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    total_iters = tcfg.single_step_iters + tcfg.finetune_iters
    stages = list(tcfg.curriculum) or [1]
    per_stage = max(1, tcfg.finetune_iters // len(stages)) if tcfg.finetune_iters else 0
    trace = []
    last_good = params.arrays()
    n = len(data.atm)
    # short datasets cap the free-running warm-up
    pf = max(0, min(tcfg.pushforward_max, n - 3 - max([1] + stages)))
    max_len = max([1] + stages) + pf
    for it in range(total_iters):
        if it < tcfg.single_step_iters:
            phase, length, sample = 1, 1, False
        else:
            j = min((it - tcfg.single_step_iters) // per_stage, len(stages) - 1)
            phase, length, sample = 2, stages[j], True
        warmup = int(rng.integers(0, pf + 1)) if phase == 2 and pf else 0
        starts = rng.integers(1, n - max_len, size=tcfg.batch_size)
        for k in names:
            params[k].grad = None
        total, mse, kl = rollout_loss(params, cfg, data, starts, length, rng,
                                      tcfg.kl_weight, sample, coupled, warmup)
        value = total.data.item()
        if not np.isfinite(value):
            raise TrainingDiverged(it, csm.CsmParams.from_arrays(last_good))
        total.backward()
        frac = it / max(1, total_iters - 1)
        lr = tcfg.lr * (tcfg.final_lr_fraction + (1 - tcfg.final_lr_fraction)
                        * 0.5 * (1 + np.cos(np.pi * frac)))
        opt.step(_clip(_grads(params, names), tcfg.grad_clip), lr=lr)
        last_good = params.arrays()
        trace.append({"step": it, "phase": phase, "loss": value, "mse": mse, "kl": kl})
        if checkpoint_dir and tcfg.checkpoint_every and (it + 1) % tcfg.checkpoint_every == 0:
            save_params(Path(checkpoint_dir) / f"step{it + 1:06d}.ckpt", params)
        if it % 100 == 0:
            log.info("step %d phase %d loss %.5f", it, phase, value)
    if checkpoint_dir:
        save_params(Path(checkpoint_dir) / "final.ckpt", params)
    return params, trace


def save_params(path, params):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ta.save_checkpoint(path, {k: params[k].data for k in sorted(params)})


def load_params(path):
    return csm.CsmParams.from_arrays(ta.load_checkpoint(path))


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "phase", "loss", "mse", "kl"])
        for r in trace:
            w.writerow([r["step"], r["phase"], repr(r["loss"]), repr(r["mse"]), repr(r["kl"])])
