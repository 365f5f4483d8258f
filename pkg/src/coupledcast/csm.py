"""Coupled atmosphere-ocean transformer emulator.

Two sphere stacks (atmosphere+land, ocean+sea-ice) share one token layout.
Every ``coupling_every`` blocks a coupling block reads the concatenated
features of both stacks and adds its split output back to each of them. The
coupling output projection starts at exactly zero, so an untrained coupled
model is two independent sphere models.

All tensors carry a leading batch axis: planes are ``(B, C, H, W)`` and
tokens ``(B, N, d_model)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict

import numpy as np

from . import tensorad as ta

SPHERES = ("atm", "ocn")


class NumericalBlowUp(FloatingPointError):
    """A forecast step produced non-finite values."""

    def __init__(self, step):
        super().__init__(f"numerical blow-up at step {step}")
        self.step = step


@dataclass
class CsmConfig:
    nlat: int = 4
    nlon: int = 32
    atm_vars: tuple = ("T2M", "TP", "OLR", "MSL", "Z500", "U850", "U200", "SM100")
    ocn_vars: tuple = ("SSH", "T300", "MLT", "SIC")
    d_model: int = 32
    n_heads: int = 4
    blocks_per_stack: int = 8
    coupling_every: int = 4
    patch: int = 2
    ffn_mult: int = 2
    pert_hidden: int = 16
    members: int = 8
    rollout_days: int = 60
    resample_perturbation: bool = False

    def __post_init__(self):
        self.atm_vars = tuple(self.atm_vars)
        self.ocn_vars = tuple(self.ocn_vars)
        if self.blocks_per_stack % self.coupling_every:
            raise ValueError("blocks_per_stack must be divisible by coupling_every")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.nlat % self.patch or self.nlon % self.patch:
            raise ValueError("patch size must divide both grid dimensions")
        if not self.atm_vars or not self.ocn_vars:
            raise ValueError("each sphere needs at least one variable")

    @property
    def n_tokens(self):
        return (self.nlat // self.patch) * (self.nlon // self.patch)

    @property
    def n_coupling(self):
        return self.blocks_per_stack // self.coupling_every

    def sphere_vars(self, sphere):
        return self.atm_vars if sphere == "atm" else self.ocn_vars

    def token_shape(self, batch=1):
        return (batch, self.n_tokens, self.d_model)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class CsmParams(dict):
    """Name -> Tensor mapping of every learnable tensor plus normalisation buffers.

    Buffers live under the ``buffer.`` prefix and are never trained.
    """

    def trainable(self):
        return {k: v for k, v in self.items() if not k.startswith("buffer.")}

    def coupling_projection_names(self):
        return sorted(k for k in self if k.startswith("couple.") and ".proj." in k)

    def zero_coupling(self):
        """Reset every coupling output projection to zero (in place)."""
        for k in self.coupling_projection_names():
            self[k].data[...] = 0.0
        return self

    def arrays(self):
        return {k: v.data.copy() for k, v in self.items()}

    def copy(self):
        return CsmParams({k: ta.Tensor(v.data.copy(), requires_grad=v.requires_grad)
                          for k, v in self.items()})

    def detached(self):
        """View sharing the same arrays with gradient tracking off (inference only)."""
        return CsmParams({k: ta.Tensor(v.data) for k, v in self.items()})

    @classmethod
    def from_arrays(cls, arrays):
        return cls({k: ta.Tensor(np.array(v), requires_grad=not k.startswith("buffer."))
                    for k, v in arrays.items()})


@dataclass
class StepInput:
    """Two consecutive days of planes for each sphere, shaped (B, C, H, W)."""

    a_prev: np.ndarray
    a_cur: np.ndarray
    o_prev: np.ndarray
    o_cur: np.ndarray

    def __post_init__(self):
        for name in ("a_prev", "a_cur", "o_prev", "o_cur"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 3:
                arr = arr[None]
            if arr.ndim != 4:
                raise ValueError(f"{name} must be (B, C, H, W) or (C, H, W)")
            setattr(self, name, arr)
        if self.a_prev.shape != self.a_cur.shape or self.o_prev.shape != self.o_cur.shape:
            raise ValueError("both time levels of a sphere must share a shape")
        if self.a_cur.shape[0] != self.o_cur.shape[0] or self.a_cur.shape[2:] != self.o_cur.shape[2:]:
            raise ValueError("spheres must share batch size and grid")

    @property
    def batch(self):
        return self.a_cur.shape[0]

    def take(self, idx):
        return StepInput(self.a_prev[idx], self.a_cur[idx], self.o_prev[idx], self.o_cur[idx])


# -- initialisation ----------------------------------------------------------

def _dense(rng, n_in, n_out, gain=1.0):
    return rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in)


def _block_params(rng, prefix, d, ffn_mult, depth_gain):
    h = ffn_mult * d
    return {
        f"{prefix}.ln1.g": np.ones(d), f"{prefix}.ln1.b": np.zeros(d),
        f"{prefix}.qkv.W": _dense(rng, d, 3 * d), f"{prefix}.qkv.b": np.zeros(3 * d),
        f"{prefix}.out.W": _dense(rng, d, d, depth_gain), f"{prefix}.out.b": np.zeros(d),
        f"{prefix}.ln2.g": np.ones(d), f"{prefix}.ln2.b": np.zeros(d),
        f"{prefix}.ff1.W": _dense(rng, d, h), f"{prefix}.ff1.b": np.zeros(h),
        f"{prefix}.ff2.W": _dense(rng, h, d, depth_gain), f"{prefix}.ff2.b": np.zeros(d),
    }


def init_params(cfg: CsmConfig, seed=0, norm=None):
    """Deterministically initialise parameters.

    ``norm`` optionally maps ``"atm"``/``"ocn"`` to ``(mean, std)`` per-variable
    arrays used to normalise inputs; identity scaling otherwise.
    """
    rng = np.random.default_rng(seed)
    d, p = cfg.d_model, cfg.patch
    depth_gain = 1.0 / np.sqrt(2 * cfg.blocks_per_stack)
    arrays = {}
    for sphere in SPHERES:
        c = len(cfg.sphere_vars(sphere))
        n_in = 2 * c * p * p
        n_out = c * p * p
        if norm is not None and sphere in norm:
            mu, sd = (np.asarray(a, dtype=np.float64) for a in norm[sphere])
        else:
            mu, sd = np.zeros(c), np.ones(c)
        arrays[f"buffer.{sphere}.mean"] = mu.reshape(c)
        arrays[f"buffer.{sphere}.std"] = sd.reshape(c)
        arrays[f"{sphere}.enc.W"] = _dense(rng, n_in, d)
        arrays[f"{sphere}.enc.b"] = np.zeros(d)
        arrays[f"{sphere}.pos"] = 0.1 * rng.standard_normal((cfg.n_tokens, d))
        arrays[f"{sphere}.pert.W1"] = _dense(rng, d, cfg.pert_hidden)
        arrays[f"{sphere}.pert.b1"] = np.zeros(cfg.pert_hidden)
        arrays[f"{sphere}.pert.W2"] = _dense(rng, cfg.pert_hidden, 2 * d, 0.1)
        # log sigma starts well below zero: small initial spread
        arrays[f"{sphere}.pert.b2"] = np.concatenate([np.zeros(d), np.full(d, -3.0)])
        for i in range(cfg.blocks_per_stack):
            arrays.update(_block_params(rng, f"{sphere}.blocks.{i}", d, cfg.ffn_mult, depth_gain))
        arrays[f"{sphere}.dec.ln.g"] = np.ones(d)
        arrays[f"{sphere}.dec.ln.b"] = np.zeros(d)
        arrays[f"{sphere}.dec.W"] = _dense(rng, d, n_out, 0.1)
        arrays[f"{sphere}.dec.b"] = np.zeros(n_out)
    for j in range(cfg.n_coupling):
        arrays.update(_block_params(rng, f"couple.{j}.block", 2 * d, cfg.ffn_mult, depth_gain))
        arrays[f"couple.{j}.proj.W"] = np.zeros((2 * d, 2 * d))
        arrays[f"couple.{j}.proj.b"] = np.zeros(2 * d)
    return CsmParams.from_arrays(arrays)


# -- building blocks ---------------------------------------------------------

def patchify(x, p):
    """(B, C, H, W) -> (B, H/p * W/p, C*p*p)."""
    b, c, h, w = x.shape
    x = ta.reshape(x, (b, c, h // p, p, w // p, p))
    x = ta.transpose(x, (0, 2, 4, 1, 3, 5))
    return ta.reshape(x, (b, (h // p) * (w // p), c * p * p))


def unpatchify(x, c, h, w, p):
    """Inverse of :func:`patchify`."""
    b = x.shape[0]
    x = ta.reshape(x, (b, h // p, w // p, c, p, p))
    x = ta.transpose(x, (0, 3, 1, 4, 2, 5))
    return ta.reshape(x, (b, c, h, w))


def _bcast(vec, shape, axis):
    """Constant tensor broadcasting a per-channel vector to ``shape``."""
    view = [1] * len(shape)
    view[axis] = vec.size
    return ta.tensor(np.broadcast_to(vec.reshape(view), shape))


def transformer_block(params, prefix, h, heads):
    """Pre-norm attention + FFN residual block."""
    P = params
    x = ta.layer_norm(h, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    q, k, v = ta.split(ta.linear(x, P[f"{prefix}.qkv.W"], P[f"{prefix}.qkv.b"]), [h.shape[-1]] * 3)
    att = ta.scaled_dot_product_attention(q, k, v, heads)
    h = h + ta.linear(att, P[f"{prefix}.out.W"], P[f"{prefix}.out.b"])
    x = ta.layer_norm(h, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    x = ta.gelu(ta.linear(x, P[f"{prefix}.ff1.W"], P[f"{prefix}.ff1.b"]))
    return h + ta.linear(x, P[f"{prefix}.ff2.W"], P[f"{prefix}.ff2.b"])


def coupling_block(params, j, h_a, h_o, heads):
    """Contributions ``(to_atm, to_ocn)`` of coupling block ``j``.

    The caller adds each contribution to its stack's features.
    """
    if h_a.shape != h_o.shape:
        raise ta.ShapeError(f"coupling_block: feature shapes differ {h_a.shape} vs {h_o.shape}")
    d = h_a.shape[-1]
    h = transformer_block(params, f"couple.{j}.block", ta.concat([h_a, h_o], axis=-1), heads)
    out = ta.linear(h, params[f"couple.{j}.proj.W"], params[f"couple.{j}.proj.b"])
    to_a, to_o = ta.split(out, [d, d], axis=-1)
    return to_a, to_o


def _as_input_tensor(x):
    return x if isinstance(x, ta.Tensor) else ta.tensor(x)


def encode(params, cfg, sphere, prev, cur):
    """Normalise, patchify two time levels and embed them as tokens."""
    prev, cur = _as_input_tensor(prev), _as_input_tensor(cur)
    mu, sd = params[f"buffer.{sphere}.mean"].data, params[f"buffer.{sphere}.std"].data
    b = cur.shape[0]
    shift = _bcast(mu, cur.shape, 1)
    inv = _bcast(1.0 / sd, cur.shape, 1)
    both = ta.concat([ta.mul(prev - shift, inv), ta.mul(cur - shift, inv)], axis=1)
    tokens = patchify(both, cfg.patch)
    x = ta.linear(tokens, params[f"{sphere}.enc.W"], params[f"{sphere}.enc.b"])
    pos = params[f"{sphere}.pos"]
    if pos.requires_grad:
        return x + _tile_batch(pos, b)
    return x + ta.tensor(np.broadcast_to(pos.data, x.shape))


def _tile_batch(t, b):
    """Differentiable repeat of a (N, d) tensor along a new batch axis."""
    return ta.concat([ta.reshape(t, (1,) + t.shape)] * b, axis=0)


def perturbation_stats(params, sphere, x):
    """Pointwise two-layer network giving ``(mu, log_sigma)`` of the perturbation."""
    d = x.shape[-1]
    hid = ta.gelu(ta.linear(x, params[f"{sphere}.pert.W1"], params[f"{sphere}.pert.b1"]))
    out = ta.linear(hid, params[f"{sphere}.pert.W2"], params[f"{sphere}.pert.b2"])
    mu, log_sigma = ta.split(out, [d, d], axis=-1)
    return mu, log_sigma


def perturb(params, sphere, x, eps):
    """Return ``(x + z, mu, log_sigma)`` with ``z = mu + exp(log_sigma) * eps``."""
    eps = _as_input_tensor(eps)
    if eps.shape != x.shape:
        raise ta.ShapeError(f"perturb: eps shape {eps.shape} does not match input {x.shape}")
    mu, log_sigma = perturbation_stats(params, sphere, x)
    z = ta.gaussian_reparam(mu, log_sigma, eps)
    return x + z, mu, log_sigma


def decode(params, cfg, sphere, h, cur):
    """Project tokens to a normalised increment and add it to the current day."""
    cur = _as_input_tensor(cur)
    c = len(cfg.sphere_vars(sphere))
    x = ta.layer_norm(h, params[f"{sphere}.dec.ln.g"], params[f"{sphere}.dec.ln.b"])
    inc = ta.linear(x, params[f"{sphere}.dec.W"], params[f"{sphere}.dec.b"])
    inc = unpatchify(inc, c, cfg.nlat, cfg.nlon, cfg.patch)
    sd = params[f"buffer.{sphere}.std"].data
    return cur + ta.mul(inc, _bcast(sd, cur.shape, 1))


@dataclass
class StepOutput:
    a_next: ta.Tensor
    o_next: ta.Tensor
    stats: dict = field(default_factory=dict)


def step(params, cfg, inp, eps_a, eps_o, coupled=True, inputs=None):
    """Advance both spheres by one day.

    ``inputs`` may supply pre-built Tensors for ``(a_prev, a_cur, o_prev,
    o_cur)`` (used for input-gradient probes); otherwise ``inp`` arrays are
    wrapped as constants. ``coupled=False`` skips coupling blocks entirely.
    """
    if inputs is None:
        inputs = tuple(ta.tensor(a) for a in (inp.a_prev, inp.a_cur, inp.o_prev, inp.o_cur))
    a_prev, a_cur, o_prev, o_cur = inputs
    h_a = encode(params, cfg, "atm", a_prev, a_cur)
    h_o = encode(params, cfg, "ocn", o_prev, o_cur)
    h_a, mu_a, ls_a = perturb(params, "atm", h_a, eps_a)
    h_o, mu_o, ls_o = perturb(params, "ocn", h_o, eps_o)
    for i in range(cfg.blocks_per_stack):
        h_a = transformer_block(params, f"atm.blocks.{i}", h_a, cfg.n_heads)
        h_o = transformer_block(params, f"ocn.blocks.{i}", h_o, cfg.n_heads)
        if coupled and (i + 1) % cfg.coupling_every == 0:
            to_a, to_o = coupling_block(params, (i + 1) // cfg.coupling_every - 1, h_a, h_o, cfg.n_heads)
            h_a = h_a + to_a
            h_o = h_o + to_o
    a_next = decode(params, cfg, "atm", h_a, a_cur)
    o_next = decode(params, cfg, "ocn", h_o, o_cur)
    stats = {"mu_atm": mu_a, "log_sigma_atm": ls_a, "mu_ocn": mu_o, "log_sigma_ocn": ls_o}
    return StepOutput(a_next, o_next, stats)


def sphere_step(params, cfg, sphere, prev, cur, eps):
    """One sphere advanced on its own, with no coupling path at all."""
    h = encode(params, cfg, sphere, prev, cur)
    h, _, _ = perturb(params, sphere, h, eps)
    for i in range(cfg.blocks_per_stack):
        h = transformer_block(params, f"{sphere}.blocks.{i}", h, cfg.n_heads)
    return decode(params, cfg, sphere, h, cur)


# -- rollouts and ensembles --------------------------------------------------

def member_rng(base_seed, member):
    """Independent generator for one ensemble member, fixed by (base_seed, member)."""
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(member)]))


def eps_stream(rng, cfg, n_steps, batch=1, resample=None):
    """Noise for each step: sampled on the first step, zero afterwards unless resampling."""
    resample = cfg.resample_perturbation if resample is None else resample
    shape = cfg.token_shape(batch)
    zeros = np.zeros(shape)
    out = []
    for k in range(n_steps):
        if k == 0 or resample:
            out.append((rng.standard_normal(shape), rng.standard_normal(shape)))
        else:
            out.append((zeros, zeros))
    return out


def zero_eps(cfg, n_steps, batch=1):
    zeros = np.zeros(cfg.token_shape(batch))
    return [(zeros, zeros)] * n_steps


def rollout(params, cfg, init, n_steps, eps, coupled=True):
    """Autoregressive forecast.

    Returns ``(atm, ocn)`` arrays of shape ``(n_steps, B, C, H, W)``; entry
    ``k`` is the forecast for day ``k + 1`` after ``init.a_cur``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if len(eps) < n_steps:
        raise ValueError("eps stream shorter than rollout")
    a_prev, a_cur, o_prev, o_cur = init.a_prev, init.a_cur, init.o_prev, init.o_cur
    atm, ocn = [], []
    for k in range(n_steps):
        out = step(params, cfg, StepInput(a_prev, a_cur, o_prev, o_cur), eps[k][0], eps[k][1],
                   coupled=coupled)
        a_next, o_next = out.a_next.data, out.o_next.data
        if not (np.isfinite(a_next).all() and np.isfinite(o_next).all()):
            raise NumericalBlowUp(k + 1)
        atm.append(a_next)
        ocn.append(o_next)
        a_prev, a_cur, o_prev, o_cur = a_cur, a_next, o_cur, o_next
    return np.stack(atm), np.stack(ocn)


@dataclass
class EnsembleForecast:
    """Member rollouts from one initialisation: arrays ``(M, n_steps, C, H, W)``."""

    atm: np.ndarray
    ocn: np.ndarray
    atm_vars: tuple
    ocn_vars: tuple

    @property
    def members(self):
        return self.atm.shape[0]

    def variable(self, name):
        if name in self.atm_vars:
            return self.atm[:, :, self.atm_vars.index(name)]
        if name in self.ocn_vars:
            return self.ocn[:, :, self.ocn_vars.index(name)]
        raise KeyError(name)

    def ensemble_mean(self, name):
        return self.variable(name).mean(axis=0)


def forecast_member(params, cfg, init, n_steps, base_seed, member, coupled=True, control=False):
    """One ensemble member; ``control`` replaces the sampled noise with zeros (z = mu)."""
    if init.batch != 1:
        raise ValueError("ensemble members are run from a single initialisation")
    eps = zero_eps(cfg, n_steps) if control else eps_stream(member_rng(base_seed, member), cfg, n_steps)
    atm, ocn = rollout(params, cfg, init, n_steps, eps, coupled=coupled)
    return atm[:, 0], ocn[:, 0]


def ensemble_forecast(params, cfg, init, members=None, base_seed=0, n_steps=None,
                      coupled=True, control=False):
    """Run ``members`` rollouts, each with its own reproducible noise stream."""
    members = cfg.members if members is None else members
    n_steps = cfg.rollout_days if n_steps is None else n_steps
    if members < 1:
        raise ValueError("members must be at least 1")
    runs = [forecast_member(params, cfg, init, n_steps, base_seed, m, coupled, control)
            for m in range(members)]
    return EnsembleForecast(np.stack([r[0] for r in runs]), np.stack([r[1] for r in runs]),
                            cfg.atm_vars, cfg.ocn_vars)


def batch_forecast(params, cfg, init, members, base_seed, n_steps, coupled=True):
    """Ensemble-mean forecasts for a batch of initialisations in one graph per step.

    Member ``m`` of initialisation ``i`` draws noise from
    ``member_rng(base_seed + i, m)``. Results are deterministic for a fixed
    batch, though not bit-identical to :func:`ensemble_forecast`.
    Returns ensemble means of shape ``(B, n_steps, C, H, W)`` per sphere.
    """
    b = init.batch
    rep = np.repeat(np.arange(b), members)
    big = init.take(rep)
    eps_a = np.zeros((n_steps,) + cfg.token_shape(b * members))
    eps_o = np.zeros_like(eps_a)
    for i in range(b):
        for m in range(members):
            stream = eps_stream(member_rng(base_seed + i, m), cfg, n_steps)
            for k, (ea, eo) in enumerate(stream):
                eps_a[k, i * members + m] = ea[0]
                eps_o[k, i * members + m] = eo[0]
    atm, ocn = rollout(params, cfg, big, n_steps, list(zip(eps_a, eps_o)), coupled=coupled)
    shape = lambda x: x.reshape((n_steps, b, members) + x.shape[2:]).mean(axis=2).swapaxes(0, 1)
    return shape(atm), shape(ocn)
