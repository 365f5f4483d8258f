import numpy as np
import pytest

from coupledcast import csm
from coupledcast import tensorad as ta


def small_cfg(**kw):
    base = dict(nlat=2, nlon=4, atm_vars=("T2M", "OLR"), ocn_vars=("SSH",), d_model=8, n_heads=2,
                blocks_per_stack=2, coupling_every=2, patch=2, pert_hidden=4, members=3, rollout_days=5)
    base.update(kw)
    return csm.CsmConfig(**base)


def init_input(cfg, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    na, no = len(cfg.atm_vars), len(cfg.ocn_vars)
    g = (cfg.nlat, cfg.nlon)
    return csm.StepInput(rng.normal(size=(batch, na) + g), rng.normal(size=(batch, na) + g),
                         rng.normal(size=(batch, no) + g), rng.normal(size=(batch, no) + g))


def eps(cfg, seed=1, batch=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=cfg.token_shape(batch)), rng.normal(size=cfg.token_shape(batch))


def coupled_params(cfg, seed=0):
    p = csm.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 99)
    for k in p.coupling_projection_names():
        p[k].data[...] = 0.3 * rng.normal(size=p[k].shape)
    return p


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            small_cfg(blocks_per_stack=3)
        with pytest.raises(ValueError):
            small_cfg(d_model=9)
        with pytest.raises(ValueError):
            small_cfg(nlon=5)
        assert csm.CsmConfig.from_dict(small_cfg().to_dict()) == small_cfg()

    def test_zero_projection_at_init(self):
        p = csm.init_params(small_cfg(blocks_per_stack=4, coupling_every=2))
        names = p.coupling_projection_names()
        assert len(names) == 4 and all(not p[k].data.any() for k in names)


class TestPerturb:
    def test_identity_and_shift(self):
        cfg = small_cfg()
        p = csm.init_params(cfg)
        x = ta.tensor(np.random.default_rng(2).normal(size=cfg.token_shape()))
        p["atm.pert.W2"].data[...] = 0.0
        p["atm.pert.b2"].data[...] = np.r_[np.zeros(8), np.full(8, -3.0)]
        out, _, _ = csm.perturb(p, "atm", x, np.zeros(cfg.token_shape()))
        assert np.array_equal(out.data, x.data)
        p["atm.pert.b2"].data[...] = np.r_[np.full(8, 0.7), np.full(8, -60.0)]
        out, _, _ = csm.perturb(p, "atm", x, np.random.default_rng(3).normal(size=cfg.token_shape()))
        assert np.allclose(out.data, x.data + 0.7, atol=1e-12)

    def test_shape_mismatch(self):
        cfg = small_cfg()
        with pytest.raises(ta.ShapeError):
            csm.perturb(csm.init_params(cfg), "atm", ta.tensor(np.zeros(cfg.token_shape())), np.zeros(3))

    def test_monte_carlo_variance(self):
        cfg = small_cfg()
        p = csm.init_params(cfg)
        x = ta.tensor(np.random.default_rng(4).normal(size=(10_000, cfg.n_tokens, 8)) * 0 + 0.5)
        e = np.random.default_rng(5).normal(size=x.shape)
        out, _, ls = csm.perturb(p, "atm", x, e)
        var = out.data[:, 0, 0].var()
        expected = np.exp(2 * ls.data[0, 0, 0])
        assert abs(var / expected - 1) < 0.05


class TestCoupling:
    def test_zero_init_bit_identical(self):
        cfg = small_cfg()
        p = csm.init_params(cfg, 3)
        inp = init_input(cfg)
        ea, eo = eps(cfg)
        a = csm.step(p, cfg, inp, ea, eo, coupled=True)
        b = csm.step(p, cfg, inp, ea, eo, coupled=False)
        assert np.array_equal(a.a_next.data, b.a_next.data) and np.array_equal(a.o_next.data, b.o_next.data)
        sa = csm.sphere_step(p, cfg, "atm", inp.a_prev, inp.a_cur, ea)
        so = csm.sphere_step(p, cfg, "ocn", inp.o_prev, inp.o_cur, eo)
        assert np.array_equal(a.a_next.data, sa.data) and np.array_equal(a.o_next.data, so.data)

    def test_cross_sphere_gradient(self):
        cfg = small_cfg()
        p = coupled_params(cfg)
        inp = init_input(cfg)
        ea, eo = eps(cfg)
        tensors = (ta.tensor(inp.a_prev), ta.tensor(inp.a_cur), ta.tensor(inp.o_prev), ta.parameter(inp.o_cur))
        out = csm.step(p, cfg, inp, ea, eo, inputs=tensors)
        ta.total(out.a_next).backward()
        assert np.max(np.abs(tensors[3].grad)) > 0

    def test_zeroing_restores_independence(self):
        cfg = small_cfg()
        p = coupled_params(cfg)
        inp = init_input(cfg)
        swapped = csm.StepInput(inp.a_prev, inp.a_cur, inp.o_prev[:, ::-1] + 1.0, -inp.o_cur)
        ea, eo = eps(cfg)
        diff = csm.step(p, cfg, inp, ea, eo).a_next.data - csm.step(p, cfg, swapped, ea, eo).a_next.data
        assert np.abs(diff).max() > 0
        p.zero_coupling()
        a = csm.step(p, cfg, inp, ea, eo).a_next.data
        b = csm.step(p, cfg, swapped, ea, eo).a_next.data
        assert np.array_equal(a, b)

    def test_width_mismatch(self):
        cfg = small_cfg()
        with pytest.raises(ta.ShapeError):
            csm.coupling_block(csm.init_params(cfg), 0, ta.tensor(np.zeros((1, 2, 8))),
                               ta.tensor(np.zeros((1, 2, 4))), 2)


class TestStepAndRollout:
    def test_shapes_and_determinism(self):
        cfg = small_cfg()
        p = coupled_params(cfg)
        inp = init_input(cfg)
        ea, eo = eps(cfg)
        a, b = csm.step(p, cfg, inp, ea, eo), csm.step(p, cfg, inp, ea, eo)
        assert a.a_next.shape == inp.a_cur.shape and a.o_next.shape == inp.o_cur.shape
        assert np.array_equal(a.a_next.data, b.a_next.data) and np.array_equal(a.o_next.data, b.o_next.data)

    def test_blowup(self):
        cfg = small_cfg()
        p = csm.init_params(cfg)
        p["atm.dec.b"].data[...] = np.nan
        with pytest.raises(csm.NumericalBlowUp, match="numerical blow-up") as e:
            csm.rollout(p, cfg, init_input(cfg), 3, csm.zero_eps(cfg, 3))
        assert e.value.step == 1

    def test_one_step_and_prefix(self):
        cfg = small_cfg()
        p = coupled_params(cfg)
        inp = init_input(cfg)
        stream = csm.eps_stream(np.random.default_rng(7), cfg, 8)
        a1, o1 = csm.rollout(p, cfg, inp, 1, stream)
        s = csm.step(p, cfg, inp, *stream[0])
        assert np.array_equal(a1[0], s.a_next.data) and np.array_equal(o1[0], s.o_next.data)
        a8, o8 = csm.rollout(p, cfg, inp, 8, stream)
        a3, o3 = csm.rollout(p, cfg, inp, 3, stream[:3])
        assert a8.shape[0] == 8 and np.array_equal(a8[:3], a3) and np.array_equal(o8[:3], o3)

    def test_sixty_days(self):
        cfg = small_cfg(rollout_days=60)
        f = csm.ensemble_forecast(csm.init_params(cfg), cfg, init_input(cfg), members=1)
        assert f.variable("T2M").shape == (1, 60, 2, 4) and f.variable("SSH").shape == (1, 60, 2, 4)
        with pytest.raises(KeyError):
            f.variable("NOPE")

    def test_rollout_needs_steps(self):
        cfg = small_cfg()
        with pytest.raises(ValueError):
            csm.rollout(csm.init_params(cfg), cfg, init_input(cfg), 0, [])


class TestEnsemble:
    def test_control_and_spread(self):
        cfg = small_cfg()
        p = coupled_params(cfg)
        inp = init_input(cfg)
        ctl = csm.ensemble_forecast(p, cfg, inp, 1, control=True)
        a, _ = csm.rollout(p, cfg, inp, cfg.rollout_days, csm.zero_eps(cfg, cfg.rollout_days))
        assert np.array_equal(ctl.atm[0], a[:, 0])
        ens = csm.ensemble_forecast(p, cfg, inp, 3, base_seed=11)
        assert np.abs(ens.atm[0] - ens.atm[1]).max() > 0

    def test_member_reproducible(self):
        cfg = small_cfg()
        p = coupled_params(cfg)
        inp = init_input(cfg)
        full = csm.ensemble_forecast(p, cfg, inp, 3, base_seed=5)
        a, o = csm.forecast_member(p, cfg, inp, cfg.rollout_days, 5, 2)
        again = csm.ensemble_forecast(p, cfg, inp, 3, base_seed=5)
        assert np.array_equal(full.atm[2], a) and np.array_equal(full.ocn[2], o)
        assert np.array_equal(full.atm, again.atm)

    def test_batch_forecast_shapes(self):
        cfg = small_cfg()
        inp = init_input(cfg, batch=2)
        a, o = csm.batch_forecast(coupled_params(cfg), cfg, inp, 2, 0, 4)
        assert a.shape == (2, 4, 2, 2, 4) and o.shape == (2, 4, 1, 2, 4)
        with pytest.raises(ValueError):
            csm.ensemble_forecast(coupled_params(cfg), cfg, inp, 2)


def test_transformer_gradcheck():
    """Analytic gradients of a random 2-block coupled model against central differences."""
    cfg = small_cfg(d_model=4, n_heads=2, pert_hidden=2, atm_vars=("T2M",))
    p = coupled_params(cfg, 1)
    inp = init_input(cfg, 2)
    ea, eo = eps(cfg, 3)
    target = np.random.default_rng(4).normal(size=inp.a_cur.shape)
    names = sorted(p.trainable())

    def fn(*tensors):
        q = csm.CsmParams(p)
        q.update(zip(names, tensors))
        out = csm.step(q, cfg, inp, ea, eo)
        return ta.mse_loss(out.a_next, target) + ta.mse_loss(out.o_next, np.zeros(inp.o_cur.shape))

    assert ta.gradcheck(fn, [p[k] for k in names]) < 1e-5
