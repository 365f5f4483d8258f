"""Command-line pipeline: gen-truth, build-clim, train, forecast, verify, mjo, couple-diag, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes ``manifest.txt`` (sha-256 of each emitted file) under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import climatology as clim_mod
from . import config as config_mod
from . import csm, modes, toytruth, train, verify
from .gridfield import FieldSeries, GfbError, GridError, read_gfb, write_gfb

log = logging.getLogger("coupledcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# purpose ids for splitting the single --seed into independent streams
STREAMS = {"toy": 0, "init": 1, "train": 2, "members": 3}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def derive_seed(seed, purpose, *extra):
    """Counter-based stream split: SeedSequence([seed, purpose, *extra]) -> uint32."""
    ss = np.random.SeedSequence([int(seed), STREAMS[purpose], *map(int, extra)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def write_manifest(out):
    out = Path(out)
    lines = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.txt":
            lines.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.relative_to(out).as_posix()}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return lines


def parse_init_date(text):
    """``YEAR:DAY`` (pseudo-year index and day of year)."""
    try:
        y, d = text.split(":")
        return int(y), int(d)
    except ValueError:
        raise UsageError(f"--init-date must look like YEAR:DAY, got {text!r}") from None


def _load_config(path):
    if path is None:
        return config_mod.RunConfig()
    try:
        return config_mod.load(path)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except config_mod.ConfigError as exc:
        raise UsageError(f"config: {exc}") from None


def _dataset(cfg, directory):
    if directory is None:
        raise UsageError("--data is required")
    toy = cfg.toy()
    try:
        return toytruth.read_dataset(toy, directory, cfg["toy"]["inits_per_year"])
    except FileNotFoundError as exc:
        raise DataError(f"toytruth: {exc}") from None


def _init_dirs(root):
    """Sorted ``(year, day, path)`` of a ``{year}/{day:03d}/`` tree."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"directory not found: {root}")
    out = []
    for yd in root.iterdir():
        if yd.is_dir() and yd.name.isdigit():
            for dd in yd.iterdir():
                if dd.is_dir() and dd.name.isdigit():
                    out.append((int(yd.name), int(dd.name), dd))
    if not out:
        raise DataError(f"no initialisation directories under {root}")
    return sorted(out)


def _test_inits(cfg, ds):
    n_train = cfg["toy"]["train_years"]
    return [(y, d) for y, d in ds.inits if y >= n_train]


# -- commands -------------------------------------------------------------------

def cmd_gen_truth(args, cfg):
    toy = cfg.toy()
    t = cfg["toy"]
    ds = toytruth.emit_dataset(toy, t["years"], t["inits_per_year"], t["horizon"],
                               seed=derive_seed(args.seed, "toy"))
    out = Path(args.out)
    toytruth.write_dataset(ds, out)
    for year, day in ds.inits:
        atm, ocn = ds.verifying(year, day)
        for sphere, arr in (("atm", atm), ("ocn", ocn)):
            for c, var in enumerate(toy.variables(sphere)):
                s = FieldSeries(toy.grid, var, np.arange(1, len(arr) + 1), arr[:, c],
                                meta={"init_year": str(year), "init_day": str(day)})
                write_gfb(out / "targets" / str(year) / f"{day:03d}" / f"{var}.gfb", s)
    config_mod.dump(cfg, out / "config.ini")


def _weekly_hindcast(cfg, ds, var, years):
    toy = cfg.toy()
    sphere = "atm" if var in toy.variables("atm") else "ocn"
    c = toy.variables(sphere).index(var)
    n_weeks = min(cfg["verify"]["lead_weeks"], ds.horizon // 7)
    dates = sorted({d for _, d in ds.inits})
    vals = np.empty((len(years), len(dates), 1, n_weeks) + toy.grid.shape)
    for i, y in enumerate(years):
        for j, d in enumerate(dates):
            arr = ds.verifying(y, d)[0 if sphere == "atm" else 1][:, c]
            vals[i, j, 0] = clim_mod.weekly_means(arr, n_weeks)
    return clim_mod.HindcastSet(toy.grid, var, years, dates, np.arange(1, n_weeks + 1), vals)


def cmd_build_clim(args, cfg):
    ds = _dataset(cfg, args.data)
    years = list(range(cfg["toy"]["train_years"]))
    if len(years) < 2:
        raise DataError("climatology: need at least 2 hindcast years")
    p_ext = cfg["verify"]["extreme_percentile"]
    for var in ds.cfg.operators:
        hc = _weekly_hindcast(cfg, ds, var, years)
        clim = clim_mod.Climatology(percentiles=(100 / 3, 200 / 3, p_ext)).fit(hc)
        clim.save(Path(args.out) / var)


def _training_data(cfg, ds):
    n_train = cfg["toy"]["train_years"]
    end = ds.index(n_train - 1, ds.cfg.year_length - 1) + 1
    return train.TrainingData(ds.atm[:end], ds.ocn[:end], np.array(ds.cfg.lats))


def cmd_train(args, cfg):
    ds = _dataset(cfg, args.data)
    data = _training_data(cfg, ds)
    mcfg = cfg.model()
    params = csm.init_params(mcfg, derive_seed(args.seed, "init"), norm=data.normalisation())
    tcfg = cfg.train(seed=derive_seed(args.seed, "train"), freeze_coupling=args.ablate_coupling)
    out = Path(args.out)
    ckdir = out / "checkpoints" if tcfg.checkpoint_every else None
    params, trace = train.fit(params, mcfg, data, tcfg, checkpoint_dir=ckdir)
    if ckdir is not None:
        (ckdir / "final.ckpt").unlink()
    train.save_params(out / "model.ckpt", params)
    train.write_trace(out / "trace.csv", trace)
    config_mod.dump(cfg, out / "config.ini")
    (out / "model.txt").write_text(f"coupled = {str(not args.ablate_coupling).lower()}\n"
                                   f"seed = {args.seed}\n", encoding="utf-8")


def _load_model(directory):
    if directory is None:
        raise UsageError("--model is required")
    path = Path(directory) / "model.ckpt"
    if not path.is_file():
        raise DataError(f"no checkpoint at {path}")
    return train.load_params(path)


def cmd_forecast(args, cfg):
    ds = _dataset(cfg, args.data)
    params = _load_model(args.model)
    mcfg = cfg.model()
    if args.ablate_coupling:
        params.zero_coupling()
    members = mcfg.members if args.members is None else args.members
    if members < 1:
        raise UsageError("--members must be at least 1")
    inits = [parse_init_date(args.init_date)] if args.init_date else _test_inits(cfg, ds)
    for init in inits:
        if init not in ds.inits:
            raise DataError(f"initialisation {init[0]}:{init[1]:03d} not in the dataset calendar")
    n_steps = min(mcfg.rollout_days, ds.horizon)
    n_weeks = n_steps // 7
    grid = ds.grid
    out = Path(args.out)
    for year, day in inits:
        fc = csm.ensemble_forecast(params, mcfg, ds.step_input(year, day), members,
                                   derive_seed(args.seed, "members", year, day), n_steps,
                                   coupled=not args.ablate_coupling)
        d = out / str(year) / f"{day:03d}"
        meta = {"init_year": str(year), "init_day": str(day), "members": str(members)}
        for var in mcfg.atm_vars + mcfg.ocn_vars:
            ens = fc.variable(var)
            write_gfb(d / f"{var}.gfb", FieldSeries(grid, var, np.arange(1, n_steps + 1),
                                                    ens.mean(axis=0), meta=meta))
            if n_weeks:
                wk = clim_mod.weekly_means(ens, n_weeks, axis=1).reshape((-1,) + grid.shape)
                write_gfb(d / f"{var}.members.gfb",
                          FieldSeries(grid, var, np.arange(wk.shape[0]), wk,
                                      meta={**meta, "layout": "member*weeks+week-1",
                                            "weeks": str(n_weeks)}))
    config_mod.dump(cfg, out / "config.ini")


def _load_clim(root, var):
    path = Path(root) / var
    if not (path / "index.csv").is_file():
        raise DataError(f"climatology for {var} not found under {root}")
    return clim_mod.Climatology.load(path)


def _weekly_anomaly(series, clim, date, n_weeks):
    vals = clim_mod.weekly_means(series.values, n_weeks)
    return vals - clim.stat("mean", date, range(1, n_weeks + 1))


def _read_members(path, n_weeks):
    s = read_gfb(path)
    w = int(s.meta.get("weeks", n_weeks))
    return s.values.reshape((-1, w) + s.grid.shape)[:, :n_weeks]


def _verify_variable(var, pairs, clim, n_weeks, grid):
    """Per-week MetricMaps for one variable over matched initialisations."""
    pred, obs, ens = [], [], []
    for (_, day), fdir, odir in pairs:
        f, o = read_gfb(fdir / f"{var}.gfb"), read_gfb(odir / f"{var}.gfb")
        if f.grid != grid or o.grid != grid:
            raise DataError(f"verify: {var} grid does not match the configuration")
        pred.append(_weekly_anomaly(f, clim, day, n_weeks))
        obs.append(_weekly_anomaly(o, clim, day, n_weeks))
        mpath = fdir / f"{var}.members.gfb"
        if mpath.is_file():
            ens.append((_read_members(mpath, n_weeks), day))
    pred, obs = np.stack(pred), np.stack(obs)
    maps = []
    for w in range(1, n_weeks + 1):
        sample = verify.MatchedSample(grid, pred[:, w - 1], obs[:, w - 1], w, var)
        maps += [verify.tcc(sample), verify.rmse(sample)]
        if len(ens) == len(pairs) and ens[0][0].shape[0] >= 2:
            fc_p, ob_p, p_ext, events = [], [], [], []
            for j, (members, day) in enumerate(ens):
                lo, hi, ext = (clim.stat(n, day, [w])[0] for n in clim_names(clim))
                mean = clim.stat("mean", day, [w])[0]
                o_raw = obs[j, w - 1] + mean
                fc_p.append(verify.category_probs(members[:, w - 1], [lo, hi]))
                ob_p.append(verify.observed_probs(o_raw, [lo, hi]))
                p_ext.append(verify.exceedance_probs(members[:, w - 1], ext))
                events.append((o_raw > ext).astype(float))
            maps.append(verify.rpss(fc_p, ob_p, grid, w, variable=var))
            maps.append(verify.bss(np.stack(p_ext), np.stack(events), grid, w, variable=var))
    return maps


def clim_names(clim):
    """Names of the lower tercile, upper tercile and extreme percentile statistics."""
    qs = sorted(clim.percentile_)
    if len(qs) < 3:
        raise DataError("climatology lacks tercile and extreme percentiles")
    return tuple(clim_mod._pct_name(q) for q in qs[:3])


def cmd_verify(args, cfg):
    if args.forecast is None or args.clim is None:
        raise UsageError("verify needs --forecast and --clim")
    obs_root = Path(args.obs) if args.obs else (Path(args.data) / "targets" if args.data else None)
    if obs_root is None:
        raise UsageError("verify needs --obs or --data")
    grid = cfg.toy().grid
    fdirs = {(y, d): p for y, d, p in _init_dirs(args.forecast)}
    odirs = {(y, d): p for y, d, p in _init_dirs(obs_root)}
    missing = [k for k in fdirs if k not in odirs]
    if missing:
        raise DataError(f"verify: no observations for initialisations {missing[:3]}")
    pairs = [(k, fdirs[k], odirs[k]) for k in sorted(fdirs)]
    if len(pairs) < 2:
        raise DataError("verify: at least 2 initialisations are required")
    first = pairs[0][1]
    variables = sorted(p.name[:-4] for p in first.glob("*.gfb") if ".members" not in p.name)
    out = Path(args.out)
    rows = []
    for var in variables:
        clim = _load_clim(args.clim, var)
        n_days = len(read_gfb(first / f"{var}.gfb"))
        n_weeks = min(cfg["verify"]["lead_weeks"], n_days // 7, len(clim.leads_))
        if n_weeks < 1:
            raise DataError("verify: forecasts shorter than one week")
        for m in _verify_variable(var, pairs, clim, n_weeks, grid):
            write_gfb(out / "maps" / f"{m.metric}_{var}_w{m.lead_week}.gfb", m.to_series(var))
            rows.append((m.metric, var, m.lead_week, m.global_mean()))
    verify.write_skill_csv(out / "skill.csv", rows)


def _time_mean_anomalies(ds, var, years):
    """Truth series over ``years`` minus its own long-term mean, plus that mean."""
    series = [ds.series(var, y) for y in years]
    vals = np.concatenate([s.values for s in series])
    times = np.concatenate([s.times for s in series])
    mean = vals.mean(axis=0)
    return FieldSeries(ds.grid, var, times, vals - mean), mean


def _lead_series(path, mean):
    s = read_gfb(path)
    return s.with_values(s.values - mean)


def cmd_mjo(args, cfg):
    out = Path(args.out)
    if args.fixture:
        grid = cfg.toy().grid
        olr, u850, u200 = modes.eastward_wave(grid, 120)
        r = modes.rmm(olr, u850, u200)
        modes.write_rmm_csv(out / "rmm_obs.csv",
                            [(0, t, a, b) for t, a, b in zip(r.times, r.rmm1, r.rmm2)])
        return
    ds = _dataset(cfg, args.data)
    years = list(range(cfg["toy"]["train_years"]))
    anoms, means = {}, {}
    for var in ("OLR", "U850", "U200", "Z500"):
        anoms[var], means[var] = _time_mean_anomalies(ds, var, years)
    index = modes.RmmIndex().fit(anoms["OLR"], anoms["U850"], anoms["U200"])
    index.basis_.save(out / "basis", "rmm")
    nao = modes.NaoIndex().fit(anoms["Z500"])
    nao.basis_.save(out / "basis", "nao")
    r = index.transform(anoms["OLR"], anoms["U850"], anoms["U200"])
    modes.write_rmm_csv(out / "rmm_obs.csv", [(0, t, a, b) for t, a, b in zip(r.times, r.rmm1, r.rmm2)])
    if args.forecast is None:
        return
    obs_root = Path(args.data) / "targets"
    f_rmm, o_rmm, f_nao, o_nao, rows, nrows = [], [], [], [], [], []
    for year, day, fdir in _init_dirs(args.forecast):
        odir = obs_root / str(year) / f"{day:03d}"
        series = {}
        for tag, root in (("f", fdir), ("o", odir)):
            s = {v: _lead_series(root / f"{v}.gfb", means[v]) for v in anoms}
            series[tag] = (index.transform(s["OLR"], s["U850"], s["U200"]), nao.transform(s["Z500"]))
        n = min(len(series["f"][0].times), len(series["o"][0].times))
        f_rmm.append(series["f"][0].pairs()[:n])
        o_rmm.append(series["o"][0].pairs()[:n])
        f_nao.append(series["f"][1][:n])
        o_nao.append(series["o"][1][:n])
        init = year * ds.cfg.year_length + day
        rows += [(init, t + 1, a, b) for t, (a, b) in enumerate(f_rmm[-1])]
        nrows += [(init, t + 1, v) for t, v in enumerate(f_nao[-1])]
    modes.write_rmm_csv(out / "rmm_forecast.csv", rows)
    modes.write_index_csv(out / "nao_forecast.csv", nrows)
    n = min(len(x) for x in f_rmm)
    cor = modes.bivariate_cor_by_lead(np.stack([x[:n] for x in f_rmm]), np.stack([x[:n] for x in o_rmm]))
    ncor = modes.pearson_by_lead(np.stack([x[:n] for x in f_nao]), np.stack([x[:n] for x in o_nao]))
    thr = cfg["verify"]["skill_threshold"]
    with open(out / "index_skill.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "lead_day", "cor"])
        for name, curve in (("RMM", cor), ("NAO", ncor)):
            for day, c in curve:
                w.writerow([name, day, "" if c is None else repr(c)])
    with open(out / "skill_horizon.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "threshold", "horizon_days"])
        w.writerow(["RMM", thr, modes.skill_horizon(cor, thr)])
        w.writerow(["NAO", thr, modes.skill_horizon(ncor, thr)])


def cmd_couple_diag(args, cfg):
    if args.clim is None:
        raise UsageError("couple-diag needs --clim")
    source = Path(args.forecast) if args.forecast else (
        Path(args.data) / "targets" if args.data else None)
    if source is None:
        raise UsageError("couple-diag needs --forecast or --data")
    dirs = _init_dirs(source)
    grid = cfg.toy().grid
    alpha = cfg["verify"]["alpha"]
    out = Path(args.out)
    rows = []
    anoms = {}
    for a, b in verify.COUPLING_PAIRS:
        for var in (a, b):
            if var not in anoms:
                clim = _load_clim(args.clim, var)
                n_weeks = min(cfg["verify"]["lead_weeks"], len(clim.leads_))
                anoms[var] = np.stack([_weekly_anomaly(read_gfb(p / f"{var}.gfb"), clim, d, n_weeks)
                                       for _, d, p in dirs])
        n_weeks = min(anoms[a].shape[1], anoms[b].shape[1])
        for w in range(1, n_weeks + 1):
            cmap, sig = verify.coupling_correlation(anoms[a][:, w - 1], anoms[b][:, w - 1], grid,
                                                    alpha, lead_week=w)
            s = cmap.to_series(a)
            s.meta["pair"] = f"{a}-{b}"
            write_gfb(out / "maps" / f"COR_{a}-{b}_w{w}.gfb", s)
            write_gfb(out / "maps" / f"SIG_{a}-{b}_w{w}.gfb",
                      FieldSeries(grid, a, [w], sig[None].astype(float), cmap.mask[None],
                                  meta={"pair": f"{a}-{b}", "alpha": repr(alpha)}))
            frac = float(sig[cmap.mask].mean()) if cmap.mask.any() else 0.0
            rows.append((f"{a}-{b}", w, cmap.global_mean(), frac))
    with open(out / "coupling.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["pair", "lead_week", "mean_cor", "frac_significant"])
        for pair, w, c, f in rows:
            wr.writerow([pair, w, repr(c), repr(f)])


def _read_skill(path):
    path = Path(path) / "skill.csv"
    if not path.is_file():
        raise DataError(f"no skill table at {path}")
    with open(path, newline="") as fh:
        return {(r["metric"], r["variable"], int(r["lead_week"])): float(r["value"])
                for r in csv.DictReader(fh)}


def cmd_report(args, cfg):
    if args.coupled is None or args.ablated is None:
        raise UsageError("report needs --coupled and --ablated verify directories")
    a, b = _read_skill(args.coupled), _read_skill(args.ablated)
    keys = sorted(set(a) & set(b))
    if not keys:
        raise DataError("report: the two skill tables share no rows")
    with open(Path(args.out) / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "variable", "lead_week", "coupled", "ablated", "difference"])
        for k in keys:
            w.writerow([*k, repr(a[k]), repr(b[k]), repr(a[k] - b[k])])


COMMANDS = {
    "gen-truth": cmd_gen_truth,
    "build-clim": cmd_build_clim,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "verify": cmd_verify,
    "mjo": cmd_mjo,
    "couple-diag": cmd_couple_diag,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="coupledcast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="run configuration file (defaults apply when omitted)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--members", type=int)
        s.add_argument("--init-date", help="YEAR:DAY of a single initialisation")
        s.add_argument("--ablate-coupling", action="store_true",
                       help="train with frozen zero coupling / forecast with coupling zeroed")
        s.add_argument("--data", help="truth directory written by gen-truth")
        s.add_argument("--model", help="directory written by train")
        s.add_argument("--clim", help="directory written by build-clim")
        s.add_argument("--forecast", help="directory written by forecast")
        s.add_argument("--obs", help="observation tree in forecast layout (default DATA/targets)")
        s.add_argument("--fixture", action="store_true", help="mjo: use the eastward-wave fixture")
        s.add_argument("--coupled", help="report: verify directory of the coupled run")
        s.add_argument("--ablated", help="report: verify directory of the ablated run")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args.config)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
        write_manifest(args.out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (csm.NumericalBlowUp, train.TrainingDiverged, toytruth.IntegrationError,
            FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GfbError, GridError, OSError, ValueError, KeyError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
