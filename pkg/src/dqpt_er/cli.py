"""Command-line experiment runner.

    dqpt-er generate  --n 50 --p 0.5 --n-real 10 --out nets
    dqpt-er quench    --solver exact --n 10 --hf 2 --out run
    dqpt-er ensemble  --config configs/fig4_right.ini --threads 4
    dqpt-er corrstats --config configs/fig5.ini
    dqpt-er analytic  --out ref

Exit status: 0 on success, 2 for configuration errors, 3 for runtime errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import collective, corrstats, ensemble, hamcore, netgen, semiclassics
from .config import COMMANDS, ConfigError, RunConfig, build_config, manifest_sections, write_ini

log = logging.getLogger("dqpt_er")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
ANALYTIC_GRID = tuple(np.round(np.arange(0.05, 2.0001, 0.05), 10))

# flag -> config field
_FLAGS = {
    "--n": ("n", int), "--p": ("p", float), "--hf": ("hf", float), "--solver": ("solver", str),
    "--n-real": ("n_real", int), "--n-traj": ("n_traj", int), "--dt": ("dt", float),
    "--t-max": ("t_max", float), "--seed": ("seed", int), "--out": ("out", str),
    "--threads": ("threads", int),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqpt-er", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "generate": "write seeded network realizations as edge lists",
        "quench": "evolve a single realization and write its trace",
        "ensemble": "average a solver over realizations (or sweep h_f for time averages)",
        "corrstats": "moment statistics of the echo for a ladder of system sizes",
        "analytic": "dump the closed-form reference curves",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="INI config file (flags override it)")
        for flag, (dest, typ) in _FLAGS.items():
            p.add_argument(flag, dest=dest, type=typ, default=None)
        p.add_argument("--hf-values", dest="hf_values", type=_float_list, default=None,
                       help="comma-separated field sweep")
        if name == "corrstats":
            p.add_argument("--n-ladder", dest="n_ladder", type=_int_list, default=None)
            p.add_argument("--m", dest="m", type=int, default=None)
            p.add_argument("--tuple-seed", dest="tuple_seed", type=int, default=None)
            p.add_argument("--tuple-budget", dest="tuple_budget", type=int, default=None)
    return parser


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, (int, str)) else repr(float(x)) for x in row])


def _prepare(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"run.out: cannot create {out}: {exc.strerror}") from None
    write_ini(out / "manifest.ini", manifest_sections(cfg))
    return out


# --- commands ----------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> Path:
    out = _prepare(cfg)
    for r in range(cfg.n_real):
        seed = cfg.seed + r
        netgen.save(netgen.generate(cfg.n, cfg.p, seed), out / f"network_{seed}.txt")
    return out


def cmd_quench(cfg: RunConfig) -> Path:
    out = _prepare(cfg)
    spec = cfg.quench_spec()
    if cfg.solver == "collective":
        trace = collective.evolve_collective(cfg.n, spec)
    elif cfg.solver == "exact":
        net = netgen.generate(cfg.n, cfg.p, cfg.seed)
        trace = hamcore.quench_trace(net, spec, method=cfg.exact_method)
    else:
        net = netgen.generate(cfg.n, cfg.p, cfg.seed)
        if cfg.solver == "meanfield":
            rec = semiclassics.meanfield_sweep(net, [cfg.hf], spec, field_dtype=cfg.field_dtype,
                                               init=cfg.mf_init, init_eps=cfg.init_eps)
            batch = semiclassics.TrajectoryBatch(spec.times, cfg.seed)
            batch.add(rec)
        else:
            batch = semiclassics.dtwa_run(net, spec, cfg.n_traj, cfg.seed)
        batch.write_csv(out / "trajectory.csv")
        semiclassics.write_portrait_csv(out / "portrait.csv", *semiclassics.phase_portrait(batch))
        return out
    trace.write_csv(out / "trace.csv")
    _write_events(out / "events.csv", trace.times, trace.theta_z, trace.rate)
    return out


def _write_events(path: Path, times, theta, rate) -> None:
    rows = [(f"turning_{kind}", t) for t, kind in ensemble.turning_points(times, theta)]
    if rate is not None:
        finite = np.isfinite(rate)
        if finite.all():
            rows += [("rate_min", t) for t in ensemble.local_minima(times, rate)]
            rows += [("rate_max", t) for t in ensemble.local_maxima(times, rate)]
        rows += [("cusp", t) for t in ensemble.cusp_detect(times, rate)]
    rows.sort(key=lambda r: (r[1], r[0]))
    _write_rows(path, ("event", "t"), rows)


def cmd_ensemble(cfg: RunConfig) -> Path:
    out = _prepare(cfg)
    spec = cfg.ensemble_spec()
    if cfg.hf_values:
        sweep = ensemble.time_average_sweep(spec, cfg.hf_values, n_periods=cfg.n_periods,
                                            t_abs=cfg.t_abs, workers=cfg.threads)
        sweep.write_csv(out / "time_avg_theta.csv", cfg.J)
        return out
    series = ensemble.run_ensemble(spec, workers=cfg.threads)
    for name in series.traces:
        series.write_reduced_csv(out / f"{name}.csv", name)
    rate = None
    if "log_g2" in series.traces:
        rate = series.rate_bar()
        series.write_rate_csv(out / "lambda_bar.csv")
        ensemble.write_columns(out / "lambda_quenched.csv", ("t", "lambda_quenched"),
                               (series.times, series.quenched_rate()))
    _write_events(out / "events.csv", series.times, series.mean("theta_z"), rate)
    return out


def cmd_corrstats(cfg: RunConfig) -> Path:
    out = _prepare(cfg)
    for n in cfg.ladder:
        spec = ensemble.EnsembleSpec(n, cfg.p, cfg.quench_spec(), "exact", cfg.n_real, cfg.seed,
                                     exact_method=cfg.exact_method)
        run = corrstats.correlation_ensemble(spec, m=cfg.m, window=cfg.window, stride=cfg.stride,
                                             tuple_budget=cfg.tuple_budget, tuple_seed=cfg.tuple_seed,
                                             workers=cfg.threads)
        run.samples.write_csv(out / f"samples_N{n}.csv")
        series = run.series
        ratio = corrstats.gbar_over_theta(series)
        ensemble.write_columns(out / f"gbar_over_theta_N{n}.csv", ("t", "gbar_over_theta"),
                               (series.times, ratio))
        _write_events(out / f"events_N{n}.csv", series.times, series.mean("theta_z"), series.rate_bar())
        if run.samples.realization.size == 0 or len(series.seeds) < cfg.min_realizations:
            log.warning("N=%d: %d realizations, statistics need %d; skipped", n, len(series.seeds),
                        cfg.min_realizations)
            continue
        stats = run.stats_series(min_realizations=cfg.min_realizations)
        corrstats.write_stats_csv(out / f"stats_N{n}.csv", stats)
        theta = np.interp(run.sample_times, series.times, series.mean("theta_z"))
        rows = []
        for (t, st), th in zip(stats, theta):
            direct = corrstats.delta_m_direct(run.samples.at_time(t))
            rows.append((t, st.mu_m, st.sigma_0m, st.sigma_0m_closed, th,
                         corrstats.delta_m(st, n, cfg.m, th),
                         corrstats.delta_m_factor_form(st, n, cfg.m, th), direct))
        _write_rows(out / f"delta_m_N{n}.csv",
                    ("t", "mu_m", "sigma_0m", "sigma_0m_closed", "mean_theta", "delta_m",
                     "delta_m_factor_form", "delta_m_direct"), rows)
    return out


def cmd_analytic(cfg: RunConfig) -> Path:
    out = _prepare(cfg)
    grid = cfg.hf_values or ANALYTIC_GRID
    collective.write_analytic_csv(out / "time_avg_theta.csv", grid, cfg.J)
    _write_rows(out / "equilibrium_order.csv", ("h", "order"),
                [(h, collective.equilibrium_order(h)) for h in np.round(np.arange(0, 3.0001, 0.05), 10)])
    rows = []
    for h in grid:
        if h >= cfg.J:
            continue
        orbit = collective.classical_orbit(h, cfg.J, cfg.quench_spec(h).times)
        rows += [(h, t, z, k) for t, z, k in zip(orbit.times, orbit.theta_z, orbit.k)]
    _write_rows(out / "classical_orbits.csv", ("h_f", "t", "theta_z", "k"), rows)
    return out


COMMAND_FUNCS = {"generate": cmd_generate, "quench": cmd_quench, "ensemble": cmd_ensemble,
                 "corrstats": cmd_corrstats, "analytic": cmd_analytic}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = build_config(args.command, args.config, overrides)
        out = COMMAND_FUNCS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ensemble.RealizationError, semiclassics.IntegrationError, hamcore.SystemTooLarge,
            corrstats.InsufficientSamples, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("outputs written to %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
