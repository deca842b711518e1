"""Command-line interface: ``latentdyn {generate,train,forecast,fnn-scan,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from .config import CONFIG_ENV, ExperimentConfig, load_config, save_config
from .data import (TimeSeries, add_noise, format_csv, lorenz_series, read_series_csv, rescale,
                   split_series, write_series_csv)
from .embedding import delay_matrix, fnn_fractions, mask_from_gamma
from .evaluation import FilterReport, filtering_report, forecast_horizon
from .exceptions import LatentDynError, NumericError
from .nn import atomic_write_text
from .training import (forecast_signal, infer_initial_state, load_checkpoint, run_schedule,
                       state_at)

log = logging.getLogger("latentdyn")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

PRECEDENCE = (f"Settings are resolved in this order, later wins: preset defaults, the config "
              f"file (--config, or ${CONFIG_ENV} when --config is absent), --set KEY=VALUE "
              f"pairs, then dedicated flags.")


class UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageExit(f"{self.prog}: error: {message}")


def _floats(text, n=None):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _ic(text):
    return _floats(text, 3)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args):
    """Config from preset, file, ``--set`` pairs and dedicated flags (in that order)."""
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV)
    if path:
        cfg = load_config(path)
    elif getattr(args, "preset", "desk") == "full":
        cfg = ExperimentConfig.full()
    else:
        cfg = ExperimentConfig.desk()
    over = {}
    for item in getattr(args, "set", None) or ():
        if "=" not in item:
            raise UsageExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = _parse_value(v)
    for key in ("ic", "dt", "eta", "seed", "data_seed", "phase1_iters", "phase2_iters"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if over:
        d = cfg.to_dict()
        unknown = set(over) - set(d)
        if unknown:
            raise UsageExit(f"unknown setting(s): {', '.join(sorted(unknown))}")
        d.update(over)
        cfg = ExperimentConfig.from_dict(d)
    return cfg


def _tag(cfg):
    return (f"config {cfg.digest()}",)


def _write(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args):
    cfg = ExperimentConfig.desk().updated(ic=args.ic, dt=args.dt, n_steps=args.steps,
                                          eta=args.eta, data_seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    clean, traj = lorenz_series(cfg.ic, cfg.dt, cfg.n_steps)
    tag = _tag(cfg)
    write_series_csv(os.path.join(args.out, "clean.csv"), clean, tag)
    files = ["clean.csv"]
    if cfg.eta > 0:
        noisy = add_noise(clean, cfg.eta, np.random.default_rng(cfg.data_seed))
        write_series_csv(os.path.join(args.out, "noisy.csv"), noisy, tag)
        files.append("noisy.csv")
    meta = {"config": cfg.digest(), "ic": list(cfg.ic), "dt": cfg.dt, "steps": cfg.n_steps,
            "eta": cfg.eta, "seed": cfg.data_seed, "files": files,
            "x_range": [float(traj[:, 0].min()), float(traj[:, 0].max())]}
    atomic_write_text(os.path.join(args.out, "meta.json"), json.dumps(meta, indent=2) + "\n")
    print(f"wrote {', '.join(files)} and meta.json to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = resolve_config(args)
    os.makedirs(args.out, exist_ok=True)
    save_config(os.path.join(args.out, "config.json"), cfg)
    resume = os.path.join(args.out, "last.json") if args.resume else None
    if resume and not os.path.exists(resume):
        raise UsageExit(f"nothing to resume: {resume} does not exist")

    def progress(bundle, row):
        if not math.isnan(row["val_nmse"]):
            log.info("epoch %d phase %s d=%d L_fit=%.3g L_ode=%.3g val_nmse=%.3g", row["epoch"],
                     bundle.phase, row["d"], row["L_fit"], row["L_ode"], row["val_nmse"])

    res = run_schedule(cfg, out_dir=args.out, resume=resume, callback=progress)
    print(f"trained {res.last.epoch} epochs; best validation NMSE {res.bundle.best_val:.4g} "
          f"at epoch {res.bundle.best_epoch}; d={res.bundle.mask.d}; outputs in {args.out}")
    return EXIT_OK


def _series_for(bundle, path):
    """Observed series: the given CSV, or the one the checkpoint config generates."""
    if path:
        return read_series_csv(path)
    cfg = bundle.config
    clean, _ = lorenz_series(cfg.ic, cfg.dt, cfg.n_steps)
    return add_noise(clean, cfg.eta, np.random.default_rng(cfg.data_seed))


def cmd_forecast(args):
    bundle = load_checkpoint(args.checkpoint)
    cfg = bundle.config
    if args.steps < 0:
        raise UsageExit("--steps must be >= 0")
    tag = _tag(cfg)
    if args.steps == 0:
        _write(args.out, format_csv(["time", "predicted"], [[], []], tag))
        return EXIT_OK
    t_end = bundle.curves[-1].t_hi
    t0 = t_end if args.t0 is None else args.t0
    if abs(t0 - t_end) < 1e-9:
        u0 = state_at(bundle, bundle.curves[-1], t_end)
    else:
        series = _series_for(bundle, args.series)
        scaled, _ = rescale(series, bundle.scaling)
        window = scaled.window(t0 - cfg.infer_window, t0)
        u0 = infer_initial_state(window, bundle, t0, seed=args.seed)
    pred = bundle.scaling.invert(forecast_signal(bundle, u0, args.steps, cfg.dt))
    times = t0 + cfg.dt * np.arange(args.steps + 1)
    _write(args.out, format_csv(["time", "predicted"], [times, pred], tag))
    return EXIT_OK


def cmd_fnn_scan(args):
    series = read_series_csv(args.series)
    dt = float(series.times[1] - series.times[0]) if len(series) > 1 else 0.0
    if dt <= 0:
        raise UsageExit("series needs at least two increasing samples")
    lag = int(round(args.tau / dt))
    if lag < 1 or abs(lag * dt - args.tau) > 1e-6 * max(1.0, args.tau):
        raise UsageExit(f"tau={args.tau:g} is not a positive multiple of the sampling step {dt:g}")
    if args.n_samples < 2:
        raise UsageExit(f"n-samples must be >= 2, got {args.n_samples}")
    D = delay_matrix(series.values, lag, args.m)
    if D.shape[0] < args.n_samples:
        raise UsageExit(f"series yields only {D.shape[0]} delay vectors, asked for {args.n_samples}")
    rng = np.random.default_rng(args.seed)
    D = D[np.sort(rng.choice(D.shape[0], args.n_samples, replace=False))]
    gamma = fnn_fractions(D, args.r_tol, args.a_tol, args.ratio_test)
    _, d = mask_from_gamma(gamma, args.epsilon)
    meta = {"m": args.m, "tau": args.tau, "n_samples": args.n_samples, "seed": args.seed,
            "ratio_test": args.ratio_test, "epsilon": args.epsilon}
    tag = ("fnn " + json.dumps(meta, sort_keys=True), f"embedding dimension {d}")
    _write(args.out, format_csv(["dimension", "gamma"], [np.arange(1, args.m + 1), gamma], tag))
    if args.out not in (None, "-"):
        print(f"embedding dimension d={d}")
    return EXIT_OK


def _check_scaling(bundle, noisy):
    cfg = bundle.config
    train, _, _ = split_series(noisy, cfg.train_end, cfg.val_end, cfg.test_end)
    _, rec = rescale(train)
    ref = bundle.scaling
    if not (np.isclose(rec.shift, ref.shift, rtol=1e-9, atol=1e-12)
            and np.isclose(rec.scale, ref.scale, rtol=1e-9, atol=1e-12)):
        raise UsageExit(f"scaling record mismatch: checkpoint (shift={ref.shift:.6g}, "
                        f"scale={ref.scale:.6g}) vs dataset (shift={rec.shift:.6g}, "
                        f"scale={rec.scale:.6g}); was the model trained on this dataset?")
    return train


def cmd_eval(args):
    clean = read_series_csv(args.clean)
    report = FilterReport()
    horizons = []
    cfg0 = None
    for ckpt, noisy_path in args.run:
        bundle = load_checkpoint(ckpt)
        cfg = bundle.config
        cfg0 = cfg0 or cfg
        noisy = clean if noisy_path == "clean" else read_series_csv(noisy_path)
        train = _check_scaling(bundle, noisy)
        clean_train, _, _ = split_series(clean, cfg.train_end, cfg.val_end, cfg.test_end)
        if clean_train.times.shape != train.times.shape:
            raise UsageExit("clean and noisy series are not aligned")
        eta = float(cfg.eta)
        filtering_report(clean_train, TimeSeries(train.times, train.values), bundle, eta, report)
        t_end = float(train.times[-1])
        k0 = int(np.argmin(np.abs(clean.times - t_end)))
        n = min(args.horizon_steps, clean.times.size - 1 - k0)
        if n < 1:
            raise UsageExit("clean series ends at the training end; nothing to forecast against")
        u0 = state_at(bundle, bundle.curves[-1], t_end)
        pred = bundle.scaling.invert(forecast_signal(bundle, u0, n, cfg.dt, pad_divergence=True))
        truth = clean.values[k0:k0 + n + 1]
        h = forecast_horizon(pred, truth, cfg.horizon_tol, cfg.dt)
        horizons.append((eta, h, n * cfg.dt))
    tag = _tag(cfg0)
    text = report.to_text()
    text += "\nForecast horizon from the training end (tolerance "
    text += f"{cfg0.horizon_tol:g} of range)\n"
    for eta, h, span in horizons:
        text += f"eta = {eta:.2f}   horizon {h:.2f} of {span:.2f} Lorenz time\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "filtering.csv"), report.to_csv(tag))
        atomic_write_text(os.path.join(args.out, "horizon.csv"), format_csv(
            ["eta", "horizon", "span"], [[x[0] for x in horizons], [x[1] for x in horizons],
                                         [x[2] for x in horizons]], tag))
        atomic_write_text(os.path.join(args.out, "report.txt"),
                          "".join(f"# {c}\n" for c in tag) + text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="latentdyn", description="Latent neural ODE filtering and forecasting.",
                epilog=PRECEDENCE)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="integrate Lorenz-63 and write clean/noisy CSVs")
    g.add_argument("--ic", type=_ic, default=(0.0, 1.0, 1.05), help="x,y,z initial condition")
    g.add_argument("--dt", type=float, default=0.05)
    g.add_argument("--steps", type=int, required=True, help="number of integration steps")
    g.add_argument("--eta", type=float, default=0.0, help="noise level relative to the std")
    g.add_argument("--seed", type=int, default=7, help="noise seed")
    g.add_argument("--out", default=".", help="output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the two-phase schedule", epilog=PRECEDENCE)
    t.add_argument("--config", help=f"JSON or TOML config (default: ${CONFIG_ENV})")
    t.add_argument("--preset", choices=("desk", "full"), default="desk",
                   help="base preset when no config file is given")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a setting")
    t.add_argument("--eta", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--phase1-iters", dest="phase1_iters", type=int)
    t.add_argument("--phase2-iters", dest="phase2_iters", type=int)
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--resume", action="store_true", help="continue from OUT/last.json")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="integrate the learned field from t0")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--t0", type=float, help="start time (default: end of training)")
    f.add_argument("--steps", type=int, required=True)
    f.add_argument("--series", help="time,value CSV holding observations before t0 "
                                    "(default: regenerate from the checkpoint config)")
    f.add_argument("--seed", type=int, default=0, help="seed of the initial-state fit")
    f.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    f.set_defaults(func=cmd_forecast)

    s = sub.add_parser("fnn-scan", help="false-nearest-neighbour fractions of a series")
    s.add_argument("--series", required=True, help="time,value CSV")
    s.add_argument("--m", type=int, default=6)
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--n-samples", dest="n_samples", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epsilon", type=float, default=0.01)
    s.add_argument("--r-tol", dest="r_tol", type=float, default=10.0)
    s.add_argument("--a-tol", dest="a_tol", type=float, default=2.0)
    s.add_argument("--ratio-test", dest="ratio_test", choices=("kennel", "literal"),
                   default="kennel")
    s.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    s.set_defaults(func=cmd_fnn_scan)

    e = sub.add_parser("eval", help="filtering and horizon reports")
    e.add_argument("--clean", required=True, help="clean time,value CSV")
    e.add_argument("--run", nargs=2, action="append", required=True,
                   metavar=("CHECKPOINT", "NOISY_CSV"),
                   help="checkpoint and the noisy CSV it was trained on ('clean' for eta=0); "
                        "repeat for one report row per run")
    e.add_argument("--horizon-steps", dest="horizon_steps", type=int, default=200)
    e.add_argument("--out", help="directory for report files")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        step = getattr(exc, "step", None)
        extra = f" (step {step})" if step is not None else ""
        print(f"latentdyn: numeric failure{extra}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LatentDynError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"latentdyn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
