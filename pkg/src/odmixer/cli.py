"""Command-line surface for the whole pipeline.

Subcommands: synth, ingest, train, eval, ablate, robust, perf,
export-series.  Every run is driven by a flat key=value config file plus a
few flags; unknown config keys are rejected.  Exit codes: 0 success,
1 usage/config error, 2 data error, 3 numeric failure.

The seed resolves as: --seed flag, else ODMIXER_SEED environment variable,
else the config file's seed.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import backend
from .errors import ConfigError, DataError, NumericError
from .evaluation import (
    ABLATION_VARIANTS,
    HistoricalAverage,
    evaluate_baseline,
    evaluate_model,
    export_series,
    inject_mask,
    inject_noise,
    perf_report,
    relative_increment,
    run_ablation,
    select_test_windows,
    write_metrics_rows,
    write_perf_report,
)
from .ingestion import (
    ScheduleConfig,
    build_dataset,
    desk_spec,
    generate_synthetic,
    read_transactions,
    write_transactions,
)
from .model import ModelConfig, ODMixer, load_checkpoint, save_checkpoint
from .od_data import load_dataset, save_dataset
from .training import DaySplit, TrainConfig, fit_normalizer, train

# key -> (type, default, help); "bool" accepts true/false/1/0/yes/no
SCHEMA = {
    # scenario / schedule
    "stations": (int, 10, "station count"),
    "days": (int, 28, "service days in the dataset"),
    "intervals_per_day": (int, 40, "intervals per service day"),
    "interval_minutes": (int, 15, "minutes per interval"),
    "service_start_minute": (int, 360, "first interval start, minutes after midnight"),
    "rate_scale": (float, 4.0, "global demand multiplier for synthetic data"),
    "weekend_multiplier": (float, 0.5, "weekend demand multiplier for synthetic data"),
    "seed": (int, 0, "master seed (overridable by --seed / ODMIXER_SEED)"),
    # model
    "horizon": (int, 4, "input intervals per window"),
    "channels": (int, 16, "feature channels per OD pair"),
    "layers": (int, 5, "interaction blocks"),
    "activation": (str, "gelu", "mixer activation: gelu, relu, or sigmoid"),
    "use_omp": (bool, True, "estimate unfinished flow for the current branch"),
    "use_channel_mixer": (bool, True, "enable the channel mixer"),
    "use_origin_mixer": (bool, True, "enable the origin-view mixer"),
    "use_des_mixer": (bool, True, "enable the destination-view mixer"),
    "use_multiview": (bool, True, "enable the multi-view mixer pair"),
    "use_btl": (bool, True, "enable the bidirectional trend unit"),
    "use_prev_branch": (bool, True, "enable the previous-day branch"),
    # training
    "learning_rate": (float, 1e-3, "Adam learning rate"),
    "batch_size": (int, 32, "windows per optimization step"),
    "max_epochs": (int, 60, "epoch budget"),
    "patience": (int, 10, "early-stopping patience on validation wMAPE"),
    "train_days": (int, 20, "days in the training split"),
    "val_days": (int, 4, "days in the validation split"),
    "test_days": (int, 4, "days in the test split"),
    "require_week_history": (bool, True, "restrict windows to days with a week of history"),
    "weekday_conditioned_ha": (bool, False, "condition the flow-average baseline on day type"),
    # artifact names, resolved inside --out unless absolute
    "transactions": (str, "transactions.csv", "transaction log file"),
    "dataset": (str, "dataset.odds", "dataset file"),
    "checkpoint": (str, "model.odmx", "checkpoint file"),
    "history": (str, "history.csv", "training history file"),
}


def _parse_bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def load_config(path):
    """Read a key=value config file, validating every key against SCHEMA."""
    values = {key: default for key, (_, default, _) in SCHEMA.items()}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = text.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = SCHEMA[key][0]
        try:
            values[key] = _parse_bool(raw) if kind is bool else kind(raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def write_config(values, path):
    with open(path, "w") as fh:
        for key in SCHEMA:
            value = values.get(key, SCHEMA[key][1])
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{key}={value}\n")


def _config_help():
    lines = ["config keys (key=value per line, # comments):"]
    for key, (kind, default, text) in SCHEMA.items():
        lines.append(f"  {key} ({kind.__name__}, default {default}): {text}")
    return "\n".join(lines)


def _resolve_seed(args, cfg):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("ODMIXER_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"ODMIXER_SEED={env!r} is not an integer") from None
    return cfg["seed"]


def _schedule(cfg):
    return ScheduleConfig(
        n=cfg["stations"],
        days=cfg["days"],
        intervals_per_day=cfg["intervals_per_day"],
        interval_minutes=cfg["interval_minutes"],
        service_start=cfg["service_start_minute"],
    )


def _model_config(cfg):
    return ModelConfig(
        n=cfg["stations"],
        horizon=cfg["horizon"],
        channels=cfg["channels"],
        layers=cfg["layers"],
        activation=cfg["activation"],
        use_omp=cfg["use_omp"],
        use_channel_mixer=cfg["use_channel_mixer"],
        use_origin_mixer=cfg["use_origin_mixer"],
        use_des_mixer=cfg["use_des_mixer"],
        use_multiview=cfg["use_multiview"],
        use_btl=cfg["use_btl"],
        use_prev_branch=cfg["use_prev_branch"],
    )


def _train_config(cfg, seed):
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        seed=seed,
        train_days=cfg["train_days"],
        val_days=cfg["val_days"],
        test_days=cfg["test_days"],
        require_week_history=cfg["require_week_history"],
    )


def _path(cfg, key, out_dir):
    p = Path(cfg[key])
    return p if p.is_absolute() else Path(out_dir) / p


def _load_dataset(cfg, out_dir):
    path = _path(cfg, "dataset", out_dir)
    if not path.exists():
        raise DataError(f"dataset file {path} not found (run synth + ingest first)")
    return load_dataset(path)


def _load_model(cfg, out_dir):
    path = _path(cfg, "checkpoint", out_dir)
    if not path.exists():
        raise DataError(f"checkpoint {path} not found (run train first)")
    return load_checkpoint(path)


# -- subcommands --------------------------------------------------------------


def cmd_synth(args, cfg, seed):
    spec = desk_spec(
        n=cfg["stations"],
        days=cfg["days"],
        intervals_per_day=cfg["intervals_per_day"],
        interval_minutes=cfg["interval_minutes"],
        seed=seed,
        rate_scale=cfg["rate_scale"],
        weekend_multiplier=cfg["weekend_multiplier"],
    )
    records = generate_synthetic(spec)
    out = _path(cfg, "transactions", args.out)
    write_transactions(records, out)
    print(f"wrote {len(records)} transactions to {out}")


def cmd_ingest(args, cfg, seed):
    path = _path(cfg, "transactions", args.out)
    if not path.exists():
        raise DataError(f"transaction log {path} not found (run synth first)")
    records = read_transactions(path)
    ds, report = build_dataset(records, _schedule(cfg))
    ds.check_identities()
    save_dataset(ds, _path(cfg, "dataset", args.out))
    report.write(Path(args.out) / "ingest-report.txt")
    print(f"ingested {report.accepted} records into {_path(cfg, 'dataset', args.out)}")
    print(str(report))


def cmd_train(args, cfg, seed):
    ds = _load_dataset(cfg, args.out)
    model = ODMixer(_model_config(cfg), dtype=np.float32, seed=seed)
    result = train(model, ds, _train_config(cfg, seed), history_path=_path(cfg, "history", args.out))
    save_checkpoint(model, _path(cfg, "checkpoint", args.out))
    print(
        f"trained {len(result.history)} epochs, best epoch {result.best_epoch} "
        f"(val wMAPE {result.best_val_wmape:.4f}); checkpoint at "
        f"{_path(cfg, 'checkpoint', args.out)}"
    )


def _eval_setup(args, cfg, seed):
    ds = _load_dataset(cfg, args.out)
    model = _load_model(cfg, args.out)
    tcfg = _train_config(cfg, seed)
    split = DaySplit.from_config(ds.days, tcfg)
    normalizer = fit_normalizer(ds, split)
    windows = select_test_windows(ds, model.config.horizon, split, tcfg.require_week_history)
    return ds, model, tcfg, split, normalizer, windows


def cmd_eval(args, cfg, seed):
    ds, model, tcfg, split, normalizer, windows = _eval_setup(args, cfg, seed)
    model_report = evaluate_model(model, ds, normalizer, windows)
    baseline = HistoricalAverage(ds, split.train, weekday_conditioned=cfg["weekday_conditioned_ha"])
    ha_report = evaluate_baseline(baseline, ds, windows)
    out = Path(args.out) / "metrics.csv"
    write_metrics_rows([("odmixer", model_report), ("ha", ha_report)], out)
    print(f"model: mae {model_report.mae:.4f} rmse {model_report.rmse:.4f} wmape {model_report.wmape_str()}")
    print(f"ha:    mae {ha_report.mae:.4f} rmse {ha_report.rmse:.4f} wmape {ha_report.wmape_str()}")
    print(f"wrote {out}")


def cmd_ablate(args, cfg, seed):
    ds = _load_dataset(cfg, args.out)
    if args.variants.strip() == "all":
        variants = list(ABLATION_VARIANTS)
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = run_ablation(ds, _model_config(cfg), _train_config(cfg, seed), variants)
    out = Path(args.out) / "ablation.csv"
    write_metrics_rows(rows, out)
    for name, report in rows:
        print(f"{name}: mae {report.mae:.4f} wmape {report.wmape_str()}")
    print(f"wrote {out}")


def cmd_robust(args, cfg, seed):
    ds, model, tcfg, split, normalizer, windows = _eval_setup(args, cfg, seed)
    clean = evaluate_model(model, ds, normalizer, windows)

    noisy_view = inject_noise(ds, args.noise_sigma, seed, split.test)
    noisy = evaluate_model(model, noisy_view, normalizer, windows)
    increment = relative_increment(clean, noisy)
    out = Path(args.out) / "robustness.csv"
    with open(out, "w") as fh:
        fh.write("row,mae,rmse,wmape\n")
        fh.write(f"clean,{clean.mae:.8f},{clean.rmse:.8f},{clean.wmape_str()}\n")
        fh.write(f"noise_sigma_{args.noise_sigma:g},{noisy.mae:.8f},{noisy.rmse:.8f},{noisy.wmape_str()}\n")
        deltas = ",".join(
            "undefined" if increment[k] is None else f"{100 * increment[k]:.4f}%"
            for k in ("mae", "rmse", "wmape")
        )
        fh.write(f"delta_errors,{deltas}\n")

    ratios = [float(r) for r in args.mask_ratios.split(",") if r.strip() != ""]
    mask_out = Path(args.out) / "masking.csv"
    with open(mask_out, "w") as fh:
        fh.write("mask_ratio,mae,rmse,wmape\n")
        for ratio in ratios:
            view = inject_mask(ds, ratio, seed, split.test)
            report = evaluate_model(model, view, normalizer, windows)
            fh.write(f"{ratio:g},{report.mae:.8f},{report.rmse:.8f},{report.wmape_str()}\n")
    print(f"noise +delta errors: {deltas}")
    print(f"wrote {out} and {mask_out}")


def _parse_grid(spec_text):
    """Grid spec like 'n=16,32,64;layers=5;channels=16;horizon=4'."""
    axes = {"n": [16, 32, 64], "layers": [5], "channels": [16], "horizon": [4]}
    if spec_text:
        for part in spec_text.split(";"):
            part = part.strip()
            if not part:
                continue
            key, _, raw = part.partition("=")
            key = key.strip()
            if key not in axes:
                raise ConfigError(f"unknown grid axis {key!r}; choose from {sorted(axes)}")
            try:
                axes[key] = [int(v) for v in raw.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"bad grid values for {key}: {raw!r}") from None
    return [
        (n, l, c, h)
        for n in axes["n"]
        for l in axes["layers"]
        for c in axes["channels"]
        for h in axes["horizon"]
    ]


def cmd_perf(args, cfg, seed):
    grid = _parse_grid(args.grid)
    if args.backend == "both":
        backends = backend.available()
    elif args.backend == "auto":
        backends = [backend.active_name()]
    else:
        backends = [args.backend]
    rows = perf_report(grid, backends=backends, seed=seed)
    out = Path(args.out) / "perf.csv"
    write_perf_report(rows, out)
    for r in rows:
        print(
            f"n={r.n} layers={r.layers} channels={r.channels} [{r.backend}] "
            f"forward {r.forward_ms:.2f} ms, train step {r.train_step_ms:.2f} ms, "
            f"{r.param_count} params"
        )
    print(f"wrote {out}")


def cmd_export_series(args, cfg, seed):
    pairs = []
    for token in args.pairs.split(","):
        token = token.strip()
        if not token:
            continue
        i, _, j = token.partition(":")
        try:
            pairs.append((int(i), int(j)))
        except ValueError:
            raise ConfigError(f"bad pair {token!r}; expected origin:destination") from None
    if not pairs:
        raise ConfigError("no pairs given; use --pairs i:j[,i:j...]")
    ds, model, tcfg, split, normalizer, windows = _eval_setup(args, cfg, seed)
    out = Path(args.out) / "series.csv"
    export_series(model, ds, normalizer, windows, pairs, out)
    print(f"wrote {len(pairs) * len(windows)} rows to {out}")


# -- entry point ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(
        prog="odmixer",
        description="Metro origin-destination forecasting pipeline.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key=value config file")
        p.add_argument("--out", default=".", help="output directory (default: cwd)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("synth", help="generate a synthetic transaction log")
    common(p)
    p = sub.add_parser("ingest", help="build the dataset file from a transaction log")
    common(p)
    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p = sub.add_parser("eval", help="evaluate the checkpoint and the flow-average baseline")
    common(p)
    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    common(p)
    p.add_argument(
        "--variants",
        default="all",
        help=f"comma list from {','.join(ABLATION_VARIANTS)} or 'all'",
    )
    p = sub.add_parser("robust", help="noise and masking robustness evaluation")
    common(p)
    p.add_argument("--noise-sigma", type=float, default=1.0, help="input noise std dev")
    p.add_argument(
        "--mask-ratios",
        default="0,0.1,0.2,0.3,0.5",
        help="comma list of input masking ratios",
    )
    p = sub.add_parser("perf", help="timing and parameter-count table")
    common(p)
    p.add_argument("--grid", default="", help="e.g. 'n=16,32,64;layers=5;channels=16'")
    p.add_argument(
        "--backend",
        default="auto",
        choices=["auto", "numpy", "cython", "both"],
        help="kernel backend(s) to time",
    )
    p = sub.add_parser("export-series", help="dump truth/prediction series per OD pair")
    common(p)
    p.add_argument("--pairs", required=True, help="comma list of origin:destination pairs")
    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "robust": cmd_robust,
    "perf": cmd_perf,
    "export-series": cmd_export_series,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        seed = _resolve_seed(args, cfg)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _HANDLERS[args.command](args, cfg, seed)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
