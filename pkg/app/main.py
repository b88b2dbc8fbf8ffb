"""s2scast command line: synth, train, predict, ensemble, evaluate and ablate."""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .config import PRESETS, load_run_config, save_run_config, settings, validate_run_config
from .crud import get_models
from .exceptions import ConfigError, DataError, MissingDaysError, S2SError, ShapeMismatchError, TaskFailedError
from .schemas import PerturbStrategy, RunConfig, TrainTaskResult
from .services.ensemble import SweepCase, best_sigma_per_lead, noise_scale_sweep, run_ensemble
from .services.grid import (
    Climatology,
    WeatherSeries,
    catalog_from_config,
    compute_climatology,
    epoch_day,
    spec_from_config,
    split_years,
    synth_dataset,
)
from .services.gridded_file import (
    load_split,
    read_gridded,
    split_path,
    write_gridded,
    write_manifest,
    write_series,
)
from .services.metrics import ALL_METRICS, continuity_stats, evaluate_forecast, report_frame, write_report
from .services.training import FIRST_DAY, LAST_DAY, forecast_range
from .worker.tasks import loss_path, train_lead_task

logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
log = logging.getLogger(__name__)

DESK = RunConfig()
WINDOW = LAST_DAY - FIRST_DAY + 1
TRAINED_VARIANTS = ("default", "no_noise", "no_clim", "no_noise_no_clim", "concat", "gate")
ENSEMBLE_VARIANTS = ("fln", "ic_perturb")


# --- Argument parsing helpers ---
def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from e


def parse_date(text: str) -> int:
    """Epoch day of an ISO date (or a bare integer day index)."""
    if text.lstrip("-").isdigit():
        return int(text)
    try:
        ts = pd.Timestamp(text)
    except ValueError as e:
        raise ConfigError(f"cannot parse date {text!r}") from e
    return epoch_day(ts.year, ts.month, ts.day)


def day_label(day: int) -> str:
    return pd.to_datetime(day, unit="D").strftime("%Y%m%d")


def parse_variants(text: str) -> List[Tuple[str, Optional[list]]]:
    """'default,no_clim,sigma:0,0.5,1,layers:1-2' -> [(name, args), ...]."""
    variants: List[Tuple[str, Optional[list]]] = []
    for token in (t.strip() for t in text.split(",") if t.strip()):
        try:
            if token.startswith("sigma:"):
                variants.append(("sigma", [float(token[6:])] if token[6:] else []))
            elif token.startswith("layers:"):
                spec = token[7:]
                if "-" in spec:
                    a, b = (int(v) for v in spec.split("-"))
                    layers = list(range(a, b + 1))
                else:
                    layers = [int(spec)]
                variants.append((f"layers_{spec}", layers))
            elif variants and variants[-1][0] == "sigma" and _is_float(token):
                variants[-1][1].append(float(token))
            elif token in TRAINED_VARIANTS or token in ENSEMBLE_VARIANTS:
                variants.append((token, None))
            else:
                raise ConfigError(f"unknown ablation variant {token!r}")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(f"malformed ablation variant {token!r}") from e
    return variants


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def run_config(args: argparse.Namespace) -> RunConfig:
    """The config file (on top of the preset) with command-line overrides applied."""
    config = load_run_config(args.config, args.preset)
    data = config.model_dump()
    if getattr(args, "seed", None) is not None:
        data["train"]["seed"] = args.seed
        data["ensemble"]["base_seed"] = args.seed
    if getattr(args, "leads", None):
        data["train"]["lead_times"] = parse_int_list(args.leads)
    for flag, section, key in (
        ("members", "ensemble", "members"),
        ("strategy", "ensemble", "strategy"),
        ("sigma", "ensemble", "sigma"),
        ("ic_amplitude", "ensemble", "ic_amplitude"),
    ):
        if getattr(args, flag, None) is not None:
            data[section][key] = getattr(args, flag)
    if getattr(args, "out", None):
        data["paths"]["data_dir" if args.command == "synth" else "output_dir"] = args.out
    return validate_run_config(data)


# --- Shared data access ---
def load_data(config: RunConfig) -> Tuple[WeatherSeries, Climatology]:
    """All available splits as one series, and the training-years climatology."""
    train = load_split(config.paths.data_dir, "train")
    parts = [train] + [
        load_split(config.paths.data_dir, name) for name in ("val", "test")
        if split_path(config.paths.data_dir, name).is_file()
    ]
    series = WeatherSeries(np.concatenate([p.days for p in parts]), np.concatenate([p.values for p in parts]))
    climatology = compute_climatology(train, split_years(config.grid.start_year, config.grid.years)["train"])
    return series, climatology


def window(series: WeatherSeries, first: int, count: int) -> np.ndarray:
    idx = np.searchsorted(series.days, first)
    if idx + count > len(series) or series.days[idx] != first or series.days[idx + count - 1] != first + count - 1:
        raise MissingDaysError(f"data does not cover days {day_label(first)}..{day_label(first + count - 1)}")
    return series.values[idx:idx + count].astype(np.float64)


def history_for(series: WeatherSeries, day: int, history: int) -> np.ndarray:
    return window(series, day - history + 1, history)


def truth_for(series: WeatherSeries, day: int) -> np.ndarray:
    return window(series, day + FIRST_DAY, WINDOW)


def default_day(config: RunConfig) -> int:
    test = split_years(config.grid.start_year, config.grid.years)["test"]
    return epoch_day(test.start) + config.train.history - 1


def evaluation_days(config: RunConfig, series: WeatherSeries, cases: int, stride: int = 7) -> List[int]:
    first = default_day(config)
    last = int(series.days[-1]) - LAST_DAY
    days = list(range(first, last + 1, stride))[:cases]
    if not days:
        raise MissingDaysError("the test split is too short for a single 15-45 day forecast")
    return days


# --- Commands ---
def cmd_synth(config: RunConfig, args: argparse.Namespace) -> int:
    spec, catalog = spec_from_config(config.grid), catalog_from_config(config.grid)
    series = synth_dataset(spec, catalog, config.grid.years, config.train.seed,
                           config.grid.start_year, config.grid.noise_amplitude)
    splits = split_years(config.grid.start_year, config.grid.years)
    data_dir = Path(config.paths.data_dir)
    for name, years in splits.items():
        if len(years):
            write_series(split_path(data_dir, name), series.select_years(years))
    write_manifest(data_dir / "manifest.txt", catalog, splits)
    save_run_config(config, data_dir / "run.toml")
    log.info(f"Synthetic splits written to {data_dir}: "
             + ", ".join(f"{k}={len(v)}y" for k, v in splits.items()))
    return 0


def train_all(config: RunConfig, resume: bool = False, steps: Optional[int] = None) -> List[TrainTaskResult]:
    payload = config.model_dump(mode="json")
    pending = [train_lead_task.delay(payload, K, resume, steps) for K in config.train.lead_times]
    results = [TrainTaskResult.model_validate(r.get()) for r in pending]
    for r in results:
        if r.status != "SUCCESS":
            raise TaskFailedError(r.error_type or "S2SError", r.exit_code or 1, f"PM_{r.lead}: {r.error}")
    return results


def cmd_train(config: RunConfig, args: argparse.Namespace) -> int:
    results = train_all(config, args.resume, args.steps)
    frames = [pd.read_csv(loss_path(config.paths.output_dir, r.lead)) for r in results]
    out = Path(config.paths.output_dir) / "losses.csv"
    pd.concat(frames, ignore_index=True).to_csv(out, index=False)
    for r in results:
        log.info(f"[PM_{r.lead}] step {r.steps} final loss {r.final_loss} -> {r.checkpoint}")
    return 0


def cmd_predict(config: RunConfig, args: argparse.Namespace) -> int:
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    models = get_models(config.paths.checkpoint_dir, config.train.lead_times)
    series, climatology = load_data(config)
    day = parse_date(args.date) if args.date else default_day(config)
    result = forecast_range(models, history_for(series, day, config.train.history), climatology, day,
                            config.train.lead_times)
    out = Path(config.paths.output_dir)
    write_gridded(out / f"forecast_{day_label(day)}.tqs", result.fields, first_day=day + FIRST_DAY)
    names = catalog_from_config(config.grid).channel_names
    continuity_stats(result.fields, result.days, names).to_csv(out / f"continuity_{day_label(day)}.csv", index=False)
    return 0


def ensemble_summary(members: np.ndarray, mean: np.ndarray, spread: np.ndarray, quantiles: np.ndarray,
                     levels: Sequence[float], names: Sequence[str], weights: np.ndarray) -> pd.DataFrame:
    """Latitude-weighted domain means per lead day, variable and statistic."""
    w = weights[:, None] / weights.mean()
    stats = {"mean": mean, "spread": spread}
    stats.update({f"q{a:g}": quantiles[i] for i, a in enumerate(levels)})
    rows = []
    for stat, field in stats.items():
        domain = (field * w).mean(axis=(-2, -1))  # T x K
        for t in range(domain.shape[0]):
            for k, name in enumerate(names):
                rows.append({"day": FIRST_DAY + t, "variable": name, "stat": stat, "value": domain[t, k]})
    return pd.DataFrame(rows, columns=["day", "variable", "stat", "value"])


def cmd_ensemble(config: RunConfig, args: argparse.Namespace) -> int:
    ens_cfg = config.ensemble
    models = get_models(config.paths.checkpoint_dir, config.train.lead_times)
    series, climatology = load_data(config)
    day = parse_date(args.date) if args.date else default_day(config)
    strategy = PerturbStrategy(kind=ens_cfg.strategy, sigma=ens_cfg.sigma, ic_amplitude=ens_cfg.ic_amplitude)
    forecast = run_ensemble(models, history_for(series, day, config.train.history), climatology, day,
                            strategy, ens_cfg.members, ens_cfg.base_seed, config.train.lead_times, ens_cfg.quantiles)
    out = Path(config.paths.output_dir) / f"ensemble_{day_label(day)}"
    for m in range(forecast.M):
        write_gridded(out / f"member_{m:02d}.tqs", forecast.members[m], first_day=day + FIRST_DAY)
    write_gridded(out / "mean.tqs", forecast.mean, first_day=day + FIRST_DAY)
    write_gridded(out / "spread.tqs", forecast.spread, first_day=day + FIRST_DAY)
    grid, catalog = spec_from_config(config.grid), catalog_from_config(config.grid)
    summary = ensemble_summary(forecast.members, forecast.mean, forecast.spread, forecast.quantiles,
                               forecast.levels, catalog.channel_names, grid.weights)
    summary.to_csv(out / "stats.csv", index=False)
    return 0


def read_forecast(path: Path) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], int]:
    """(deterministic frames or None, member stack or None, epoch day of frame 0)."""
    if path.is_dir():
        files = sorted(path.glob("member_*.tqs"))
        if not files:
            raise DataError(f"no member files in {path}")
        loaded = [read_gridded(f) for f in files]
        return None, np.stack([f for f, _, _ in loaded]), int(loaded[0][1])
    frames, first_day, _ = read_gridded(path)
    return frames, None, int(first_day)


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> int:
    forecast, members, first_day = read_forecast(Path(args.forecast))
    if args.truth:
        truth, _, _ = read_gridded(args.truth)
    else:
        series, _ = load_data(config)
        truth = window(series, first_day, WINDOW)
    frames = forecast if forecast is not None else members[0]
    if frames.shape[0] != WINDOW or truth.shape != frames.shape:
        raise ShapeMismatchError(f"forecast {frames.shape} and truth {truth.shape} must both cover days 15-45")
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    report = evaluate_forecast(
        truth[None],
        spec_from_config(config.grid),
        catalog_from_config(config.grid),
        forecast=None if forecast is None else forecast[None],
        members=None if members is None else members[None],
        leads=config.train.lead_times,
        metrics=metrics,
        levels=config.ensemble.quantiles,
        epsilon=config.ensemble.rqe_epsilon,
        metadata={"forecast": str(args.forecast), "init_day": day_label(first_day - FIRST_DAY),
                  "seed": str(config.train.seed)},
    )
    write_report(report, Path(config.paths.output_dir) / "eval.csv")
    return 0


def variant_config(config: RunConfig, name: str, layers: Optional[List[int]] = None) -> RunConfig:
    data = config.model_dump()
    if name in ("no_noise", "no_noise_no_clim"):
        data["model"]["noise"] = False
    if name in ("no_clim", "no_noise_no_clim"):
        data["model"]["fusion"] = "none"
    if name in ("concat", "gate"):
        data["model"]["fusion"] = name
    if layers is not None:
        data["model"]["noise_layers"] = layers
    data["paths"]["checkpoint_dir"] = str(Path(config.paths.checkpoint_dir) / "ablate" / name)
    data["paths"]["output_dir"] = str(Path(config.paths.output_dir) / "ablate" / name)
    return RunConfig.model_validate(data)


def _rows(variant: str, report, rename: Optional[str] = None) -> List[Dict]:
    frame = report_frame(report)
    if rename:
        frame["metric"] = rename
    frame.insert(0, "variant", variant)
    return frame.to_dict("records")


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> int:
    variants = parse_variants(args.variants)
    trained = [(n, a) for n, a in variants if n in TRAINED_VARIANTS or n.startswith("layers_")]
    if any(n in ENSEMBLE_VARIANTS or n == "sigma" for n, _ in variants) and "default" not in dict(trained):
        trained.insert(0, ("default", None))

    series, climatology = load_data(config)
    days = evaluation_days(config, series, args.cases)
    histories = np.stack([history_for(series, d, config.train.history) for d in days])
    truth = np.stack([truth_for(series, d) for d in days])
    grid, catalog = spec_from_config(config.grid), catalog_from_config(config.grid)
    leads, ens = config.train.lead_times, config.ensemble
    layer_noise = PerturbStrategy(kind="layer_noise", sigma=ens.sigma)

    def ensemble_rows(variant: str, models, strategy: PerturbStrategy) -> List[Dict]:
        means = np.stack([run_ensemble(models, h, climatology, d, strategy, ens.members, ens.base_seed, leads).mean
                          for h, d in zip(histories, days)])
        report = evaluate_forecast(truth, grid, catalog, forecast=means, leads=leads, metrics=["rmse"])
        return _rows(variant, report, rename="ens_rmse")

    rows: List[Dict] = []
    family: Dict[str, dict] = {}
    for name, layers in trained:
        vconfig = variant_config(config, name, layers)
        log.info(f"[Ablate] training variant {name}")
        train_all(vconfig, steps=args.steps)
        models = get_models(vconfig.paths.checkpoint_dir, leads)
        family[name] = models
        forecasts = np.stack([forecast_range(models, h, climatology, d, leads).fields
                              for h, d in zip(histories, days)])
        report = evaluate_forecast(truth, grid, catalog, forecast=forecasts, leads=leads, metrics=["rmse", "acc"])
        rows += _rows(name, report)
        if vconfig.model.noise:
            rows += ensemble_rows(name, models, layer_noise)

    out = Path(config.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, sigmas in variants:
        if name == "fln":
            rows += ensemble_rows(name, family["default"], PerturbStrategy(kind="fixed_layer_noise", sigma=ens.sigma))
        elif name == "ic_perturb":
            rows += ensemble_rows(name, family["default"],
                                  PerturbStrategy(kind="ic_perturb", sigma=0.0, ic_amplitude=ens.ic_amplitude))
        elif name == "sigma":
            cases = [SweepCase(h, t, d) for h, t, d in zip(histories, truth, days)]
            sweep = noise_scale_sweep(family["default"], cases, climatology, grid, catalog,
                                      sigmas or ens.sweep_sigmas, ens.members, ens.base_seed, leads=leads)
            sweep.to_csv(out / "sweep.csv", index=False)
            best_sigma_per_lead(sweep).to_csv(out / "best_sigma.csv", index=False)

    frame = pd.DataFrame(rows, columns=["variant", "variable", "lead", "metric", "value"])
    frame.to_csv(out / "ablation.csv", index=False)
    log.info(f"[Ablate] {len(frame)} rows over {len(days)} cases written to {out / 'ablation.csv'}")
    return 0


# --- Parser ---
# Config-backed flags default to SUPPRESS so an absent flag never overrides
# the config file; their help names the config key and the desk-preset value.
def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", default=None,
                   help="run-config TOML; keys it omits come from the preset (default: preset only)")
    p.add_argument("--preset", choices=PRESETS, default="desk", help="base configuration preset (default: %(default)s)")
    p.add_argument("--seed", metavar="N", type=int, default=argparse.SUPPRESS,
                   help=f"run seed for data, initialisation and ensembles (default: config train.seed, {DESK.train.seed})")
    p.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS,
                   help=f"output directory (default: config paths.output_dir, {DESK.paths.output_dir}; "
                        f"for synth config paths.data_dir, {DESK.paths.data_dir})")


def _leads_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--leads", metavar="LIST", default=argparse.SUPPRESS,
                   help=f"comma-separated lead times in days (default: config train.lead_times, "
                        f"{','.join(map(str, DESK.train.lead_times))})")


def _ensemble_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--members", metavar="M", type=int, default=argparse.SUPPRESS,
                   help=f"ensemble size (default: config ensemble.members, {DESK.ensemble.members})")
    p.add_argument("--sigma", metavar="X", type=float, default=argparse.SUPPRESS,
                   help=f"layer-noise scale (default: config ensemble.sigma, {DESK.ensemble.sigma})")


def _steps_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", metavar="N", type=int, default=None,
                   help="stop each training after N more steps (default: run to train.total_steps)")


def _date_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--date", metavar="DATE", default=None,
                   help="initialisation date YYYY-MM-DD (default: first usable day of the test split)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2scast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate the synthetic train/val/test splits")
    _config_flags(p)

    p = sub.add_parser("train", help="train one PM_K model per lead time")
    _config_flags(p)
    _leads_flag(p)
    _steps_flag(p)
    p.add_argument("--resume", action="store_true", help="continue from existing checkpoints (default: off)")

    p = sub.add_parser("predict", help="deterministic forecast of lead days 15 to 45")
    _config_flags(p)
    _leads_flag(p)
    _date_flag(p)
    p.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels (default: off)")

    p = sub.add_parser("ensemble", help="ensemble forecast with member and statistics files")
    _config_flags(p)
    _leads_flag(p)
    _ensemble_flags(p)
    p.add_argument("--strategy", choices=("layer_noise", "fixed_layer_noise", "ic_perturb"), default=argparse.SUPPRESS,
                   help=f"perturbation strategy (default: config ensemble.strategy, {DESK.ensemble.strategy})")
    p.add_argument("--ic-amplitude", dest="ic_amplitude", metavar="X", type=float, default=argparse.SUPPRESS,
                   help=f"input perturbation in training std units (default: config ensemble.ic_amplitude, "
                        f"{DESK.ensemble.ic_amplitude})")
    _date_flag(p)

    p = sub.add_parser("evaluate", help="score a forecast file or ensemble directory")
    _config_flags(p)
    _leads_flag(p)
    p.add_argument("--forecast", metavar="PATH", required=True, help="forecast file or ensemble directory (required)")
    p.add_argument("--truth", metavar="PATH", default=None,
                   help="truth file over the same days (default: read from the data splits)")
    p.add_argument("--metrics", metavar="LIST", default=None,
                   help=f"comma-separated subset of {','.join(ALL_METRICS)} (default: all)")

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    _config_flags(p)
    _leads_flag(p)
    _ensemble_flags(p)
    _steps_flag(p)
    p.add_argument("--variants", metavar="LIST", default="default,no_noise,no_clim,no_noise_no_clim",
                   help="comma-separated variants among default, no_noise, no_clim, no_noise_no_clim, concat, gate, "
                        "fln, ic_perturb, layers:A-B, sigma:X,Y,... (default: %(default)s)")
    p.add_argument("--cases", metavar="N", type=int, default=3,
                   help="initialisation dates drawn from the test split (default: %(default)s)")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def error_line(e: BaseException, exit_code: int) -> str:
    name = getattr(e, "error_type", type(e).__name__)
    message = " ".join(str(e).split()).replace('"', "'")
    return f'error={name} exit={exit_code} message="{message}"'


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(settings.threads)
    try:
        config = run_config(args)
        return COMMANDS[args.command](config, args)
    except S2SError as e:
        log.debug(f"{args.command} failed", exc_info=True)
        print(error_line(e, e.exit_code), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(error_line(e, DataError.exit_code), file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
