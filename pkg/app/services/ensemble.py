"""Ensemble generation (learnable layer noise, fixed-layer noise, initial-condition
perturbation), ensemble statistics and noise-scale sweeps."""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from ..exceptions import ConfigError, MissingModelError
from ..models.forecaster import S2SForecaster
from ..schemas import DEFAULT_LEADS, DEFAULT_QUANTILES, NoiseConfig, PerturbStrategy
from .grid import Climatology, GridSpec, VariableCatalog
from .metrics import rmse
from .training import FIRST_DAY, collect_range

log = logging.getLogger(__name__)

STRATEGIES = ("layer_noise", "fixed_layer_noise", "ic_perturb")


def ensemble_stats(members: np.ndarray, levels: Sequence[float] = DEFAULT_QUANTILES) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise mean, population std and linearly interpolated quantiles over
    the member axis (axis 0)."""
    members = np.asarray(members, dtype=np.float64)
    if members.ndim == 0 or members.shape[0] < 1:
        raise ConfigError("ensemble statistics need at least one member")
    mean = members.mean(axis=0)
    spread = members.std(axis=0)
    quantiles = np.quantile(members, list(levels), axis=0, method="linear")
    return mean, spread, quantiles


@dataclass
class EnsembleForecast:
    members: np.ndarray     # M x ...
    mean: np.ndarray
    spread: np.ndarray
    quantiles: np.ndarray   # A x ...
    levels: Tuple[float, ...]

    @classmethod
    def from_members(cls, members: np.ndarray, levels: Sequence[float] = DEFAULT_QUANTILES) -> "EnsembleForecast":
        mean, spread, quantiles = ensemble_stats(members, levels)
        return cls(np.asarray(members, dtype=np.float64), mean, spread, quantiles, tuple(levels))

    @property
    def M(self) -> int:
        return self.members.shape[0]


def perturb_history(history_std: np.ndarray, members: int, amplitude: float, base_seed: int) -> np.ndarray:
    """M x h x K x H x W standardized inputs; member 0 is left unperturbed,
    member m adds amplitude * N(0, 1) from generator base_seed + m."""
    out = np.repeat(np.asarray(history_std, dtype=np.float64)[None], members, axis=0)
    for m in range(1, members):
        gen = torch.Generator().manual_seed(base_seed + m)
        noise = torch.randn(out.shape[1:], generator=gen, dtype=torch.float64).numpy()
        out[m] = out[m] + amplitude * noise
    return out


def member_segments(
    model: S2SForecaster,
    history: np.ndarray,
    clim: np.ndarray,
    day: int,
    strategy: PerturbStrategy,
    members: int,
    base_seed: int,
) -> np.ndarray:
    """Raw-unit M x S x K x H x W segment for one lead model."""
    if strategy.kind not in STRATEGIES:
        raise ConfigError(f"unknown perturbation strategy {strategy.kind!r}")
    norm = model.normalizer
    history_std, clim_std = norm.standardize(history), norm.standardize(clim)
    if strategy.kind == "ic_perturb":
        batch = perturb_history(history_std, members, strategy.ic_amplitude, base_seed)
        out = model.run(batch, clim_std, day, NoiseConfig(mode="off"))
    else:
        out = model.ensemble_forward(
            history_std, clim_std, day, members, strategy.sigma, base_seed,
            enabled_layers=strategy.enabled_layers,
            fixed_scale=strategy.kind == "fixed_layer_noise",
        )
    return norm.destandardize(out)


def run_ensemble(
    models: Mapping[int, S2SForecaster],
    history: np.ndarray,
    climatology: Climatology,
    day: int,
    strategy: PerturbStrategy,
    members: int,
    base_seed: int = 0,
    leads: Iterable[int] = DEFAULT_LEADS,
    levels: Sequence[float] = DEFAULT_QUANTILES,
) -> EnsembleForecast:
    """Members over days 15..45 (M x 31 x K x H x W) from raw inputs."""
    if members < 1:
        raise ConfigError(f"ensemble needs at least one member, got {members}")
    leads = list(leads)
    for K in leads:
        if K not in models:
            raise MissingModelError(K)
    segment = models[leads[0]].segment

    def run(K: int) -> np.ndarray:
        clim = climatology.lookup(day + K - segment // 2)
        seg = member_segments(models[K], history, clim, day, strategy, members, base_seed)
        return np.moveaxis(seg, 0, 1)

    window = collect_range(leads, run, segment)
    log.info(f"Ensemble of {members} members ({strategy.kind}, sigma={strategy.sigma}, "
             f"ic_amplitude={strategy.ic_amplitude}) over days {window.days[0]}-{window.days[-1]}")
    return EnsembleForecast.from_members(np.moveaxis(window.fields, 1, 0), levels)


@dataclass
class SweepCase:
    history: np.ndarray   # raw h x K x H x W
    truth: np.ndarray     # raw 31 x K x H x W, days 15..45
    day: int


def noise_scale_sweep(
    models: Mapping[int, S2SForecaster],
    cases: Sequence[SweepCase],
    climatology: Climatology,
    grid: GridSpec,
    catalog: VariableCatalog,
    sigmas: Sequence[float],
    members: int,
    base_seed: int = 0,
    kind: str = "layer_noise",
    leads: Iterable[int] = DEFAULT_LEADS,
) -> pd.DataFrame:
    """RMSE of the ensemble mean per (sigma, lead, variable). With
    ``kind="ic_perturb"`` the sigmas are input-perturbation amplitudes."""
    leads = list(leads)
    rows: List[Dict] = []
    for sigma in sigmas:
        strategy = (PerturbStrategy(kind=kind, sigma=0.0, ic_amplitude=sigma) if kind == "ic_perturb"
                    else PerturbStrategy(kind=kind, sigma=sigma))
        means = np.stack([
            run_ensemble(models, c.history, climatology, c.day, strategy, members, base_seed, leads).mean
            for c in cases
        ])
        truth = np.stack([c.truth for c in cases])
        for K in leads:
            i = K - FIRST_DAY
            for k, name in enumerate(catalog.channel_names):
                rows.append({
                    "sigma": sigma,
                    "lead": K,
                    "variable": name,
                    "rmse_ensemble_mean": rmse(means[:, i, k], truth[:, i, k], grid.weights),
                })
        log.info(f"Sweep {kind} sigma={sigma} done over {len(cases)} cases")
    return pd.DataFrame(rows, columns=["sigma", "lead", "variable", "rmse_ensemble_mean"])


def best_sigma_per_lead(sweep: pd.DataFrame, variables: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """argmin-sigma per lead of the variable-averaged ensemble-mean RMSE."""
    frame = sweep if variables is None else sweep[sweep["variable"].isin(variables)]
    table = frame.groupby(["lead", "sigma"], as_index=False)["rmse_ensemble_mean"].mean()
    best = table.loc[table.groupby("lead")["rmse_ensemble_mean"].idxmin()].reset_index(drop=True)
    for row in best.itertuples():
        log.info(f"Lead {row.lead}: best sigma {row.sigma} (rmse {row.rmse_ensemble_mean:.4f}); "
                 f"expected optimum near 1.0")
    return best.rename(columns={"sigma": "best_sigma"})
