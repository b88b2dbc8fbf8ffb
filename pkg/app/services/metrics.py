"""Deterministic and probabilistic verification metrics and report building."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import ConfigError, MissingDaysError, ShapeMismatchError, UndefinedMetricError
from ..schemas import DEFAULT_LEADS, DEFAULT_QUANTILES, EvalReport, EvalRow
from .grid import GridSpec, VariableCatalog

log = logging.getLogger(__name__)

DETERMINISTIC_METRICS = ("rmse", "acc", "r2", "mae", "bias")
PROBABILISTIC_METRICS = ("crps", "sme", "rqe")
ALL_METRICS = DETERMINISTIC_METRICS + PROBABILISTIC_METRICS
CONTINUITY_WINDOWS = tuple((a, a + 5) for a in range(15, 45, 5))


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs truth {truth.shape}")
    return pred, truth


def _fields(pred, truth, weights) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pred, truth = _pair(pred, truth)
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    weights = np.asarray(weights, dtype=np.float64)
    if pred.ndim != 3 or weights.shape != (pred.shape[1],):
        raise ShapeMismatchError(f"{weights.shape} latitude weights for N x H x W fields of shape {pred.shape}")
    return pred, truth, weights[None, :, None]


def rmse(pred, truth, weights) -> float:
    """Per-sample latitude-weighted spatial RMSE, averaged over samples."""
    pred, truth, w = _fields(pred, truth, weights)
    per_sample = np.sqrt((w * (pred - truth) ** 2).mean(axis=(1, 2)))
    return float(per_sample.mean())


def acc(pred, truth, climatology, weights) -> float:
    """Latitude-weighted anomaly correlation against ``climatology`` (H x W or
    N x H x W), summed over every sample and cell."""
    pred, truth, w = _fields(pred, truth, weights)
    clim = np.broadcast_to(np.asarray(climatology, dtype=np.float64), pred.shape)
    fa, ta = pred - clim, truth - clim
    denom = np.sqrt((w * fa ** 2).sum() * (w * ta ** 2).sum())
    if denom == 0:
        raise UndefinedMetricError("ACC undefined: zero anomaly variance")
    return float((w * fa * ta).sum() / denom)


def r2_mae_bias(pred, truth) -> Tuple[float, float, float]:
    pred, truth = _pair(pred, truth)
    pred, truth = pred.ravel(), truth.ravel()
    if truth.size < 2:
        raise ShapeMismatchError("R2 needs at least two values")
    ss_tot = ((truth - truth.mean()) ** 2).sum()
    if ss_tot == 0:
        raise UndefinedMetricError("R2 undefined: truth has zero variance")
    r2 = 1.0 - ((truth - pred) ** 2).sum() / ss_tot
    return float(r2), mae(pred, truth), bias(pred, truth)


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.abs(truth - pred).mean())


def bias(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float((pred - truth).mean())


def crps(members, y) -> Union[float, np.ndarray]:
    """Empirical-ensemble CRPS along axis 0: mean |x - y| minus half the mean
    pairwise member distance."""
    x = np.sort(np.asarray(members, dtype=np.float64), axis=0)
    y = np.asarray(y, dtype=np.float64)
    M = x.shape[0]
    if M < 1:
        raise ShapeMismatchError("CRPS needs at least one member")
    skill = np.abs(x - y).mean(axis=0)
    # sum_{m,m'} |x_m - x_m'| = 2 * sum_i (2i - M - 1) x_(i) over sorted members
    rank = (2.0 * np.arange(1, M + 1) - M - 1).reshape((M,) + (1,) * (x.ndim - 1))
    spread = (rank * x).sum(axis=0) / M ** 2
    out = skill - spread
    return float(out) if np.ndim(out) == 0 else out


def sme(members, y) -> float:
    """Mean over cases of (population spread - |y - ensemble mean|); members M x N."""
    x = np.asarray(members, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise UndefinedMetricError(f"SME needs at least 2 members, got {x.shape[0]}")
    y = np.broadcast_to(y, x.shape[1:])
    return float((x.std(axis=0) - np.abs(y - x.mean(axis=0))).mean())


@dataclass
class RQEResult:
    value: float
    evaluated: int
    skipped: int


def rqe(quantiles, y, weights: Optional[Sequence[float]] = None, epsilon: float = 1e-6) -> RQEResult:
    """sum_k w_k |(q_k - y) / y| averaged over cases; quantiles A x N. Cases with
    |y| <= epsilon are skipped and counted."""
    q = np.asarray(quantiles, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if q.ndim == 1:
        q = q[:, None]
    q = q.reshape(q.shape[0], -1)
    y = np.broadcast_to(y.ravel(), q.shape[1:]) if y.size == 1 else y.ravel()
    if y.shape != q.shape[1:]:
        raise ShapeMismatchError(f"{q.shape[0]} x {y.size} quantiles expected, got {q.shape}")
    w = np.full(q.shape[0], 1.0 / q.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (q.shape[0],) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError("RQE weights must match the quantile levels and sum to 1")
    valid = np.abs(y) > epsilon
    skipped = int((~valid).sum())
    if not valid.any():
        raise UndefinedMetricError(f"RQE undefined: all {skipped} observations within {epsilon} of zero")
    per_case = (w[:, None] * np.abs((q[:, valid] - y[valid]) / y[valid])).sum(axis=0)
    if skipped:
        log.warning(f"RQE skipped {skipped} near-zero observations")
    return RQEResult(float(per_case.mean()), int(valid.sum()), skipped)


def continuity_stats(fields: np.ndarray, days: Sequence[int], names: Sequence[str]) -> pd.DataFrame:
    """Mean, std and max of |field(d+1) - field(d)| per variable over the lead
    windows 15-20 ... 40-45; fields is T x K x H x W for contiguous ``days``."""
    fields = np.asarray(fields, dtype=np.float64)
    days = np.asarray(days)
    if fields.shape[0] != len(days) or fields.shape[1] != len(names):
        raise ShapeMismatchError(f"fields {fields.shape} do not match {len(days)} days and {len(names)} variables")
    if np.any(np.diff(days) != 1):
        raise MissingDaysError("continuity statistics need a contiguous day sequence")
    diffs = np.abs(np.diff(fields, axis=0))  # diffs[i] is day i -> i+1
    rows = []
    for k, name in enumerate(names):
        for a, b in CONTINUITY_WINDOWS:
            sel = (days[:-1] >= a) & (days[:-1] < b)
            if not sel.any():
                raise MissingDaysError(f"no days in window {a}-{b}")
            chunk = diffs[sel, k]
            rows.append({"variable": name, "window": f"{a}-{b}",
                         "mean": chunk.mean(), "std": chunk.std(), "max": chunk.max()})
    return pd.DataFrame(rows, columns=["variable", "window", "mean", "std", "max"])


def _parse_metrics(metrics: Optional[Iterable[str]]) -> List[str]:
    chosen = list(metrics) if metrics else list(ALL_METRICS)
    unknown = [m for m in chosen if m not in ALL_METRICS]
    if unknown:
        raise ConfigError(f"unknown metrics {unknown}; expected a subset of {', '.join(ALL_METRICS)}")
    return chosen


def evaluate_forecast(
    truth: np.ndarray,
    grid: GridSpec,
    catalog: VariableCatalog,
    forecast: Optional[np.ndarray] = None,
    members: Optional[np.ndarray] = None,
    leads: Iterable[int] = DEFAULT_LEADS,
    metrics: Optional[Iterable[str]] = None,
    levels: Sequence[float] = DEFAULT_QUANTILES,
    epsilon: float = 1e-6,
    first_day: int = 15,
    metadata: Optional[Dict[str, str]] = None,
) -> EvalReport:
    """Report per (variable, lead) for N cases.

    truth and forecast are N x T x K x H x W (T lead days from ``first_day``);
    members is N x M x T x K x H x W. Deterministic scores use the forecast, or
    the ensemble mean when only members are given. Cells where a metric is
    undefined are left out and counted in the metadata.
    """
    chosen = _parse_metrics(metrics)
    truth = np.asarray(truth, dtype=np.float64)
    if members is not None:
        members = np.asarray(members, dtype=np.float64)
        if forecast is None:
            forecast = members.mean(axis=1)
    if forecast is None:
        raise ConfigError("evaluation needs a forecast or ensemble members")
    forecast = np.asarray(forecast, dtype=np.float64)
    if forecast.shape != truth.shape:
        raise ShapeMismatchError(f"forecast {forecast.shape} vs truth {truth.shape}")
    if members is not None and members.shape[:1] + members.shape[2:] != truth.shape:
        raise ShapeMismatchError(f"members {members.shape} vs truth {truth.shape}")

    # Anomaly reference: the test-set time mean of the truth.
    clim = truth.mean(axis=(0, 1))
    weights = grid.weights
    skipped: Dict[str, int] = {}
    rows: List[EvalRow] = []

    def add(name: str, lead: int, metric: str, fn):
        try:
            rows.append(EvalRow(variable=name, lead=lead, metric=metric, value=fn()))
        except UndefinedMetricError as e:
            skipped[metric] = skipped.get(metric, 0) + 1
            log.debug(f"{metric} undefined for {name} lead {lead}: {e}")

    for lead in leads:
        i = lead - first_day
        if not 0 <= i < truth.shape[1]:
            raise ShapeMismatchError(f"lead {lead} outside the {truth.shape[1]}-day forecast window")
        for k, name in enumerate(catalog.channel_names):
            f, y = forecast[:, i, k], truth[:, i, k]
            if "rmse" in chosen:
                add(name, lead, "rmse", lambda: rmse(f, y, weights))
            if "acc" in chosen:
                add(name, lead, "acc", lambda: acc(f, y, clim[k], weights))
            if "r2" in chosen:
                add(name, lead, "r2", lambda: r2_mae_bias(f, y)[0])
            if "mae" in chosen:
                add(name, lead, "mae", lambda: mae(f, y))
            if "bias" in chosen:
                add(name, lead, "bias", lambda: bias(f, y))
            if members is None:
                continue
            x = members[:, :, i, k]  # N x M x H x W
            ens = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1)
            if "crps" in chosen:
                add(name, lead, "crps", lambda: float(np.mean(crps(ens, y.ravel()))))
            if "sme" in chosen:
                add(name, lead, "sme", lambda: sme(ens, y.ravel()))
            if "rqe" in chosen:
                def score_rqe():
                    result = rqe(np.quantile(ens, list(levels), axis=0), y.ravel(), epsilon=epsilon)
                    skipped["rqe_cells"] = skipped.get("rqe_cells", 0) + result.skipped
                    return result.value
                add(name, lead, "rqe", score_rqe)

    meta = dict(metadata or {})
    meta.update({f"skipped_{m}": str(n) for m, n in skipped.items()})
    return EvalReport(rows=rows, metadata=meta)


def report_frame(report: EvalReport) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in report.rows], columns=["variable", "lead", "metric", "value"])


def write_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    report_frame(report).to_csv(path, index=False)
    if report.metadata:
        meta = path.with_suffix(".meta.csv")
        pd.DataFrame(sorted(report.metadata.items()), columns=["key", "value"]).to_csv(meta, index=False)
    log.info(f"Evaluation report with {len(report.rows)} rows written to {path}")
    return path
