"""Latitude-weighted training of the per-lead models and range assembly."""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.utils.data import Dataset

from ..exceptions import (
    ConfigError,
    DivergenceError,
    InsufficientDataError,
    MissingModelError,
    NonFiniteError,
    ShapeMismatchError,
)
from ..models.forecaster import S2SForecaster, build_model
from ..schemas import DEFAULT_LEADS, NoiseConfig, RunConfig, TrainSection
from .grid import Climatology, Normalizer, WeatherSeries, calendar_index, latitude_weights

log = logging.getLogger(__name__)

FIRST_DAY = 15
LAST_DAY = 45


def weighted_mse(pred, truth, weights) -> torch.Tensor:
    """Mean over (..., V, H, W) of L(i) * (pred - truth)^2."""
    pred = torch.as_tensor(pred)
    truth = torch.as_tensor(truth, dtype=pred.dtype)
    weights = torch.as_tensor(weights, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"prediction {tuple(pred.shape)} vs truth {tuple(truth.shape)}")
    if pred.dim() < 3 or weights.shape != (pred.shape[-2],):
        raise ShapeMismatchError(f"{tuple(weights.shape)} latitude weights for fields of shape {tuple(pred.shape)}")
    if not (torch.isfinite(pred).all() and torch.isfinite(truth).all()):
        raise NonFiniteError("non-finite values in loss inputs")
    return (weights[:, None] * (pred - truth) ** 2).mean()


def lr_schedule(step: int, config: TrainSection) -> float:
    """Linear warmup to ``lr``, then cosine annealing to zero at ``total_steps``."""
    if not 0 <= step <= config.total_steps:
        raise ConfigError(f"step {step} outside [0, {config.total_steps}]")
    if step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model: torch.nn.Module, config: TrainSection) -> torch.optim.AdamW:
    """AdamW with weight decay on every parameter except the positional embeddings."""
    decay, exempt = [], []
    for name, p in model.named_parameters():
        (exempt if "pos_" in name else decay).append(p)
    groups = [
        {"params": decay, "weight_decay": config.weight_decay},
        {"params": exempt, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=config.lr, betas=(config.beta1, config.beta2))


def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def optimizer_step(optimizer: torch.optim.Optimizer) -> bool:
    """Applies the update unless a gradient is non-finite; returns whether it did."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                log.warning("Rejected optimizer step: non-finite gradient")
                optimizer.zero_grad(set_to_none=True)
                return False
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return True


class SegmentDataset(Dataset):
    """(history, climatology, target) samples for one lead.

    Sample ``i`` is initialized at array index ``t``: the history reads indices
    t-h+1..t and the target reads t+K-S+1..t+K. Every read is appended to
    ``access_log`` as (t, history indices, target indices).
    """

    def __init__(
        self,
        values: np.ndarray,
        days: np.ndarray,
        clim_per_day: Callable[[int], np.ndarray],
        lead: int,
        history: int = 5,
        segment: int = 5,
    ):
        if values.shape[0] != len(days):
            raise ShapeMismatchError(f"{values.shape[0]} frames for {len(days)} days")
        if len(days) > 1 and np.any(np.diff(days) != 1):
            raise InsufficientDataError("training days must be contiguous")
        self.values = values
        self.days = np.asarray(days)
        self.clim_per_day = clim_per_day
        self.lead = lead
        self.history = history
        self.segment = segment
        self.starts = np.arange(history - 1, len(days) - lead)
        if len(self.starts) == 0:
            raise InsufficientDataError(
                f"[PM_{lead}] {len(days)} days cannot hold a {history}-day history plus lead {lead}"
            )
        self.access_log: List[Tuple[int, range, range]] = []

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, i: int) -> Dict[str, np.ndarray]:
        t = int(self.starts[i])
        hist = range(t - self.history + 1, t + 1)
        target = range(t + self.lead - self.segment + 1, t + self.lead + 1)
        self.access_log.append((t, hist, target))
        centre_day = int(self.days[t]) + self.lead - self.segment // 2
        return {
            "history": self.values[hist.start:hist.stop],
            "clim": self.clim_per_day(centre_day),
            "day": int(self.days[t]),
            "target": self.values[target.start:target.stop],
        }


def sample_batch(dataset: SegmentDataset, gen: torch.Generator, batch_size: int, dtype: torch.dtype):
    """Uniformly sampled start dates, stacked into tensors."""
    idx = torch.randint(len(dataset), (batch_size,), generator=gen).tolist()
    items = [dataset[i] for i in idx]
    stack = lambda key: torch.as_tensor(np.stack([it[key] for it in items]), dtype=dtype)
    return stack("history"), stack("clim"), torch.tensor([it["day"] for it in items]), stack("target")


def standardized_climatology(climatology: Climatology, normalizer: Normalizer) -> Callable[[int], np.ndarray]:
    per_day = normalizer.standardize(climatology.per_day)
    return lambda day: per_day[calendar_index(day)]


@dataclass
class TrainResult:
    lead: int
    model: S2SForecaster
    optimizer: torch.optim.AdamW
    step: int
    losses: List[Dict[str, float]] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]["loss"]

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.losses, columns=["lead", "step", "loss", "lr"])


def train_lead_model(
    series: WeatherSeries,
    climatology: Climatology,
    lead: int,
    config: RunConfig,
    normalizer: Optional[Normalizer] = None,
    resume: Optional[TrainResult] = None,
    steps: Optional[int] = None,
) -> TrainResult:
    """Trains PM_K on the training split. ``resume`` continues a previous run
    (parameters, optimizer moments and step counter); ``steps`` stops early."""
    cfg = config.train
    normalizer = normalizer or Normalizer.fit(series.values)
    data = normalizer.standardize(series.values)
    dataset = SegmentDataset(
        data, series.days, standardized_climatology(climatology, normalizer), lead, cfg.history, cfg.segment
    )

    if resume is not None:
        model, optimizer, start = resume.model, resume.optimizer, resume.step
    else:
        model = build_model(config, lead)
        model.set_normalizer(normalizer)
        optimizer = build_optimizer(model, cfg)
        start = 0
    stop = cfg.total_steps if steps is None else min(cfg.total_steps, start + steps)

    weights = torch.as_tensor(latitude_weights(model.grid), dtype=model.dtype)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + lead)
    # Replay the sampler so a resumed run draws the batches it would have drawn.
    for _ in range(start):
        torch.randint(len(dataset), (cfg.batch_size,), generator=gen)
        torch.randint(2 ** 31 - 1, (1,), generator=gen)

    losses: List[Dict[str, float]] = []
    model.train()
    log.info(f"[PM_{lead}] training steps {start}..{stop - 1} on {len(dataset)} samples")
    for step in range(start, stop):
        history, clim, day, target = sample_batch(dataset, gen, cfg.batch_size, model.dtype)
        noise_seed = int(torch.randint(2 ** 31 - 1, (1,), generator=gen))
        noise = NoiseConfig(sigma=cfg.noise_sigma, mode="stochastic", seed=noise_seed)
        pred = model(history, clim, day, noise)
        loss = weighted_mse(pred, target, weights)
        if not torch.isfinite(loss):
            raise DivergenceError(f"[PM_{lead}] non-finite loss at step {step}")
        lr = lr_schedule(step + 1, cfg)
        set_learning_rate(optimizer, lr)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer_step(optimizer)
        losses.append({"lead": lead, "step": step, "loss": float(loss), "lr": lr})
        if step % cfg.log_every == 0 or step == stop - 1:
            log.info(f"[PM_{lead}] step {step} loss={float(loss):.5f} lr={lr:.2e}")

    previous = resume.losses if resume is not None else []
    return TrainResult(lead, model, optimizer, stop, previous + losses)


@dataclass
class ForecastRange:
    days: np.ndarray     # lead days 15..45
    fields: np.ndarray   # T x ... one entry per lead day
    owners: np.ndarray   # lead K of the model that produced each day


def segment_owners(leads: Sequence[int], segment: int = 5, first: int = FIRST_DAY, last: int = LAST_DAY) -> Dict[int, int]:
    """Day d belongs to the smallest K whose segment K-S+1..K contains d."""
    owners = {}
    for d in range(first, last + 1):
        covering = [K for K in sorted(leads) if K - segment + 1 <= d <= K]
        if not covering:
            raise ConfigError(f"lead set {sorted(leads)} leaves day {d} uncovered")
        owners[d] = covering[0]
    return owners


def collect_range(
    leads: Sequence[int],
    segment_fn: Callable[[int], np.ndarray],
    segment: int = 5,
    first: int = FIRST_DAY,
    last: int = LAST_DAY,
) -> ForecastRange:
    """Assembles days first..last from independent per-lead segments.
    ``segment_fn(K)`` returns the S-day block for days K-S+1..K."""
    owners = segment_owners(leads, segment, first, last)
    blocks = {K: np.asarray(segment_fn(K)) for K in sorted(set(owners.values()))}
    fields = np.stack([blocks[K][d - (K - segment + 1)] for d, K in owners.items()])
    return ForecastRange(
        days=np.arange(first, last + 1),
        fields=fields,
        owners=np.array(list(owners.values())),
    )


def forecast_range(
    models: Mapping[int, S2SForecaster],
    history: np.ndarray,
    climatology: Climatology,
    day: int,
    leads: Iterable[int] = DEFAULT_LEADS,
    noise: Optional[NoiseConfig] = None,
) -> ForecastRange:
    """Days 15..45 from the raw h x K x H x W history ending on ``day``; no
    model consumes another's output."""
    leads = list(leads)
    for K in leads:
        if K not in models:
            raise MissingModelError(K)
    segment = models[leads[0]].segment

    def run(K: int) -> np.ndarray:
        centre_day = day + K - segment // 2
        return models[K].predict(history, climatology.lookup(centre_day), day, noise)

    return collect_range(leads, run, segment)
