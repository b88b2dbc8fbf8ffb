"""PM_K: the per-lead forecaster mapping a 5-day history to the 5-day segment
ending K days after initialization."""
import logging
import zlib
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from ..exceptions import ConfigError, DivergenceError, ShapeMismatchError
from ..schemas import ModelSection, NoiseConfig, RunConfig
from ..services.grid import GridSpec, Normalizer, VariableCatalog, catalog_from_config, spec_from_config
from .backbone import Backbone, Unpatchify
from .embed import PatchEmbedding

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class S2SForecaster(nn.Module):
    def __init__(
        self,
        grid: GridSpec,
        catalog: VariableCatalog,
        model: ModelSection,
        lead: int,
        history: int = 5,
        segment: int = 5,
    ):
        super().__init__()
        if catalog.V_A == 0:
            raise ConfigError("the forecaster needs at least one upper-air variable")
        self.grid = grid
        self.catalog = catalog
        self.lead = lead
        self.history = history
        self.segment = segment
        self.noise_enabled = model.noise
        self.default_layers = tuple(model.noise_layers) or None
        self.gain_init = model.gain_init

        self.embed = PatchEmbedding(grid, catalog, model.embed_dim, history, model.fusion, model.fusion_rank)
        self.backbone = Backbone(model.embed_dim, model.depth, model.heads, model.mlp_ratio, model.gain_init)
        self.head = Unpatchify(catalog, grid.P, grid.H, grid.W, model.embed_dim, segment)
        self.to(DTYPES[model.dtype])
        # Registered after the cast: normalization stats stay f64.
        self.register_buffer("norm_mean", torch.zeros(catalog.K, dtype=torch.float64))
        self.register_buffer("norm_std", torch.ones(catalog.K, dtype=torch.float64))

    @property
    def dtype(self) -> torch.dtype:
        return self.head.surface.weight.dtype

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(self.norm_mean.cpu().numpy().copy(), self.norm_std.cpu().numpy().copy())

    def set_normalizer(self, normalizer: Normalizer) -> None:
        if len(normalizer.mean) != self.catalog.K:
            raise ShapeMismatchError(f"normalizer covers {len(normalizer.mean)} channels, model has {self.catalog.K}")
        self.norm_mean.copy_(torch.as_tensor(normalizer.mean, dtype=torch.float64))
        self.norm_std.copy_(torch.as_tensor(normalizer.std, dtype=torch.float64))

    def resolve_noise(self, noise: Optional[NoiseConfig]) -> NoiseConfig:
        if not self.noise_enabled or noise is None:
            return NoiseConfig(mode="off")
        if noise.enabled_layers is None and self.default_layers:
            return noise.model_copy(update={"enabled_layers": self.default_layers})
        return noise

    def forward(
        self,
        history: torch.Tensor,
        clim: torch.Tensor,
        day,
        noise: Optional[NoiseConfig] = None,
        seeds: Optional[Sequence[int]] = None,
    ) -> torch.Tensor:
        """history: B x h x K x H x W, clim: B x K x H x W, both standardized.
        Returns the standardized B x S x K x H x W target segment."""
        emb = self.embed(history, clim, day, self.lead)
        tokens = self.backbone(emb.tokens, self.resolve_noise(noise), seeds)
        out = self.head(tokens)
        if not torch.isfinite(out).all():
            raise DivergenceError(f"[PM_{self.lead}] non-finite forecast")
        return out

    def _batch(self, history_std: np.ndarray, clim_std: np.ndarray, batch: int) -> Tuple[torch.Tensor, torch.Tensor]:
        history = torch.as_tensor(np.asarray(history_std), dtype=self.dtype)
        clim = torch.as_tensor(np.asarray(clim_std), dtype=self.dtype)
        if history.dim() == 4:
            history = history.unsqueeze(0)
        if clim.dim() == 3:
            clim = clim.unsqueeze(0)
        if history.shape[0] == 1 and batch > 1:
            history = history.expand(batch, *history.shape[1:])
        return history, clim.expand(history.shape[0], *clim.shape[1:])

    @torch.no_grad()
    def run(
        self,
        history_std: np.ndarray,
        clim_std: np.ndarray,
        day,
        noise: Optional[NoiseConfig] = None,
        seeds: Optional[Sequence[int]] = None,
    ) -> np.ndarray:
        """Inference on standardized numpy inputs; returns B x S x K x H x W."""
        self.eval()
        history, clim = self._batch(history_std, clim_std, len(seeds) if seeds is not None else 1)
        return self(history, clim, day, noise, seeds).cpu().numpy().astype(np.float64)

    def ensemble_forward(
        self,
        history_std: np.ndarray,
        clim_std: np.ndarray,
        day,
        members: int,
        sigma: float = 1.0,
        base_seed: int = 0,
        enabled_layers: Optional[Tuple[int, ...]] = None,
        fixed_scale: bool = False,
    ) -> np.ndarray:
        """M x S x K x H x W standardized members. Member 0 is the deterministic
        control (the seed-0 draw); member m uses seed base_seed + m."""
        if members < 1:
            raise ConfigError(f"ensemble needs at least one member, got {members}")
        if base_seed < 0:
            raise ConfigError(f"base seed must be non-negative, got {base_seed}")
        noise = NoiseConfig(sigma=sigma, enabled_layers=enabled_layers, mode="stochastic", fixed_scale=fixed_scale)
        seeds = [0] + [base_seed + m for m in range(1, members)]
        return self.run(history_std, clim_std, day, noise, seeds)

    def predict(self, history: np.ndarray, clim: np.ndarray, day: int, noise: Optional[NoiseConfig] = None) -> np.ndarray:
        """Raw-unit forecast: h x K x H x W history and K x H x W climatology in,
        S x K x H x W segment out."""
        norm = self.normalizer
        noise = noise or NoiseConfig()
        out = self.run(norm.standardize(history), norm.standardize(clim), day, noise)
        return norm.destandardize(out[0])


def parameter_seed(seed: int, lead: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{lead}:{name}".encode())


@torch.no_grad()
def initialize_parameters(model: S2SForecaster, seed: int) -> S2SForecaster:
    """Seeds every parameter from (seed, lead, parameter name), so models that
    share a parameter name start from the same values."""
    for name, p in model.named_parameters():
        gen = torch.Generator().manual_seed(parameter_seed(seed, model.lead, name))
        if name.endswith("bias"):
            p.zero_()
        elif name.endswith(".gain"):
            p.fill_(model.gain_init)
        elif "norm" in name:
            p.fill_(1.0)
        elif "pos_level" in name:
            p.copy_(0.02 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
        elif p.dim() >= 2:
            fan_in = max(p[0].numel(), 1)
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) / fan_in ** 0.5)
        else:
            p.zero_()
    return model


def build_model(config: RunConfig, lead: int, seed: Optional[int] = None) -> S2SForecaster:
    model = S2SForecaster(
        spec_from_config(config.grid),
        catalog_from_config(config.grid),
        config.model,
        lead,
        history=config.train.history,
        segment=config.train.segment,
    )
    seed = config.train.seed if seed is None else seed
    initialize_parameters(model, seed)
    n_params = sum(p.numel() for p in model.parameters())
    log.info(f"[PM_{lead}] model built: {n_params} parameters, fusion={config.model.fusion}, "
             f"noise={'on' if config.model.noise else 'off'}, seed={seed}")
    return model
