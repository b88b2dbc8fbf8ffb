"""Patch embedding: climatology and state convolutions, attention-based fusion,
patchify and Fourier position/time/lead encodings."""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from ..exceptions import ConfigError, NonFiniteError, ShapeMismatchError
from ..services.grid import GridSpec, VariableCatalog, calendar_index

POSITION_WAVELENGTHS = (0.1, 360.0)
TIME_WAVELENGTHS = (1.0, 365.0)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")


def pad_sphere(x: torch.Tensor, pad: int = 1) -> torch.Tensor:
    """Circular padding in longitude, replicate padding in latitude."""
    if pad == 0:
        return x
    x = torch.cat([x[..., -pad:], x, x[..., :pad]], dim=-1)
    top = x[..., :1, :].expand(*x.shape[:-2], pad, x.shape[-1])
    bottom = x[..., -1:, :].expand(*x.shape[:-2], pad, x.shape[-1])
    return torch.cat([top, x, bottom], dim=-2)


class SphereConv2d(nn.Conv2d):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3):
        super().__init__(in_channels, out_channels, kernel_size, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(pad_sphere(x, self.kernel_size[0] // 2))


def difference_maps(x: torch.Tensor) -> torch.Tensor:
    """Horizontal, vertical and both diagonal central differences, stacked as
    four blocks of K channels."""
    p = pad_sphere(x, 1)
    dx = p[..., 1:-1, 2:] - p[..., 1:-1, :-2]
    dy = p[..., 2:, 1:-1] - p[..., :-2, 1:-1]
    d1 = p[..., 2:, 2:] - p[..., :-2, :-2]
    d2 = p[..., 2:, :-2] - p[..., :-2, 2:]
    return 0.5 * torch.cat([dx, dy, d1, d2], dim=-3)


def channel_pooling(x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-location mean and max over channels, each B x 1 x H x W."""
    return x.mean(dim=-3, keepdim=True), x.amax(dim=-3, keepdim=True)


def window_pooling(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Per-channel mean over P x P windows, broadcast back to H x W."""
    pooled = F.avg_pool2d(x, patch_size)
    return pooled.repeat_interleave(patch_size, dim=-2).repeat_interleave(patch_size, dim=-1)


@dataclass
class ConvFeatures:
    f_s: torch.Tensor
    f_c: torch.Tensor
    f_x: torch.Tensor
    f_clim: Optional[torch.Tensor] = None


class ClimatologyConv(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = SphereConv2d(4 * channels, channels)

    def forward(self, x_clim: torch.Tensor) -> torch.Tensor:
        _check_finite(x_clim, "climatology input")
        return self.conv(difference_maps(x_clim))


class SpatialChannelConv(nn.Module):
    """Spatial branch on channel-pooled maps, channel branch on window-pooled
    fields; the enhanced feature is their sum."""

    def __init__(self, channels: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.spatial = SphereConv2d(2, channels)
        self.channel = SphereConv2d(channels, channels)

    def forward(self, x: torch.Tensor) -> ConvFeatures:
        _check_finite(x, "state input")
        pap, pmp = channel_pooling(x)
        f_s = self.spatial(torch.cat([pap, pmp], dim=-3))
        f_c = self.channel(window_pooling(x, self.patch_size))
        return ConvFeatures(f_s=f_s, f_c=f_c, f_x=f_s + f_c)


class LowRankProjection(nn.Module):
    """N x N map factored through rank r."""

    def __init__(self, n: int, rank: int):
        super().__init__()
        self.down = nn.Linear(n, rank, bias=False)
        self.up = nn.Linear(rank, n, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.up(self.down(x))


def _kinds(catalog: VariableCatalog):
    groups = catalog.channel_groups()
    covered = [i for _, sl in groups for i in range(sl.start, sl.stop)]
    if covered != list(range(catalog.K)):
        raise ConfigError("variable grouping does not partition the channels")
    return [("surface" if n < catalog.V_S else "upper", sl) for n, (_, sl) in enumerate(groups)]


class AttentionFusion(nn.Module):
    """Per-variable attention over levels producing spatial weights W_att in [0, 1]
    that blend climatology and state features before a shared convolution."""

    def __init__(self, catalog: VariableCatalog, height: int, width: int, rank: int = 16):
        super().__init__()
        n = height * width
        rank = min(rank, n)
        self.n = n
        self.groups = _kinds(catalog)
        kinds = {kind for kind, _ in self.groups}
        self.query = nn.ModuleDict({k: LowRankProjection(n, rank) for k in kinds})
        self.key = nn.ModuleDict({k: LowRankProjection(n, rank) for k in kinds})
        self.value = nn.ModuleDict({k: LowRankProjection(n, rank) for k in kinds})
        width_of = {"surface": 1, "upper": catalog.C}
        self.conv = nn.ModuleDict({k: SphereConv2d(width_of[k], width_of[k]) for k in kinds})

    def weights(self, f_clim: torch.Tensor, f_x: torch.Tensor) -> torch.Tensor:
        out = []
        for kind, sl in self.groups:
            a = (f_x[:, sl] + f_clim[:, sl]).flatten(-2)
            q, k, v = self.query[kind](a), self.key[kind](a), self.value[kind](a)
            scores = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.n), dim=-1)
            out.append(torch.sigmoid(scores @ v).reshape(f_x[:, sl].shape))
        return torch.cat(out, dim=1)

    @staticmethod
    def mix(f_clim: torch.Tensor, f_x: torch.Tensor, w_att: torch.Tensor) -> torch.Tensor:
        return f_clim * w_att + f_x * (1.0 - w_att) + f_clim + f_x

    def forward(self, f_clim: torch.Tensor, f_x: torch.Tensor) -> torch.Tensor:
        mixed = self.mix(f_clim, f_x, self.weights(f_clim, f_x))
        return torch.cat([self.conv[kind](mixed[:, sl]) for kind, sl in self.groups], dim=1)


class ConcatFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = SphereConv2d(2 * channels, channels)

    def forward(self, f_clim: torch.Tensor, f_x: torch.Tensor) -> torch.Tensor:
        return self.conv(torch.cat([f_clim, f_x], dim=1))


class GateFusion(nn.Module):
    """Learned per-pixel gate choosing between climatology and state features."""

    def __init__(self, channels: int):
        super().__init__()
        self.gate = SphereConv2d(2 * channels, channels)
        self.conv = SphereConv2d(channels, channels)

    def forward(self, f_clim: torch.Tensor, f_x: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.gate(torch.cat([f_clim, f_x], dim=1)))
        return self.conv(g * f_clim + (1.0 - g) * f_x)


class StateOnlyFusion(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = SphereConv2d(channels, channels)

    def forward(self, f_clim: Optional[torch.Tensor], f_x: torch.Tensor) -> torch.Tensor:
        return self.conv(f_x)


def build_fusion(kind: str, catalog: VariableCatalog, grid: GridSpec, rank: int) -> nn.Module:
    if kind == "attention":
        return AttentionFusion(catalog, grid.H, grid.W, rank)
    if kind == "concat":
        return ConcatFusion(catalog.K)
    if kind == "gate":
        return GateFusion(catalog.K)
    if kind == "none":
        return StateOnlyFusion(catalog.K)
    raise ConfigError(f"unknown fusion kind {kind!r}")


def fourier_encode(x, dim: int, lambda_min: float, lambda_max: float) -> torch.Tensor:
    """Interleaved [sin, cos] pairs at dim/2 wavelengths spaced geometrically
    from lambda_min to lambda_max; output has shape x.shape + (dim,)."""
    if dim % 2 or dim < 4:
        raise ConfigError(f"Fourier dimension must be even and at least 4, got {dim}")
    if not 0 < lambda_min < lambda_max:
        raise ConfigError(f"need 0 < lambda_min < lambda_max, got ({lambda_min}, {lambda_max})")
    x = torch.as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.get_default_dtype())
    half = dim // 2
    exponent = torch.arange(half, dtype=x.dtype) / (half - 1)
    wavelengths = lambda_min * (lambda_max / lambda_min) ** exponent
    angle = 2.0 * math.pi * x.unsqueeze(-1) / wavelengths
    return torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1).flatten(-2)


def to_patches(fused: torch.Tensor, catalog: VariableCatalog, patch_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
    """B x K x H x W -> (B x 1 x L x V_S*P*P, B x C x L x V_A*P*P), patches row-major."""
    if fused.dim() != 4 or fused.shape[1] != catalog.K:
        raise ShapeMismatchError(f"expected B x {catalog.K} x H x W, got {tuple(fused.shape)}")
    if fused.shape[-2] % patch_size or fused.shape[-1] % patch_size:
        raise ShapeMismatchError(f"patch size {patch_size} does not divide {tuple(fused.shape[-2:])}")
    p = patch_size
    surface = rearrange(fused[:, : catalog.V_S], "b v (h p1) (w p2) -> b (h w) (v p1 p2)", p1=p, p2=p)
    upper = rearrange(
        fused[:, catalog.V_S:], "b (v c) (h p1) (w p2) -> b c (h w) (v p1 p2)",
        v=catalog.V_A, c=catalog.C, p1=p, p2=p,
    )
    return surface.unsqueeze(1), upper


class Patchify(nn.Module):
    def __init__(self, catalog: VariableCatalog, patch_size: int, dim: int):
        super().__init__()
        self.catalog = catalog
        self.patch_size = patch_size
        area = patch_size * patch_size
        self.surface = nn.Linear(catalog.V_S * area, dim)
        self.upper = nn.Linear(catalog.V_A * area, dim)

    def forward(self, fused: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        surface, upper = to_patches(fused, self.catalog, self.patch_size)
        return self.surface(surface), self.upper(upper)


@dataclass
class EmbeddingTensor:
    tokens: torch.Tensor      # B x (C+1) x L x D, all offsets applied
    raw: torch.Tensor         # B x (C+1) x L x D, concatenated patch projections
    pos_embed: torch.Tensor   # (C+1) x L x D
    time_embed: torch.Tensor  # B x D
    lead_embed: torch.Tensor  # B x D

    @property
    def L(self) -> int:
        return self.tokens.shape[-2]

    @property
    def D(self) -> int:
        return self.tokens.shape[-1]


class EmbeddingAssembler(nn.Module):
    """Adds Fourier-derived position, absolute-time/day-of-year and lead-time
    offsets to the concatenated surface and upper-air tokens."""

    def __init__(self, grid: GridSpec, catalog: VariableCatalog, dim: int):
        super().__init__()
        self.dim = dim
        self.register_buffer("centers", torch.as_tensor(grid.patch_centers()), persistent=False)
        self.pos_proj = nn.Linear(2 * dim, dim)
        self.pos_level = nn.Parameter(torch.zeros(catalog.C + 1, dim))
        self.time_proj = nn.Linear(2 * dim, dim)
        self.lead_proj = nn.Linear(dim, dim)

    def pos_table(self) -> torch.Tensor:
        centers = self.centers.to(self.pos_proj.weight.dtype)
        enc = torch.cat([
            fourier_encode(centers[:, 0], self.dim, *POSITION_WAVELENGTHS),
            fourier_encode(centers[:, 1], self.dim, *POSITION_WAVELENGTHS),
        ], dim=-1)
        return self.pos_proj(enc).unsqueeze(0) + self.pos_level.unsqueeze(1)

    def time_features(self, day: torch.Tensor) -> torch.Tensor:
        dtype = self.time_proj.weight.dtype
        day = torch.as_tensor(day).reshape(-1)
        doy = torch.as_tensor(np.atleast_1d(calendar_index(day.cpu().numpy().astype(np.int64))), dtype=dtype)
        return torch.cat([
            fourier_encode(day.to(dtype), self.dim, *TIME_WAVELENGTHS),
            fourier_encode(doy, self.dim, *TIME_WAVELENGTHS),
        ], dim=-1)

    def forward(self, e_s: torch.Tensor, e_a: torch.Tensor, day, lead) -> EmbeddingTensor:
        if e_s.shape[-1] != self.dim or e_a.shape[-1] != self.dim:
            raise ShapeMismatchError(
                f"token width mismatch: surface {e_s.shape[-1]}, upper {e_a.shape[-1]}, expected {self.dim}"
            )
        raw = torch.cat([e_s, e_a], dim=1)
        batch = raw.shape[0]
        pos = self.pos_table()
        time = self.time_proj(self.time_features(day)).expand(batch, -1)
        lead = torch.as_tensor(lead, dtype=raw.dtype).reshape(-1)
        lead = self.lead_proj(fourier_encode(lead, self.dim, *TIME_WAVELENGTHS)).expand(batch, -1)
        tokens = raw + pos + time[:, None, None, :] + lead[:, None, None, :]
        return EmbeddingTensor(tokens=tokens, raw=raw, pos_embed=pos, time_embed=time, lead_embed=lead)


class PatchEmbedding(nn.Module):
    """History reduction, feature convolutions, fusion, patchify and assembly."""

    def __init__(
        self,
        grid: GridSpec,
        catalog: VariableCatalog,
        dim: int,
        history: int = 5,
        fusion: str = "attention",
        fusion_rank: int = 16,
    ):
        super().__init__()
        K = catalog.K
        self.history = history
        self.uses_climatology = fusion != "none"
        self.history_reduce = nn.Conv2d(history * K, K, kernel_size=1)
        self.clim_conv = ClimatologyConv(K) if self.uses_climatology else None
        self.state_conv = SpatialChannelConv(K, grid.P)
        self.fusion = build_fusion(fusion, catalog, grid, fusion_rank)
        self.patchify = Patchify(catalog, grid.P, dim)
        self.assemble = EmbeddingAssembler(grid, catalog, dim)

    def forward(self, history: torch.Tensor, clim: torch.Tensor, day, lead) -> EmbeddingTensor:
        """history: B x h x K x H x W standardized days t-h+1..t; clim: B x K x H x W."""
        _check_finite(history, "history input")
        x = self.history_reduce(history.flatten(1, 2))
        features = self.state_conv(x)
        if self.uses_climatology:
            features.f_clim = self.clim_conv(clim)
        fused = self.fusion(features.f_clim, features.f_x)
        e_s, e_a = self.patchify(fused)
        return self.assemble(e_s, e_a, day, lead)
