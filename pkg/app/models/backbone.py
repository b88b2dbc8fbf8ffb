"""Uncertainty-augmented transformer encoder and the unpatchify head."""
import logging
import math
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from ..exceptions import DivergenceError, ShapeMismatchError
from ..schemas import NoiseConfig
from ..services.grid import VariableCatalog

log = logging.getLogger(__name__)


class AttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention block.

    Parameters are laid out like ``nn.TransformerEncoderLayer`` with
    ``norm_first=True`` (packed qkv projection, GELU MLP), so its weights can be
    copied one-to-one into the torch reference layer.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if dim % heads:
            raise ShapeMismatchError(f"{heads} heads do not divide width {dim}")
        self.heads = heads
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def _qkv(self, x: torch.Tensor):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        split = lambda t: rearrange(t, "b t (h d) -> b h t d", h=self.heads)
        return split(q), split(k), split(v)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """B x heads x T x T row-stochastic attention matrix."""
        q, k, _ = self._qkv(x)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = self._qkv(x)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        return self.proj(rearrange(weights @ v, "b h t d -> b t (h d)"))

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(self.norm2(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(x)
        return x + self.mlp(x)


class UncertaintyBlock(AttentionBlock):
    """Attention block with a learnable-scale Gaussian term after the attention
    residual: E + h(E) + g(E) * (sigma * z)."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0, gain_init: float = 1e-2):
        super().__init__(dim, heads, mlp_ratio)
        self.scale = nn.Linear(dim, dim)
        self.gain = nn.Parameter(torch.tensor(float(gain_init)))

    def noise_scale(self, x: torch.Tensor, fixed: bool = False) -> torch.Tensor:
        if fixed:
            return self.gain.abs().expand_as(x)
        return F.softplus(self.scale(x)) * self.gain

    def forward(
        self,
        x: torch.Tensor,
        z: Optional[torch.Tensor] = None,
        sigma: float = 1.0,
        fixed: bool = False,
    ) -> torch.Tensor:
        h = x + self.attend(x)
        if z is not None:
            h = h + self.noise_scale(x, fixed) * (sigma * z)
        return h + self.mlp(h)


class Backbone(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float = 4.0, gain_init: float = 1e-2):
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList(UncertaintyBlock(dim, heads, mlp_ratio, gain_init) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def member_seeds(self, noise: NoiseConfig, batch: int) -> Optional[List[int]]:
        if noise.mode == "off":
            return None
        if noise.mode == "deterministic":
            return [0] * batch
        return [noise.seed + b for b in range(batch)]

    def sample_noise(self, seeds: Sequence[int], tokens: int, dtype: torch.dtype) -> torch.Tensor:
        """B x depth x T x D standard normal draws, one private generator per
        seed. Disabled layers still consume their draw."""
        draws = []
        for seed in seeds:
            gen = torch.Generator().manual_seed(int(seed))
            draws.append(torch.randn((self.depth, tokens, self.dim), generator=gen, dtype=dtype))
        return torch.stack(draws).to(self.norm.weight.device)

    def forward(
        self,
        tokens: torch.Tensor,
        noise: Optional[NoiseConfig] = None,
        seeds: Optional[Sequence[int]] = None,
    ) -> torch.Tensor:
        """tokens: B x (C+1) x L x D; attention runs over all (C+1)*L tokens."""
        noise = noise or NoiseConfig(mode="off")
        B, levels, L, D = tokens.shape
        if D != self.dim:
            raise ShapeMismatchError(f"token width {D} != backbone width {self.dim}")
        x = tokens.reshape(B, levels * L, D)
        if seeds is None:
            seeds = self.member_seeds(noise, B)
        elif len(seeds) != B:
            raise ShapeMismatchError(f"{len(seeds)} member seeds for a batch of {B}")
        z = None
        if seeds is not None and noise.mode != "off" and self.depth:
            z = self.sample_noise(seeds, levels * L, x.dtype)
        for n, block in enumerate(self.blocks):
            layer = n + 1
            z_n = z[:, n] if z is not None and noise.layer_enabled(layer) else None
            x = block(x, z_n, noise.sigma, noise.fixed_scale)
            if not torch.isfinite(x).all():
                raise DivergenceError(f"non-finite activations after block {layer}")
        return self.norm(x).reshape(B, levels, L, D)


def from_patches(
    surface: torch.Tensor,
    upper: torch.Tensor,
    catalog: VariableCatalog,
    patch_size: int,
    height: int,
    width: int,
    segment: int = 1,
) -> torch.Tensor:
    """Inverse of ``embed.to_patches``: (B x L x S*V_S*P*P, B x C x L x S*V_A*P*P)
    -> B x S x K x H x W."""
    p = patch_size
    s = rearrange(surface, "b (h w) (s v p1 p2) -> b s v (h p1) (w p2)",
                  h=height // p, s=segment, v=catalog.V_S, p1=p, p2=p)
    a = rearrange(upper, "b c (h w) (s v p1 p2) -> b s (v c) (h p1) (w p2)",
                  h=height // p, s=segment, v=catalog.V_A, p1=p, p2=p)
    return torch.cat([s, a], dim=2)


class Unpatchify(nn.Module):
    """Separate linear decoders for surface and upper-air tokens, reassembled
    row-major into a B x S x K x H x W segment."""

    def __init__(self, catalog: VariableCatalog, patch_size: int, height: int, width: int, dim: int, segment: int = 5):
        super().__init__()
        self.catalog = catalog
        self.patch_size = patch_size
        self.height, self.width = height, width
        self.segment = segment
        area = patch_size * patch_size
        self.surface = nn.Linear(dim, segment * catalog.V_S * area)
        self.upper = nn.Linear(dim, segment * catalog.V_A * area)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return from_patches(
            self.surface(tokens[:, 0]), self.upper(tokens[:, 1:]),
            self.catalog, self.patch_size, self.height, self.width, self.segment,
        )
