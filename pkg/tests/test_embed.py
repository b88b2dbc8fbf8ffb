import math

import numpy as np
import pytest
import torch

from app.exceptions import ConfigError, NonFiniteError, ShapeMismatchError
from app.models.backbone import from_patches
from app.models.embed import (
    AttentionFusion,
    ClimatologyConv,
    EmbeddingAssembler,
    PatchEmbedding,
    SpatialChannelConv,
    build_fusion,
    channel_pooling,
    difference_maps,
    fourier_encode,
    pad_sphere,
    to_patches,
    window_pooling,
)
from app.services.grid import epoch_day


class TestConvolutions:
    def test_sphere_padding_wraps_longitude(self):
        x = torch.arange(12.0).reshape(1, 1, 3, 4)
        p = pad_sphere(x, 1)
        assert p.shape == (1, 1, 5, 6)
        assert torch.equal(p[0, 0, 1:-1, 0], x[0, 0, :, -1])
        assert torch.equal(p[0, 0, 0, 1:-1], x[0, 0, 0])

    def test_constant_field_has_zero_differences(self):
        x = torch.full((1, 3, 8, 16), 4.2, dtype=torch.float64)
        assert torch.count_nonzero(difference_maps(x)) == 0

    def test_constant_climatology_gives_bias_only(self):
        conv = ClimatologyConv(3).double()
        out = conv(torch.full((2, 3, 8, 16), -1.5, dtype=torch.float64))
        expected = conv.conv.bias[None, :, None, None].expand_as(out)
        torch.testing.assert_close(out, expected, rtol=0, atol=1e-15)

    def test_longitude_ramp(self):
        x = torch.arange(16.0, dtype=torch.float64).expand(1, 1, 8, 16)
        d = difference_maps(x)
        dx, dy = d[:, 0], d[:, 1]
        assert torch.all(dx[..., 1:-1] == 1.0)
        assert torch.count_nonzero(dy) == 0

    def test_channel_pooling_examples(self):
        same = torch.randn(1, 1, 4, 4).expand(1, 3, 4, 4)
        pap, pmp = channel_pooling(same)
        assert torch.allclose(pap, same[:, :1]) and torch.equal(pmp, same[:, :1])

        two = torch.stack([torch.zeros(4, 4), torch.full((4, 4), 10.0)])[None]
        pap, pmp = channel_pooling(two)
        assert torch.all(pap == 5.0) and torch.all(pmp == 10.0)

    def test_window_pooling_constant(self):
        out = window_pooling(torch.full((1, 1, 8, 16), 3.0), 4)
        assert out.shape == (1, 1, 8, 16)
        assert torch.all(out == 3.0)

    def test_window_pooling_is_blockwise(self):
        x = torch.zeros(1, 1, 4, 8)
        x[..., :, 4:] = 2.0
        out = window_pooling(x, 4)
        assert torch.all(out[..., :4] == 0.0) and torch.all(out[..., 4:] == 2.0)

    def test_state_features_sum(self):
        conv = SpatialChannelConv(6, 4)
        f = conv(torch.randn(2, 6, 8, 16))
        assert torch.equal(f.f_x, f.f_s + f.f_c)
        assert f.f_x.shape == (2, 6, 8, 16)

    def test_non_finite_inputs(self):
        x = torch.zeros(1, 6, 8, 16)
        x[0, 2, 3, 4] = float("nan")
        with pytest.raises(NonFiniteError):
            SpatialChannelConv(6, 4)(x)
        with pytest.raises(NonFiniteError):
            ClimatologyConv(6)(x)


class TestFusion:
    @pytest.fixture
    def fields(self):
        gen = torch.Generator().manual_seed(0)
        return torch.randn(2, 6, 8, 16, generator=gen), torch.randn(2, 6, 8, 16, generator=gen)

    def test_full_weight(self, fields):
        f_clim, f_x = fields
        out = AttentionFusion.mix(f_clim, f_x, torch.ones_like(f_x))
        torch.testing.assert_close(out, 2 * f_clim + f_x)

    def test_zero_weight(self, fields):
        f_clim, f_x = fields
        out = AttentionFusion.mix(f_clim, f_x, torch.zeros_like(f_x))
        torch.testing.assert_close(out, f_clim + 2 * f_x)

    def test_identical_features(self, fields):
        g, _ = fields
        w = torch.rand_like(g)
        torch.testing.assert_close(AttentionFusion.mix(g, g, w), 3 * g)

    def test_weights_lie_in_unit_interval(self, catalog, grid, fields):
        fusion = AttentionFusion(catalog, grid.H, grid.W, rank=4)
        w = fusion.weights(*fields)
        assert w.shape == fields[0].shape
        assert torch.all((w >= 0) & (w <= 1))

    def test_upper_variables_share_projections(self, catalog, grid):
        fusion = AttentionFusion(catalog, grid.H, grid.W, rank=4)
        assert set(fusion.query.keys()) == {"surface", "upper"}
        assert fusion.conv["upper"].in_channels == catalog.C

    @pytest.mark.parametrize("kind", ["attention", "concat", "gate"])
    def test_fusions_keep_shape(self, kind, catalog, grid, fields):
        fusion = build_fusion(kind, catalog, grid, rank=4)
        assert fusion(*fields).shape == fields[0].shape

    def test_unknown_fusion(self, catalog, grid):
        with pytest.raises(ConfigError):
            build_fusion("sum", catalog, grid, rank=4)


class TestFourier:
    def test_zero_input(self):
        enc = fourier_encode(torch.zeros(1, dtype=torch.float64), 8, 1.0, 365.0)
        assert enc[0].tolist() == [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]

    def test_four_dims_use_both_end_wavelengths(self):
        x = torch.tensor([0.25], dtype=torch.float64)
        enc = fourier_encode(x, 4, 1.0, 365.0)[0]
        slow = 2 * math.pi * 0.25 / 365.0
        expected = [1.0, math.cos(math.pi / 2), math.sin(slow), math.cos(slow)]
        np.testing.assert_allclose(enc.numpy(), expected, atol=1e-12)

    @pytest.mark.parametrize("dim,lmin,lmax", [(7, 1.0, 365.0), (2, 1.0, 365.0), (8, 0.0, 365.0), (8, 5.0, 1.0)])
    def test_invalid_arguments(self, dim, lmin, lmax):
        with pytest.raises(ConfigError):
            fourier_encode(torch.zeros(1), dim, lmin, lmax)

    def test_output_shape(self):
        assert fourier_encode(torch.zeros(3, 5), 6, 0.1, 360.0).shape == (3, 5, 6)


class TestPatches:
    def test_round_trip(self, catalog):
        x = torch.randn(2, catalog.K, 8, 16)
        surface, upper = to_patches(x, catalog, 4)
        assert surface.shape == (2, 1, 8, catalog.V_S * 16)
        assert upper.shape == (2, catalog.C, 8, catalog.V_A * 16)
        back = from_patches(surface[:, 0], upper, catalog, 4, 8, 16)
        assert torch.equal(back[:, 0], x)

    def test_patch_holds_its_window(self, catalog):
        x = torch.zeros(1, catalog.K, 8, 16)
        x[0, 1, 4:8, 12:16] = 1.0
        surface, _ = to_patches(x, catalog, 4)
        # second row, fourth column of patches; channel t2m is the second surface block
        assert torch.all(surface[0, 0, 7, 16:] == 1.0)
        assert surface.sum() == 16.0

    def test_bad_channel_count(self, catalog):
        with pytest.raises(ShapeMismatchError):
            to_patches(torch.zeros(1, catalog.K + 1, 8, 16), catalog, 4)


class TestAssembler:
    @pytest.fixture
    def assembler(self, grid, catalog):
        torch.manual_seed(0)
        return EmbeddingAssembler(grid, catalog, 16).double()

    @pytest.fixture
    def tokens(self, catalog):
        gen = torch.Generator().manual_seed(1)
        e_s = torch.randn(2, 1, 8, 16, generator=gen, dtype=torch.float64)
        e_a = torch.randn(2, catalog.C, 8, 16, generator=gen, dtype=torch.float64)
        return e_s, e_a

    def test_zero_tables_give_raw_tokens(self, assembler, tokens):
        with torch.no_grad():
            for p in assembler.parameters():
                p.zero_()
        emb = assembler(*tokens, day=11000, lead=15)
        assert torch.equal(emb.tokens, emb.raw)
        assert (emb.L, emb.D) == (8, 16)

    def test_day_of_year_encoding_is_annual(self, assembler):
        a = assembler.time_features(torch.tensor([epoch_day(2001, 3, 1)]))
        b = assembler.time_features(torch.tensor([epoch_day(2002, 3, 1)]))
        assert torch.equal(a[:, 16:], b[:, 16:])
        assert not torch.equal(a[:, :16], b[:, :16])

    def test_leads_differ_only_in_lead_embedding(self, assembler, tokens):
        a = assembler(*tokens, day=11000, lead=15)
        b = assembler(*tokens, day=11000, lead=20)
        assert torch.equal(a.raw, b.raw) and torch.equal(a.pos_embed, b.pos_embed)
        assert torch.equal(a.time_embed, b.time_embed)
        diff = (b.lead_embed - a.lead_embed)[:, None, None, :].expand_as(a.tokens)
        torch.testing.assert_close(b.tokens - a.tokens, diff, rtol=0, atol=1e-12)

    def test_width_mismatch(self, assembler, tokens):
        e_s, e_a = tokens
        with pytest.raises(ShapeMismatchError):
            assembler(e_s[..., :8], e_a, day=11000, lead=15)


class TestPatchEmbedding:
    @pytest.mark.parametrize("fusion", ["attention", "none"])
    def test_token_shape(self, grid, catalog, fusion):
        embed = PatchEmbedding(grid, catalog, 16, history=5, fusion=fusion, fusion_rank=4)
        emb = embed(torch.randn(3, 5, catalog.K, 8, 16), torch.randn(3, catalog.K, 8, 16),
                    torch.tensor([11000, 11001, 11002]), 15)
        assert emb.tokens.shape == (3, catalog.C + 1, grid.num_patches, 16)
        assert (embed.clim_conv is None) == (fusion == "none")

    def test_without_climatology_ignores_it(self, grid, catalog):
        torch.manual_seed(0)
        embed = PatchEmbedding(grid, catalog, 16, fusion="none")
        history = torch.randn(1, 5, catalog.K, 8, 16)
        a = embed(history, torch.zeros(1, catalog.K, 8, 16), 11000, 15)
        b = embed(history, torch.randn(1, catalog.K, 8, 16), 11000, 15)
        assert torch.equal(a.tokens, b.tokens)

    def test_non_finite_history(self, grid, catalog):
        embed = PatchEmbedding(grid, catalog, 16)
        history = torch.zeros(1, 5, catalog.K, 8, 16)
        history[0, 0, 0, 0, 0] = float("inf")
        with pytest.raises(NonFiniteError):
            embed(history, torch.zeros(1, catalog.K, 8, 16), 11000, 15)
