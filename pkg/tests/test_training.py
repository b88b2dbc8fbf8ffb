import numpy as np
import pytest
import torch
import torch.nn as nn

from app.crud import create_checkpoint, load_checkpoint
from app.exceptions import ConfigError, InsufficientDataError, MissingModelError, NonFiniteError, ShapeMismatchError
from app.schemas import NoiseConfig, TrainSection
from app.services.grid import Normalizer
from app.services.training import (
    SegmentDataset,
    build_optimizer,
    collect_range,
    forecast_range,
    lr_schedule,
    optimizer_step,
    segment_owners,
    train_lead_model,
    weighted_mse,
)

from .conftest import LEADS


class TestWeightedMSE:
    def test_perfect_prediction(self):
        x = torch.randn(2, 3, 4, 5)
        assert float(weighted_mse(x, x, torch.ones(4))) == 0.0

    def test_single_cell(self):
        loss = weighted_mse(torch.full((1, 1, 1), 3.0), torch.full((1, 1, 1), 1.0), torch.ones(1))
        assert float(loss) == 4.0

    def test_equal_latitudes_is_plain_mse(self):
        gen = torch.Generator().manual_seed(0)
        a = torch.randn(5, 3, 4, 6, generator=gen, dtype=torch.float64)
        b = torch.randn(5, 3, 4, 6, generator=gen, dtype=torch.float64)
        torch.testing.assert_close(weighted_mse(a, b, torch.ones(4)), ((a - b) ** 2).mean())

    def test_shape_checks(self):
        with pytest.raises(ShapeMismatchError):
            weighted_mse(torch.zeros(1, 2, 3), torch.zeros(1, 3, 2), torch.ones(2))
        with pytest.raises(ShapeMismatchError):
            weighted_mse(torch.zeros(1, 2, 3), torch.zeros(1, 2, 3), torch.ones(3))

    def test_non_finite(self):
        a = torch.zeros(1, 2, 3)
        a[0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError):
            weighted_mse(a, torch.zeros(1, 2, 3), torch.ones(2))


class TestSchedule:
    @pytest.fixture
    def cfg(self):
        return TrainSection(lr=5e-5, warmup_steps=100, total_steps=1000)

    def test_shape(self, cfg):
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(50, cfg) == pytest.approx(2.5e-5)
        assert lr_schedule(100, cfg) == pytest.approx(5e-5)
        assert lr_schedule(550, cfg) == pytest.approx(2.5e-5)
        assert lr_schedule(1000, cfg) == pytest.approx(0.0, abs=1e-20)

    def test_monotone_decay(self, cfg):
        rates = [lr_schedule(s, cfg) for s in range(100, 1001, 50)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    @pytest.mark.parametrize("step", [-1, 1001])
    def test_out_of_range(self, cfg, step):
        with pytest.raises(ConfigError):
            lr_schedule(step, cfg)


class _Toy(nn.Module):
    def __init__(self):
        super().__init__()
        self.weight = nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
        self.pos_embed = nn.Parameter(torch.tensor([3.0], dtype=torch.float64))


class TestOptimizer:
    def _zero_grads(self, model):
        for p in model.parameters():
            p.grad = torch.zeros_like(p)

    def test_zero_gradient_fixed_point(self):
        model = _Toy()
        opt = build_optimizer(model, TrainSection(weight_decay=0.0, lr=1e-2))
        for _ in range(5):
            self._zero_grads(model)
            assert optimizer_step(opt)
        assert model.weight.tolist() == [1.0, -2.0] and model.pos_embed.item() == 3.0

    def test_constant_gradient_steps_approach_lr(self):
        model = _Toy()
        opt = build_optimizer(model, TrainSection(weight_decay=0.0, lr=1e-2))
        for _ in range(50):
            before = model.weight.detach().clone()
            model.weight.grad = torch.tensor([0.3, 0.3], dtype=torch.float64)
            model.pos_embed.grad = torch.zeros(1, dtype=torch.float64)
            optimizer_step(opt)
        np.testing.assert_allclose((before - model.weight.detach()).numpy(), [1e-2, 1e-2], rtol=1e-4)

    def test_decay_skips_positional_embedding(self):
        model = _Toy()
        cfg = TrainSection(weight_decay=0.1, lr=1e-2)
        opt = build_optimizer(model, cfg)
        for _ in range(10):
            self._zero_grads(model)
            optimizer_step(opt)
        np.testing.assert_allclose(model.weight.detach().numpy(), np.array([1.0, -2.0]) * (1 - 1e-3) ** 10, rtol=1e-12)
        assert model.pos_embed.item() == 3.0

    def test_rejects_non_finite_gradient(self):
        model = _Toy()
        opt = build_optimizer(model, TrainSection(lr=1e-2))
        model.weight.grad = torch.tensor([float("nan"), 1.0], dtype=torch.float64)
        assert not optimizer_step(opt)
        assert model.weight.tolist() == [1.0, -2.0]

    def test_betas(self):
        opt = build_optimizer(_Toy(), TrainSection())
        assert opt.defaults["betas"] == (0.9, 0.99)
        assert [g["weight_decay"] for g in opt.param_groups] == [1e-5, 0.0]


class TestSegmentDataset:
    @pytest.fixture
    def dataset(self):
        days = np.arange(10000, 10060)
        values = np.broadcast_to(np.arange(60.0)[:, None, None, None], (60, 2, 1, 1))
        return SegmentDataset(values, days, lambda day: np.full((2, 1, 1), float(day)), lead=15)

    def test_windows(self, dataset):
        assert len(dataset) == 60 - 15 - 4
        item = dataset[0]
        assert item["history"][:, 0, 0, 0].tolist() == [0, 1, 2, 3, 4]
        assert item["target"][:, 0, 0, 0].tolist() == [15, 16, 17, 18, 19]
        assert item["day"] == 10004
        assert item["clim"][0, 0, 0] == 10004 + 15 - 2

    def test_no_reads_past_the_lead(self, dataset):
        for i in range(len(dataset)):
            dataset[i]
        assert len(dataset.access_log) == len(dataset)
        for t, hist, target in dataset.access_log:
            assert max(hist) == t and min(hist) == t - 4
            assert max(target) == t + 15 and min(target) == t + 11
            assert max(target) < 60

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            SegmentDataset(np.zeros((19, 1, 1, 1)), np.arange(19), lambda d: None, lead=15)

    def test_gap_in_days(self):
        days = np.delete(np.arange(40), 10)
        with pytest.raises(InsufficientDataError):
            SegmentDataset(np.zeros((39, 1, 1, 1)), days, lambda d: None, lead=15)


class TestTraining:
    def test_same_seed_same_parameters(self, series, climatology, config):
        train = series[:366]
        a = train_lead_model(train, climatology, 15, config, steps=4)
        b = train_lead_model(train, climatology, 15, config, steps=4)
        for p, q in zip(a.model.parameters(), b.model.parameters()):
            assert torch.equal(p, q)
        assert [r["loss"] for r in a.losses] == [r["loss"] for r in b.losses]
        assert a.step == 4 and len(a.loss_frame()) == 4

    def test_loss_decreases(self, series, climatology, config):
        result = train_lead_model(series[:366], climatology, 15, config)
        losses = result.loss_frame()["loss"].to_numpy()
        assert len(losses) == config.train.total_steps
        assert losses[-10:].mean() < 0.9 * losses[:10].mean()

    def test_resume_from_checkpoint_matches_straight_run(self, series, climatology, config, tmp_path):
        train = series[:366]
        straight = train_lead_model(train, climatology, 20, config, steps=6)
        first = train_lead_model(train, climatology, 20, config, steps=3)
        path = create_checkpoint(tmp_path / "ck", first.model, config, first.step, first.optimizer)
        loaded = load_checkpoint(path)
        resumed = train_lead_model(train, climatology, 20, config, loaded.model.normalizer, resume=loaded, steps=3)
        assert resumed.step == 6
        for p, q in zip(straight.model.parameters(), resumed.model.parameters()):
            assert torch.equal(p, q)

    def test_lead_beyond_data(self, series, climatology, config):
        with pytest.raises(InsufficientDataError):
            train_lead_model(series[:18], climatology, 15, config, steps=1)


class TestRangeAssembly:
    def test_segment_ownership(self):
        owners = segment_owners(LEADS)
        assert [d for d, K in owners.items() if K == 20] == [16, 17, 18, 19, 20]
        assert owners[15] == 15 and owners[45] == 45
        assert sorted(owners) == list(range(15, 46))

    def test_overlapping_leads_go_to_the_shortest(self):
        owners = segment_owners([15, 18, 20, 25, 30, 35, 40, 45])
        assert owners[16] == 18 and owners[19] == 20

    def test_uncovered_day(self):
        with pytest.raises(ConfigError):
            segment_owners([15, 25, 30, 35, 40, 45])

    def test_each_day_from_exactly_one_model(self):
        calls = []

        def segment(K):
            calls.append(K)
            return np.arange(K - 4, K + 1, dtype=float)[:, None]

        window = collect_range(LEADS, segment)
        assert sorted(calls) == LEADS
        assert window.fields[:, 0].tolist() == list(range(15, 46))
        assert np.bincount(window.owners)[LEADS].tolist() == [1, 5, 5, 5, 5, 5, 5]

    def test_forecast_range(self, family, init_case, climatology):
        history, day = init_case
        window = forecast_range(family, history, climatology, day)
        assert window.fields.shape == (31, 6, 8, 16)
        assert window.days.tolist() == list(range(15, 46))
        again = forecast_range(family, history, climatology, day)
        np.testing.assert_allclose(window.fields, again.fields, rtol=0, atol=1e-12)

    def test_missing_model_names_the_lead(self, family, init_case, climatology):
        del family[30]
        with pytest.raises(MissingModelError, match="K=30") as info:
            forecast_range(family, *init_case[:1], climatology, init_case[1])
        assert info.value.lead == 30

    def test_noise_off_differs_from_default(self, family, init_case, climatology):
        history, day = init_case
        off = forecast_range(family, history, climatology, day, noise=NoiseConfig(mode="off"))
        det = forecast_range(family, history, climatology, day)
        assert not np.array_equal(off.fields, det.fields)
