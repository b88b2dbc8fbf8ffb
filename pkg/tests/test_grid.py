import numpy as np
import pytest

from app.exceptions import ConfigError, MissingDaysError, NonFiniteError, ShapeMismatchError
from app.services.grid import (
    LEAP_SLOT,
    GridSpec,
    Normalizer,
    SyntheticClimate,
    VariableCatalog,
    WeatherSeries,
    WeatherState,
    calendar_index,
    compute_climatology,
    daily_average,
    days_in_years,
    epoch_day,
    latitude_weights,
    split_by_years,
    split_years,
    synth_dataset,
)


class TestLatitudeWeights:
    def test_equator_and_sixty(self):
        np.testing.assert_allclose(latitude_weights([0.0, 60.0]), [4 / 3, 2 / 3], rtol=1e-12)

    def test_repeated_latitude(self):
        np.testing.assert_allclose(latitude_weights([37.0, 37.0, 37.0]), [1.0, 1.0, 1.0], rtol=1e-12)

    def test_symmetric_pair(self):
        np.testing.assert_allclose(latitude_weights([45.0, -45.0]), [1.0, 1.0], rtol=1e-12)

    def test_weights_average_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            lats = rng.uniform(-89.9, 89.9, size=rng.integers(1, 40))
            assert abs(latitude_weights(lats).mean() - 1.0) < 1e-12

    def test_regular_grid_weights(self):
        spec = GridSpec.regular(16, 32, 4)
        assert spec.weights.shape == (16,)
        assert abs(spec.weights.mean() - 1.0) < 1e-12

    @pytest.mark.parametrize("lats", [[], [95.0], [-91.0, 0.0]])
    def test_invalid_latitudes(self, lats):
        with pytest.raises(ConfigError):
            latitude_weights(lats)


class TestGridSpec:
    @pytest.mark.parametrize("height,width,patch,expected", [(32, 64, 4, 128), (16, 32, 4, 32), (4, 4, 4, 1)])
    def test_num_patches(self, height, width, patch, expected):
        assert GridSpec.regular(height, width, patch).num_patches == expected

    def test_patch_must_divide_grid(self):
        with pytest.raises(ConfigError):
            GridSpec.regular(10, 16, 4)

    def test_latitudes_must_decrease(self):
        with pytest.raises(ConfigError):
            GridSpec((-10.0, 10.0), (0.0, 10.0), patch_size=1)

    def test_patch_centres_row_major(self):
        spec = GridSpec.regular(8, 16, 4)
        centres = spec.patch_centers()
        assert centres.shape == (8, 2)
        assert centres[0, 0] == centres[3, 0] > centres[4, 0]
        assert centres[0, 1] < centres[1, 1]


class TestCatalog:
    def test_channel_layout(self):
        catalog = VariableCatalog.from_lists(["lsm", "t2m"], ["z", "t"], [500, 850])
        assert catalog.K == 6
        assert catalog.channel_names == ["lsm", "t2m", "z500", "z850", "t500", "t850"]
        assert catalog.static_channels == [0]
        assert catalog.n_dynamic == 5
        assert [sl for _, sl in catalog.channel_groups()][-1] == slice(4, 6)

    def test_duplicate_names(self):
        with pytest.raises(ConfigError):
            VariableCatalog.from_lists(["t"], ["t"], [500])

    def test_upper_vars_need_levels(self):
        with pytest.raises(ConfigError):
            VariableCatalog.from_lists(["t2m"], ["z"], [])


class TestDailyAverage:
    def test_wind_speed_of_constant_components(self):
        hourly = np.zeros((24, 2, 1, 1))
        hourly[:, 0], hourly[:, 1] = 3.0, 4.0
        np.testing.assert_allclose(daily_average(hourly, [(0, 1, 0)]), [[[5.0]]])

    def test_constant_scalar(self):
        hourly = np.full((24, 1, 2, 3), 7.5)
        np.testing.assert_allclose(daily_average(hourly), np.full((1, 2, 3), 7.5))

    def test_magnitude_before_mean(self):
        hourly = np.zeros((24, 2, 1, 1))
        hourly[:, 0, 0, 0] = np.where((np.arange(24) // 6) % 2 == 0, 1.0, -1.0)
        out = daily_average(hourly, [(0, 1, 0)])
        assert out[0, 0, 0] == pytest.approx(1.0)
        assert daily_average(hourly[:, :1])[0, 0, 0] == pytest.approx(0.0)

    def test_wind_pair_keeps_scalar_order(self):
        hourly = np.zeros((24, 4, 1, 1))
        hourly[:, 0], hourly[:, 1], hourly[:, 2], hourly[:, 3] = 10.0, 3.0, 4.0, 20.0
        out = daily_average(hourly, [(1, 2, 1)])
        np.testing.assert_allclose(out[:, 0, 0], [10.0, 5.0, 20.0])

    def test_wrong_sample_count(self):
        with pytest.raises(ShapeMismatchError):
            daily_average(np.zeros((12, 1, 1, 1)))


class TestCalendar:
    def test_slots(self):
        assert calendar_index(epoch_day(2001, 1, 1)) == 0
        assert calendar_index(epoch_day(2001, 3, 1)) == 59
        assert calendar_index(epoch_day(2000, 3, 1)) == 59
        assert calendar_index(epoch_day(2000, 2, 29)) == LEAP_SLOT
        assert calendar_index(epoch_day(2000, 12, 31)) == 364

    def test_vectorised(self):
        days = days_in_years(range(2000, 2001))
        slots = calendar_index(days)
        assert len(days) == 366
        assert sorted(slots.tolist()) == list(range(366))


def _series(years, fill):
    days = days_in_years(years)
    values = np.stack([fill(d) for d in days])
    return WeatherSeries(days, values)


class TestClimatology:
    def test_single_year_is_that_year(self):
        rng = np.random.default_rng(0)
        days = days_in_years(range(2001, 2002))
        values = rng.normal(size=(len(days), 2, 2, 3))
        clim = compute_climatology(WeatherSeries(days, values), range(2001, 2002))
        np.testing.assert_allclose(clim.lookup(days), values)

    def test_two_year_mean(self):
        rng = np.random.default_rng(1)
        f = rng.normal(size=(365, 1, 2, 2))
        days = days_in_years(range(2001, 2003))
        clim = compute_climatology(WeatherSeries(days, np.concatenate([f, f + 2.0])), range(2001, 2003))
        np.testing.assert_allclose(clim.per_day[:365], f + 1.0, rtol=1e-12)

    def test_leap_slot_from_leap_years_only(self):
        series = _series(range(2003, 2005), lambda d: np.full((1, 1, 1), 0.0 if d < epoch_day(2004) else 1.0))
        clim = compute_climatology(series, range(2003, 2005))
        assert clim.per_day[LEAP_SLOT, 0, 0, 0] == 1.0
        assert clim.per_day[0, 0, 0, 0] == 0.5

    def test_missing_day(self):
        days = days_in_years(range(2001, 2002))
        series = WeatherSeries(np.delete(days, 100), np.zeros((len(days) - 1, 1, 1, 1)))
        with pytest.raises(MissingDaysError):
            compute_climatology(series, range(2001, 2002))


class TestStatesAndNormalizer:
    def test_non_finite_state(self):
        values = np.zeros((1, 2, 2))
        values[0, 1, 1] = np.nan
        with pytest.raises(NonFiniteError):
            WeatherState(0, values)

    def test_series_shape(self):
        with pytest.raises(ShapeMismatchError):
            WeatherSeries(np.arange(3), np.zeros((2, 1, 1, 1)))

    def test_standardize_round_trip(self):
        rng = np.random.default_rng(2)
        values = rng.normal(5.0, 3.0, size=(10, 3, 4, 4))
        values[:, 0] = 1.0
        norm = Normalizer.fit(values)
        assert norm.std[0] == 1.0
        std = norm.standardize(values)
        np.testing.assert_allclose(std[:, 1:].mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        np.testing.assert_allclose(norm.destandardize(std), values, rtol=1e-12)


class TestSynthetic:
    @pytest.fixture
    def spec_catalog(self):
        return GridSpec.regular(8, 16, 4), VariableCatalog.from_lists(["lsm", "t2m"], ["z", "t"], [500, 850])

    def test_same_seed_is_bitwise_identical(self, spec_catalog):
        a = synth_dataset(*spec_catalog, years=2, seed=3)
        b = synth_dataset(*spec_catalog, years=2, seed=3)
        assert a.values.tobytes() == b.values.tobytes()
        assert a.values.dtype == np.float32

    def test_seed_changes_values(self, spec_catalog):
        a = synth_dataset(*spec_catalog, years=2, seed=3)
        b = synth_dataset(*spec_catalog, years=2, seed=4)
        assert a.values.shape == b.values.shape
        assert a.values.tobytes() != b.values.tobytes()

    def test_noise_free_year_differs_by_slow_mode_only(self, spec_catalog):
        climate = SyntheticClimate(*spec_catalog, seed=0, noise_amplitude=0.0)
        days = np.arange(epoch_day(2001), epoch_day(2001) + 30)
        np.testing.assert_allclose(climate.annual_cycle(days), climate.annual_cycle(days + 365), rtol=1e-9, atol=1e-6)
        drift = climate.generate(days + 365).astype(np.float64) - climate.generate(days)
        expected = climate.slow_mode(days + 365) - climate.slow_mode(days)
        np.testing.assert_allclose(drift, expected, atol=0.05)

    def test_static_fields_are_constant(self, spec_catalog):
        series = synth_dataset(*spec_catalog, years=2, seed=0)
        assert np.all(series.values[:, 0] == series.values[0, 0])

    def test_needs_two_years(self, spec_catalog):
        with pytest.raises(ConfigError):
            synth_dataset(*spec_catalog, years=1, seed=0)


class TestSplits:
    def test_four_years(self):
        splits = split_years(2000, 4)
        assert (list(splits["train"]), list(splits["val"]), list(splits["test"])) == ([2000, 2001], [2002], [2003])

    def test_two_years(self):
        splits = split_years(2000, 2)
        assert list(splits["train"]) == [2000] and len(splits["val"]) == 0 and list(splits["test"]) == [2001]

    def test_split_series(self, series, splits):
        parts = split_by_years(series, 2000, 3)
        assert sum(len(p) for p in parts.values()) == len(series)
        assert len(parts["train"]) == 366
