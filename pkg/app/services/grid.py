"""Gridded weather data model: geometry, variables, daily states, climatology
and the synthetic reanalysis surrogate used for desk-scale training."""
import logging
from dataclasses import dataclass, field
from functools import cached_property
from collections import abc
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..exceptions import ConfigError, MissingDaysError, NonFiniteError, ShapeMismatchError

log = logging.getLogger(__name__)

STATIC_VARS = ("lsm", "orography")
CALENDAR_SLOTS = 366
LEAP_SLOT = 365  # 29 February
SIX_HOURLY = (0, 6, 12, 18)

UNITS = {
    "lsm": "1",
    "orography": "m",
    "t2m": "K",
    "wind10": "m s-1",
    "z": "m2 s-2",
    "t": "K",
    "wind": "m s-1",
    "q": "kg kg-1",
    "r": "%",
    "u": "m s-1",
    "v": "m s-1",
}


@dataclass(frozen=True)
class GridSpec:
    lats: Tuple[float, ...]
    lons: Tuple[float, ...]
    patch_size: int = 4

    def __post_init__(self):
        lats = np.asarray(self.lats, dtype=np.float64)
        lons = np.asarray(self.lons, dtype=np.float64)
        if lats.size == 0 or lons.size == 0:
            raise ConfigError("grid needs at least one latitude and one longitude")
        if np.any(np.abs(lats) > 90.0):
            raise ConfigError("latitudes must lie within [-90, 90]")
        if lats.size > 1 and np.any(np.diff(lats) >= 0):
            raise ConfigError("latitudes must be strictly decreasing")
        if np.any(lons < -180.0) or np.any(lons >= 180.0):
            raise ConfigError("longitudes must lie within [-180, 180)")
        if lons.size > 1 and np.any(np.diff(lons) <= 0):
            raise ConfigError("longitudes must be strictly increasing")
        if self.patch_size < 1 or lats.size % self.patch_size or lons.size % self.patch_size:
            raise ConfigError(
                f"patch size {self.patch_size} must divide the {lats.size}x{lons.size} grid"
            )

    @classmethod
    def regular(cls, height: int, width: int, patch_size: int = 4) -> "GridSpec":
        """Cell-centred grid; pole rows sit half a cell away from the poles."""
        lats = 90.0 - (np.arange(height) + 0.5) * 180.0 / height
        lons = -180.0 + (np.arange(width) + 0.5) * 360.0 / width
        return cls(tuple(lats.tolist()), tuple(lons.tolist()), patch_size)

    @property
    def H(self) -> int:
        return len(self.lats)

    @property
    def W(self) -> int:
        return len(self.lons)

    @property
    def P(self) -> int:
        return self.patch_size

    @property
    def num_patches(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @cached_property
    def weights(self) -> np.ndarray:
        return latitude_weights(self)

    def patch_centers(self) -> np.ndarray:
        """(L, 2) array of patch-centre (lat, lon), patches in row-major order."""
        lats = np.asarray(self.lats).reshape(-1, self.P).mean(axis=1)
        lons = np.asarray(self.lons).reshape(-1, self.P).mean(axis=1)
        la, lo = np.meshgrid(lats, lons, indexing="ij")
        return np.stack([la.ravel(), lo.ravel()], axis=-1)


@dataclass(frozen=True)
class VariableCatalog:
    """Channel bookkeeping: surface channels first, then upper-air variables
    variable-major with their pressure levels."""

    surface_vars: Tuple[str, ...]
    upper_vars: Tuple[str, ...]
    levels: Tuple[int, ...]

    def __post_init__(self):
        names = list(self.surface_vars) + list(self.upper_vars)
        if len(set(names)) != len(names):
            raise ConfigError(f"variable names must be unique: {names}")
        if not self.surface_vars:
            raise ConfigError("catalog needs at least one surface variable")
        if self.upper_vars and not self.levels:
            raise ConfigError("upper-air variables need at least one pressure level")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ConfigError("pressure levels must be strictly increasing")

    @classmethod
    def from_lists(cls, surface: Sequence[str], upper: Sequence[str], levels: Sequence[int]):
        return cls(tuple(surface), tuple(upper), tuple(int(p) for p in levels))

    @property
    def V_S(self) -> int:
        return len(self.surface_vars)

    @property
    def V_A(self) -> int:
        return len(self.upper_vars)

    @property
    def C(self) -> int:
        return len(self.levels)

    @property
    def K(self) -> int:
        return self.V_A * self.C + self.V_S

    @property
    def n_dynamic(self) -> int:
        """Channel count without the static fields."""
        return self.K - len(self.static_channels)

    @property
    def channel_names(self) -> List[str]:
        upper = [f"{v}{p}" for v in self.upper_vars for p in self.levels]
        return list(self.surface_vars) + upper

    @property
    def static_channels(self) -> List[int]:
        return [i for i, v in enumerate(self.surface_vars) if v in STATIC_VARS]

    def channel_groups(self) -> List[Tuple[str, slice]]:
        """One group per variable: a single channel per surface variable, C
        consecutive channels per upper-air variable."""
        groups = [(v, slice(i, i + 1)) for i, v in enumerate(self.surface_vars)]
        for n, v in enumerate(self.upper_vars):
            start = self.V_S + n * self.C
            groups.append((v, slice(start, start + self.C)))
        return groups

    def units(self) -> List[str]:
        units = [UNITS.get(v, "1") for v in self.surface_vars]
        for v in self.upper_vars:
            units.extend([UNITS.get(v, "1")] * self.C)
        return units


@dataclass(frozen=True, eq=False)
class WeatherState:
    day_index: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeMismatchError(f"state must be K x H x W, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteError(f"non-finite values in state for day {self.day_index}")


@dataclass(frozen=True, eq=False)
class WeatherSeries(abc.Sequence):
    """Daily states held as one T x K x H x W array."""

    days: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 4 or self.values.shape[0] != len(self.days):
            raise ShapeMismatchError(
                f"series needs T x K x H x W values for {len(self.days)} days, got {self.values.shape}"
            )

    @classmethod
    def from_states(cls, states: Sequence[WeatherState]) -> "WeatherSeries":
        days = np.array([s.day_index for s in states], dtype=np.int64)
        if not len(states):
            raise MissingDaysError("empty state sequence")
        return cls(days, np.stack([s.values for s in states]))

    def __len__(self) -> int:
        return len(self.days)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return WeatherSeries(self.days[i], self.values[i])
        return WeatherState(int(self.days[i]), self.values[i])

    def __iter__(self) -> Iterator[WeatherState]:
        for i in range(len(self)):
            yield self[i]

    def select_years(self, years: Sequence[int]) -> "WeatherSeries":
        mask = np.isin(pd.to_datetime(self.days, unit="D").year, list(years))
        return WeatherSeries(self.days[mask], self.values[mask])


@dataclass(frozen=True, eq=False)
class Climatology:
    per_day: np.ndarray  # 366 x K x H x W
    years_used: range

    def lookup(self, day_index: Union[int, np.ndarray]) -> np.ndarray:
        return self.per_day[calendar_index(day_index)]


@dataclass
class Normalizer:
    """Per-variable standardization fitted on the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        values = np.asarray(values, dtype=np.float64)
        mean = values.mean(axis=(0, 2, 3))
        std = values.std(axis=(0, 2, 3))
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[:, None, None] + self.mean[:, None, None]


def latitude_weights(spec: Union[GridSpec, Sequence[float]]) -> np.ndarray:
    """L(i) = cos(lat_i) / mean(cos(lat)); the weights average to one."""
    lats = np.asarray(spec.lats if isinstance(spec, GridSpec) else spec, dtype=np.float64)
    if lats.size == 0:
        raise ConfigError("latitude list is empty")
    if np.any(np.abs(lats) > 90.0):
        raise ConfigError("latitudes must lie within [-90, 90]")
    cos = np.cos(np.deg2rad(lats))
    total = cos.mean()
    if total <= 0:
        raise ConfigError("latitudes all sit on the poles; weights are undefined")
    return cos / total


def calendar_index(day_index: Union[int, np.ndarray]) -> Union[int, np.ndarray]:
    """Climatology slot of a day: 0..364 in non-leap month/day order, 365 for 29 Feb."""
    scalar = np.ndim(day_index) == 0
    dates = pd.to_datetime(np.atleast_1d(np.asarray(day_index, dtype=np.int64)), unit="D")
    doy = dates.dayofyear.to_numpy() - 1
    leap = np.asarray(dates.is_leap_year)
    slot = np.where(leap & (doy > 59), doy - 1, doy)
    slot = np.where(leap & (doy == 59), LEAP_SLOT, slot)
    return int(slot[0]) if scalar else slot


def epoch_day(year: int, month: int = 1, day: int = 1) -> int:
    return int((pd.Timestamp(year=year, month=month, day=day) - pd.Timestamp(1970, 1, 1)).days)


def days_in_years(years: Sequence[int]) -> np.ndarray:
    years = list(years)
    return np.arange(epoch_day(years[0]), epoch_day(years[-1] + 1), dtype=np.int64)


def daily_average(hourly: np.ndarray, wind_component_pairs: Sequence[Tuple[int, int, int]] = ()) -> np.ndarray:
    """Daily mean of 24 hourly frames sampled at 00, 06, 12 and 18 UTC.

    Each (u, v, target) pair consumes channels u and v and places the mean of
    the per-sample speed sqrt(u^2 + v^2) at output channel ``target``; the
    remaining channels fill the other output slots in their original order.
    """
    hourly = np.asarray(hourly, dtype=np.float64)
    if hourly.ndim != 4 or hourly.shape[0] != 24:
        raise ShapeMismatchError(f"expected 24 x K x H x W hourly frames, got {hourly.shape}")
    K = hourly.shape[1]
    consumed = [i for u, v, _ in wind_component_pairs for i in (u, v)]
    targets = [t for _, _, t in wind_component_pairs]
    K_out = K - len(wind_component_pairs)
    if len(set(consumed)) != len(consumed) or any(not 0 <= i < K for i in consumed):
        raise ShapeMismatchError(f"wind component indices collide or fall outside 0..{K - 1}")
    if len(set(targets)) != len(targets) or any(not 0 <= t < K_out for t in targets):
        raise ShapeMismatchError(f"wind target indices collide or fall outside 0..{K_out - 1}")

    samples = hourly[list(SIX_HOURLY)]
    out = np.empty((K_out,) + hourly.shape[2:], dtype=np.float64)
    for u, v, target in wind_component_pairs:
        out[target] = np.sqrt(samples[:, u] ** 2 + samples[:, v] ** 2).mean(axis=0)
    scalars = [k for k in range(K) if k not in consumed]
    slots = [k for k in range(K_out) if k not in targets]
    out[slots] = samples[:, scalars].mean(axis=0)
    return out


def compute_climatology(states: Union[WeatherSeries, Sequence[WeatherState]], years: range) -> Climatology:
    series = states if isinstance(states, WeatherSeries) else WeatherSeries.from_states(states)
    if not isinstance(years, range):
        years = range(min(years), max(years) + 1)
    if len(years) == 0:
        raise MissingDaysError("no years declared for the climatology")

    expected = days_in_years(years)
    present = np.isin(expected, series.days)
    if not present.all():
        first_missing = pd.to_datetime(expected[~present][0], unit="D").date()
        raise MissingDaysError(
            f"{int((~present).sum())} days missing within {years.start}-{years.stop - 1}, first {first_missing}"
        )

    mask = np.isin(series.days, expected)
    days = series.days[mask]
    values = series.values[mask].astype(np.float64)
    slots = calendar_index(days)

    per_day = np.zeros((CALENDAR_SLOTS,) + values.shape[1:], dtype=np.float64)
    counts = np.bincount(slots, minlength=CALENDAR_SLOTS)
    np.add.at(per_day, slots, values)
    filled = counts > 0
    per_day[filled] /= counts[filled][:, None, None, None]
    if not filled[LEAP_SLOT]:
        # No leap year in range: bridge 28 Feb and 1 Mar.
        per_day[LEAP_SLOT] = 0.5 * (per_day[58] + per_day[59])
    log.info(f"Climatology computed over {years.start}-{years.stop - 1} from {len(days)} daily states")
    return Climatology(per_day, years)


# --- Synthetic reanalysis surrogate ---
SLOW_MODE_PERIOD = 45.0
ANNUAL_PERIOD = 365.0
RED_NOISE_RHO = 0.8


@dataclass(frozen=True)
class _Profile:
    base: float
    pole_drop: float
    annual: float
    wave: float
    noise: float


def _profile(name: str, level: Optional[int]) -> _Profile:
    p = (level or 1000) / 1000.0
    if name in ("t2m", "t"):
        return _Profile(250.0 + 40.0 * p, 30.0, 12.0 if name == "t2m" else 8.0, 3.0, 1.5)
    if name == "z":
        return _Profile(9.80665 * 7000.0 * np.log(1.0 / p), 2000.0 * (1.0 - p) + 300.0, 400.0, 600.0, 200.0)
    if name in ("wind", "wind10", "u", "v"):
        return _Profile(6.0 + 6.0 * (1.0 - p), -4.0, 2.0, 1.5, 1.0)
    if name == "q":
        return _Profile(0.012 * p, 0.01 * p, 0.002, 0.001, 0.0005)
    if name == "r":
        return _Profile(65.0, 10.0, 10.0, 8.0, 5.0)
    return _Profile(0.0, 0.0, 1.0, 1.0, 0.5)


@dataclass(frozen=True, eq=False)
class SyntheticClimate:
    """Analytic generator: annual cycle + propagating slow mode + red noise.

    The annual and slow-mode components are exposed separately so callers can
    evaluate the deterministic part of the field for any day.
    """

    spec: GridSpec
    catalog: VariableCatalog
    seed: int = 0
    noise_amplitude: float = 1.0
    profiles: List[_Profile] = field(init=False)
    phases: np.ndarray = field(init=False)

    def __post_init__(self):
        profiles = [_profile(v, None) for v in self.catalog.surface_vars]
        for v in self.catalog.upper_vars:
            profiles.extend(_profile(v, p) for p in self.catalog.levels)
        rng = np.random.default_rng([self.seed, 0])
        object.__setattr__(self, "profiles", profiles)
        object.__setattr__(self, "phases", rng.uniform(0.0, 2.0 * np.pi, size=self.catalog.K))

    @cached_property
    def _lat(self) -> np.ndarray:
        return np.deg2rad(np.asarray(self.spec.lats))[:, None]

    @cached_property
    def _lon(self) -> np.ndarray:
        return np.deg2rad(np.asarray(self.spec.lons))[None, :]

    def static_fields(self) -> Dict[str, np.ndarray]:
        lat, lon = self._lat, self._lon
        land = np.sin(2.0 * lon) * np.cos(lat) + 0.3 * np.sin(3.0 * lat)
        lsm = (land > 0).astype(np.float64)
        orography = 2500.0 * np.clip(land, 0.0, None) * lsm
        return {"lsm": lsm, "orography": orography}

    def annual_cycle(self, days: np.ndarray) -> np.ndarray:
        """T x K x H x W climatological component, exactly periodic in 365 days."""
        days = np.asarray(days, dtype=np.float64)[:, None, None]
        lat = self._lat
        out = np.empty((days.shape[0], self.catalog.K) + (self.spec.H, self.spec.W))
        statics = self.static_fields()
        for k, prof in enumerate(self.profiles):
            var = self._variable_of(k)
            if var in STATIC_VARS:
                out[:, k] = statics[var]
                continue
            lag = 20.0 + 15.0 * np.abs(np.sin(lat))
            base = prof.base - prof.pole_drop * np.sin(lat) ** 2
            cycle = prof.annual * np.sin(lat) * np.cos(2.0 * np.pi * (days - lag) / ANNUAL_PERIOD)
            out[:, k] = base + cycle + 0.0 * self._lon
        return out

    def slow_mode(self, days: np.ndarray) -> np.ndarray:
        """Eastward-propagating wavenumber-1 mode with a 45-day period."""
        days = np.asarray(days, dtype=np.float64)[:, None, None]
        envelope = np.cos(self._lat) ** 2
        out = np.zeros((days.shape[0], self.catalog.K, self.spec.H, self.spec.W))
        for k, prof in enumerate(self.profiles):
            if self._variable_of(k) in STATIC_VARS:
                continue
            phase = self._lon - 2.0 * np.pi * days / SLOW_MODE_PERIOD + self.phases[k]
            out[:, k] = prof.wave * envelope * np.cos(phase)
        return out

    def red_noise(self, n_days: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 1])
        shape = (self.catalog.K, self.spec.H, self.spec.W)
        scale = np.array([0.0 if self._variable_of(k) in STATIC_VARS else p.noise
                          for k, p in enumerate(self.profiles)])[:, None, None]
        innovation = np.sqrt(1.0 - RED_NOISE_RHO ** 2)
        out = np.empty((n_days,) + shape)
        state = rng.standard_normal(shape)
        for t in range(n_days):
            out[t] = state
            state = RED_NOISE_RHO * state + innovation * rng.standard_normal(shape)
        return out * scale * self.noise_amplitude

    def generate(self, days: np.ndarray) -> np.ndarray:
        values = self.annual_cycle(days) + self.slow_mode(days)
        if self.noise_amplitude > 0:
            values = values + self.red_noise(len(days))
        return values.astype(np.float32)

    def _variable_of(self, k: int) -> str:
        if k < self.catalog.V_S:
            return self.catalog.surface_vars[k]
        return self.catalog.upper_vars[(k - self.catalog.V_S) // self.catalog.C]


def synth_dataset(
    spec: GridSpec,
    catalog: VariableCatalog,
    years: int,
    seed: int,
    start_year: int = 2000,
    noise_amplitude: float = 1.0,
) -> WeatherSeries:
    if years < 2:
        raise ConfigError("synthetic dataset needs at least 2 years to split train/test")
    days = days_in_years(range(start_year, start_year + years))
    values = SyntheticClimate(spec, catalog, seed, noise_amplitude).generate(days)
    log.info(f"Synthesized {len(days)} days ({start_year}-{start_year + years - 1}) "
             f"on a {spec.H}x{spec.W} grid with K={catalog.K}, seed={seed}")
    return WeatherSeries(days, values)


def split_years(start_year: int, years: int) -> Dict[str, range]:
    """N-2 training years, then one validation and one test year."""
    if years < 3:
        return {"train": range(start_year, start_year + years - 1),
                "val": range(0),
                "test": range(start_year + years - 1, start_year + years)}
    end = start_year + years
    return {
        "train": range(start_year, end - 2),
        "val": range(end - 2, end - 1),
        "test": range(end - 1, end),
    }


def spec_from_config(section) -> GridSpec:
    """GridSpec for a ``[grid]`` run-config section."""
    return GridSpec.regular(section.height, section.width, section.patch_size)


def catalog_from_config(section) -> VariableCatalog:
    return VariableCatalog.from_lists(section.surface_vars, section.upper_vars, section.levels)


def split_by_years(series: WeatherSeries, start_year: int, years: int) -> Dict[str, WeatherSeries]:
    return {name: series.select_years(span) for name, span in split_years(start_year, years).items()}
