import logging
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from ..exceptions import BadMagicError, DataError, NonFiniteError, ShapeMismatchError, TruncatedFileError
from .grid import VariableCatalog, WeatherSeries

log = logging.getLogger(__name__)

MAGIC = b"TQS1"
# K, H, W, T, flags as little-endian u32, then the f64 epoch day of frame 0.
HEADER = struct.Struct("<5Id")

PathLike = Union[str, Path]


def write_gridded(path: PathLike, frames: np.ndarray, first_day: float = 0.0, flags: int = 0) -> Path:
    """Writes T x K x H x W frames as little-endian f32 in (variable, lat, lon) order."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ShapeMismatchError(f"expected T x K x H x W frames, got shape {frames.shape}")
    payload = np.ascontiguousarray(frames, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise NonFiniteError(f"refusing to write non-finite values to {path}")
    T, K, H, W = payload.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(HEADER.pack(K, H, W, T, flags, float(first_day)))
        fh.write(payload.tobytes())
    log.info(f"[GriddedFile] Wrote {T} frames of {K}x{H}x{W} to {path}")
    return path


def read_gridded_header(path: PathLike) -> Tuple[int, int, int, int, int, float]:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> Tuple[int, int, int, int, int, float]:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise TruncatedFileError(f"{path}: header is {len(raw)} bytes, expected {HEADER.size}")
    return HEADER.unpack(raw)


def read_gridded(path: PathLike) -> Tuple[np.ndarray, float, int]:
    """Returns (frames as float32 T x K x H x W, epoch day of frame 0, flags)."""
    with open(path, "rb") as fh:
        K, H, W, T, flags, first_day = _read_header(fh, path)
        expected = 4 * T * K * H * W
        payload = fh.read(expected)
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: payload is {len(payload)} bytes, header promises {expected}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(T, K, H, W)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return frames.astype(np.float32), first_day, flags


def write_series(path: PathLike, series: WeatherSeries) -> Path:
    days = np.asarray(series.days)
    if len(days) > 1 and np.any(np.diff(days) != 1):
        raise ShapeMismatchError("only contiguous daily series can be stored in a gridded file")
    first = float(days[0]) if len(days) else 0.0
    return write_gridded(path, series.values, first_day=first)


def read_series(path: PathLike) -> WeatherSeries:
    frames, first_day, _ = read_gridded(path)
    days = int(first_day) + np.arange(frames.shape[0], dtype=np.int64)
    return WeatherSeries(days, frames)


def write_manifest(path: PathLike, catalog: VariableCatalog, splits: Dict[str, range]) -> Path:
    """Plain-text companion listing variables, levels, units and split years."""
    lines = [
        f"surface_vars = {', '.join(catalog.surface_vars)}",
        f"upper_vars = {', '.join(catalog.upper_vars)}",
        f"levels = {', '.join(str(p) for p in catalog.levels)}",
        f"channels = {', '.join(catalog.channel_names)}",
        f"units = {', '.join(catalog.units())}",
    ]
    for name, years in splits.items():
        span = f"{years.start}-{years.stop - 1}" if len(years) else "none"
        lines.append(f"{name}_years = {span}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def split_path(data_dir: PathLike, split: str) -> Path:
    return Path(data_dir) / f"{split}.tqs"


def load_split(data_dir: PathLike, split: str) -> WeatherSeries:
    path = split_path(data_dir, split)
    if not path.is_file():
        raise DataError(f"no {split} split at {path}; run the synth command first")
    return read_series(path)
