import numpy as np
import pytest

from app.exceptions import BadMagicError, DataError, NonFiniteError, ShapeMismatchError, TruncatedFileError
from app.services.grid import WeatherSeries
from app.services.gridded_file import (
    HEADER,
    MAGIC,
    load_split,
    read_gridded,
    read_gridded_header,
    read_series,
    write_gridded,
    write_manifest,
    write_series,
)


@pytest.fixture
def frames():
    return np.random.default_rng(0).normal(size=(3, 2, 4, 8)).astype(np.float32)


def test_rewrite_is_byte_identical(tmp_path, frames):
    first = write_gridded(tmp_path / "a.tqs", frames, first_day=11000, flags=1)
    read, day, flags = read_gridded(first)
    second = write_gridded(tmp_path / "b.tqs", read, first_day=day, flags=flags)
    assert first.read_bytes() == second.read_bytes()
    assert (day, flags) == (11000.0, 1)


def test_header_layout(tmp_path, frames):
    path = write_gridded(tmp_path / "a.tqs", frames, first_day=5)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert len(raw) == 4 + HEADER.size + frames.nbytes
    assert read_gridded_header(path) == (2, 4, 8, 3, 0, 5.0)


def test_empty_sequence(tmp_path):
    path = write_gridded(tmp_path / "empty.tqs", np.zeros((0, 2, 4, 8)))
    read, _, _ = read_gridded(path)
    assert read.shape == (0, 2, 4, 8)


def test_truncated_payload(tmp_path, frames):
    path = write_gridded(tmp_path / "a.tqs", frames)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(TruncatedFileError):
        read_gridded(path)


def test_truncated_header(tmp_path):
    path = tmp_path / "short.tqs"
    path.write_bytes(MAGIC + b"\x01\x00")
    with pytest.raises(TruncatedFileError):
        read_gridded(path)


def test_bad_magic(tmp_path, frames):
    path = write_gridded(tmp_path / "a.tqs", frames)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        read_gridded(path)


def test_rejects_non_finite_and_bad_rank(tmp_path, frames):
    frames[0, 0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        write_gridded(tmp_path / "a.tqs", frames)
    with pytest.raises(ShapeMismatchError):
        write_gridded(tmp_path / "b.tqs", frames[0])


def test_series_keeps_days(tmp_path, frames):
    series = WeatherSeries(np.arange(11000, 11003), frames)
    back = read_series(write_series(tmp_path / "s.tqs", series))
    assert back.days.tolist() == [11000, 11001, 11002]
    np.testing.assert_array_equal(back.values, frames)


def test_series_must_be_contiguous(tmp_path, frames):
    with pytest.raises(ShapeMismatchError):
        write_series(tmp_path / "s.tqs", WeatherSeries(np.array([1, 2, 4]), frames))


def test_manifest_and_missing_split(tmp_path, catalog, splits):
    text = write_manifest(tmp_path / "manifest.txt", catalog, splits).read_text()
    assert "channels = lsm, t2m, z500, z850, t500, t850" in text
    assert "train_years = 2000-2000" in text
    with pytest.raises(DataError):
        load_split(tmp_path, "train")
