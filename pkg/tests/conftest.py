import numpy as np
import pytest
import torch

from app.config import save_run_config
from app.schemas import RunConfig
from app.services.grid import (
    Normalizer,
    catalog_from_config,
    compute_climatology,
    spec_from_config,
    split_years,
    synth_dataset,
)
from app.models.forecaster import build_model

LEADS = [15, 20, 25, 30, 35, 40, 45]


def tiny_config(root=None, **sections) -> RunConfig:
    """8x16 grid, K=6 channels, a two-block D=16 model and a short schedule."""
    data = {
        "grid": {"height": 8, "width": 16, "patch_size": 4, "start_year": 2000, "years": 3},
        "model": {"embed_dim": 16, "depth": 2, "heads": 2, "mlp_ratio": 2.0, "fusion_rank": 4},
        "train": {"warmup_steps": 5, "total_steps": 60, "batch_size": 4, "lr": 3e-3, "log_every": 20},
        "ensemble": {"members": 4, "sweep_sigmas": [0.0, 1.0]},
    }
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    if root is not None:
        data["paths"] = {
            "data_dir": str(root / "data"),
            "checkpoint_dir": str(root / "checkpoints"),
            "output_dir": str(root / "outputs"),
        }
    return RunConfig.model_validate(data)


@pytest.fixture
def config(tmp_path) -> RunConfig:
    return tiny_config(tmp_path)


@pytest.fixture
def config_file(tmp_path, config):
    return save_run_config(config, tmp_path / "run.toml")


@pytest.fixture
def grid(config):
    return spec_from_config(config.grid)


@pytest.fixture
def catalog(config):
    return catalog_from_config(config.grid)


@pytest.fixture
def series(config, grid, catalog):
    return synth_dataset(grid, catalog, config.grid.years, seed=0, start_year=config.grid.start_year)


@pytest.fixture
def splits(config):
    return split_years(config.grid.start_year, config.grid.years)


@pytest.fixture
def climatology(series, splits):
    return compute_climatology(series.select_years(splits["train"]), splits["train"])


@pytest.fixture
def family(config, series, splits):
    """Untrained PM_K models for every lead, sharing the training-split normalizer."""
    norm = Normalizer.fit(series.select_years(splits["train"]).values)
    models = {}
    for K in LEADS:
        model = build_model(config, K)
        model.set_normalizer(norm)
        models[K] = model
    return models


@pytest.fixture
def init_case(series, splits, config):
    """(raw history, epoch day) for the first usable test-split initialisation."""
    test = series.select_years(splits["test"])
    h = config.train.history
    return test.values[:h].astype(np.float64), int(test.days[h - 1])


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield
