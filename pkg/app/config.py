import os
import logging
from pathlib import Path
from typing import Union

import tomlkit
from dotenv import load_dotenv
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .exceptions import ConfigError
from .schemas import RunConfig

load_dotenv()
log = logging.getLogger(__name__)

PRESETS = ("desk", "full", "paper")
PRESET_ALIASES = {"paper": "full"}


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="TQS_", env_file=".env", extra="ignore")

    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    broker_url: str = "memory://"
    result_backend: str = "cache+memory://"
    log_level: str = "INFO"

    @property
    def eager(self) -> bool:
        return self.broker_url.startswith("memory")


settings = Settings()


def preset(name: str) -> RunConfig:
    """Named configuration presets: the desk-scale default and the full-scale one."""
    name = PRESET_ALIASES.get(name, name)
    if name == "desk":
        return RunConfig()
    if name == "full":
        return RunConfig.model_validate({
            "grid": {
                "height": 32,
                "width": 64,
                "patch_size": 4,
                "start_year": 1979,
                "years": 40,
                "surface_vars": ["lsm", "orography", "t2m", "wind10"],
                "upper_vars": ["z", "wind", "t", "q", "r"],
                "levels": [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000],
            },
            "model": {
                "embed_dim": 384,
                "depth": 8,
                "heads": 12,
                "drop_path": 0.1,
                "dropout": 0.12,
            },
            "train": {
                "lr": 5e-5,
                "warmup_steps": 5000,
                "total_steps": 100000,
            },
        })
    raise ConfigError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")


def _read_toml(text: str) -> dict:
    try:
        return tomlkit.parse(text).unwrap()
    except Exception as e:
        raise ConfigError(f"config is not valid TOML: {e}") from e


def validate_run_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config key {where}: {first['msg']}") from e


def parse_run_config(text: str) -> RunConfig:
    return validate_run_config(_read_toml(text))


def dump_run_config(config: RunConfig) -> str:
    doc = tomlkit.document()
    for section, values in config.model_dump(mode="json").items():
        table = tomlkit.table()
        for key, value in values.items():
            table.add(key, value)
        doc.add(section, table)
    return tomlkit.dumps(doc)


def load_run_config(path: Union[str, Path, None] = None, preset_name: str = "desk") -> RunConfig:
    """Reads a config file; keys it leaves out fall back to the named preset."""
    base = preset(preset_name)
    if path is None:
        return base
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    merged = base.model_dump()
    for section, values in _read_toml(path.read_text()).items():
        if isinstance(values, dict) and isinstance(merged.get(section), dict):
            merged[section].update(values)
        else:
            merged[section] = values
    config = validate_run_config(merged)
    log.info(f"Run config loaded from {path} on top of preset '{preset_name}'")
    return config


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_run_config(config))
    return path
