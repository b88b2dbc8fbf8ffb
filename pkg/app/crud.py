"""Checkpoint persistence: one versioned TQCK container per lead model.

Layout: b"TQCK", u32 version, u32 manifest length, the JSON manifest, then the
tensor payloads (little-endian f32 or f64) at the offsets the manifest lists.
"""
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import torch
from pydantic import ValidationError

from .exceptions import BadMagicError, DataError, MissingModelError, TruncatedFileError
from .models.forecaster import S2SForecaster
from .schemas import CheckpointManifest, RunConfig, TensorEntry
from .services.grid import Normalizer, catalog_from_config, spec_from_config
from .services.training import TrainResult, build_optimizer

log = logging.getLogger(__name__)

MAGIC = b"TQCK"
VERSION = 1
PREAMBLE = struct.Struct("<II")
OPTIM_PREFIX = "optim."
NUMPY_DTYPES = {"f32": "<f4", "f64": "<f8"}

PathLike = Union[str, Path]


def checkpoint_path(directory: PathLike, lead: int) -> Path:
    return Path(directory) / f"pm_{lead:02d}.tqck"


def _tensor_table(model: S2SForecaster, optimizer: Optional[torch.optim.Optimizer]) -> Dict[str, torch.Tensor]:
    table = {name: p.detach() for name, p in model.named_parameters()}
    if optimizer is not None:
        for name, p in model.named_parameters():
            state = optimizer.state.get(p, {})
            for key in ("exp_avg", "exp_avg_sq"):
                if key in state:
                    table[f"{OPTIM_PREFIX}{name}.{key}"] = state[key].detach()
    return table


def _adam_step(optimizer: Optional[torch.optim.Optimizer]) -> int:
    if optimizer is None:
        return 0
    steps = [int(s["step"]) for s in optimizer.state.values() if "step" in s]
    return max(steps, default=0)


def create_checkpoint(
    directory: PathLike,
    model: S2SForecaster,
    config: RunConfig,
    step: int,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Path:
    tensors = _tensor_table(model, optimizer)
    entries: List[TensorEntry] = []
    payloads: List[bytes] = []
    offset = 0
    for name, t in tensors.items():
        dtype = "f64" if t.dtype == torch.float64 else "f32"
        raw = np.ascontiguousarray(t.cpu().numpy(), dtype=NUMPY_DTYPES[dtype]).tobytes()
        entries.append(TensorEntry(name=name, shape=list(t.shape), dtype=dtype, offset=offset, nbytes=len(raw)))
        payloads.append(raw)
        offset += len(raw)

    norm = model.normalizer
    manifest = CheckpointManifest(
        version=VERSION,
        lead=model.lead,
        step=step,
        optimizer_step=_adam_step(optimizer),
        tensors=entries,
        norm_mean=norm.mean.tolist(),
        norm_std=norm.std.tolist(),
        config=config.model_dump(mode="json"),
    )
    header = manifest.model_dump_json().encode()
    path = checkpoint_path(directory, model.lead)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(PREAMBLE.pack(VERSION, len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)
    log.info(f"[PM_{model.lead}] checkpoint written to {path} at step {step} ({len(entries)} tensors)")
    return path


def read_manifest(path: PathLike) -> CheckpointManifest:
    with open(path, "rb") as fh:
        manifest, _ = _read_preamble(fh, path)
    return manifest


def _read_preamble(fh, path):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    raw = fh.read(PREAMBLE.size)
    if len(raw) < PREAMBLE.size:
        raise TruncatedFileError(f"{path}: checkpoint preamble is truncated")
    version, length = PREAMBLE.unpack(raw)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = fh.read(length)
    if len(header) < length:
        raise TruncatedFileError(f"{path}: manifest is truncated")
    try:
        manifest = CheckpointManifest.model_validate_json(header)
    except ValidationError as e:
        raise DataError(f"{path}: malformed manifest: {e.errors()[0]['msg']}") from e
    return manifest, fh.read()


def load_checkpoint(path: PathLike) -> TrainResult:
    """Rebuilds the model (and optimizer moments when stored) for resuming or
    forecasting."""
    with open(path, "rb") as fh:
        manifest, payload = _read_preamble(fh, path)

    arrays = {}
    for entry in manifest.tensors:
        end = entry.offset + entry.nbytes
        if end > len(payload):
            raise TruncatedFileError(f"{path}: tensor {entry.name} runs past the end of the file")
        raw = np.frombuffer(payload[entry.offset:end], dtype=NUMPY_DTYPES[entry.dtype])
        arrays[entry.name] = torch.from_numpy(raw.reshape(entry.shape).copy())

    config = RunConfig.model_validate(manifest.config)
    model = S2SForecaster(
        spec_from_config(config.grid),
        catalog_from_config(config.grid),
        config.model,
        manifest.lead,
        history=config.train.history,
        segment=config.train.segment,
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in arrays:
                raise DataError(f"{path}: missing tensor {name}")
            if tuple(arrays[name].shape) != tuple(p.shape):
                raise DataError(f"{path}: tensor {name} has shape {tuple(arrays[name].shape)}, expected {tuple(p.shape)}")
            p.copy_(arrays[name])
    model.set_normalizer(Normalizer(np.array(manifest.norm_mean), np.array(manifest.norm_std)))

    optimizer = build_optimizer(model, config.train)
    for name, p in model.named_parameters():
        key = f"{OPTIM_PREFIX}{name}"
        if f"{key}.exp_avg" in arrays:
            optimizer.state[p] = {
                "step": torch.tensor(float(manifest.optimizer_step), dtype=torch.float32),
                "exp_avg": arrays[f"{key}.exp_avg"].to(p.dtype),
                "exp_avg_sq": arrays[f"{key}.exp_avg_sq"].to(p.dtype),
            }
    log.info(f"[PM_{manifest.lead}] checkpoint loaded from {path} (step {manifest.step})")
    return TrainResult(manifest.lead, model, optimizer, manifest.step)


def get_checkpoint(directory: PathLike, lead: int) -> Optional[TrainResult]:
    path = checkpoint_path(directory, lead)
    if not path.is_file():
        return None
    return load_checkpoint(path)


def get_models(directory: PathLike, leads: Iterable[int]) -> Dict[int, S2SForecaster]:
    models = {}
    for K in leads:
        found = get_checkpoint(directory, K)
        if found is None:
            raise MissingModelError(K, f"no checkpoint for lead K={K} in {directory}")
        models[K] = found.model
    return models


def list_checkpoints(directory: PathLike) -> List[int]:
    leads = []
    for path in sorted(Path(directory).glob("pm_*.tqck")):
        try:
            leads.append(int(path.stem.split("_")[1]))
        except ValueError:
            log.warning(f"Ignoring unexpected checkpoint name {path.name}")
    return sorted(leads)
