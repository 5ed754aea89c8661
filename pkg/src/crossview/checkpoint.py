"""Portable binary checkpoints: config header plus named weight tensors.

Layout (all integers little-endian):

    magic 'SKFM' | version u32 | blob length u32 | config blob (UTF-8 JSON)
    | tensor count u32 | entries

    entry: name length u16 | name UTF-8 | dtype u8 | rank u8
           | dims u32 x rank | payload little-endian row-major

Dtype codes: 0 = IEEE-754 binary32, 1 = IEEE-754 binary64.  Weights train at
binary64; saving at binary32 is a lossy export for small artifacts.  A file
reloaded and saved again is byte-identical either way, because loading keeps
exactly what the payload stored.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig
from .errors import ConfigError, DataError
from .lora import LoraLinear, merge_lora
from .model import ModelConfig, ProficiencyClassifier
from .training import TrainConfig

__all__ = [
    "Checkpoint",
    "model_config_from_dict",
    "model_config_to_dict",
    "train_config_from_dict",
    "train_config_to_dict",
    "save_checkpoint",
    "load_checkpoint",
    "build_model",
]

_MAGIC = b"SKFM"
_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


# -- config (de)serialization ------------------------------------------------


def model_config_to_dict(config: ModelConfig) -> dict:
    d = dataclasses.asdict(config)
    d["backbone"] = dataclasses.asdict(config.backbone)
    return d


def _check_keys(given: dict, allowed: set[str], what: str) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}; allowed: {sorted(allowed)}")


def model_config_from_dict(d: dict) -> ModelConfig:
    """Build a ModelConfig from plain data; unknown keys are errors, missing
    keys fall back to the recipe defaults."""
    if not isinstance(d, dict):
        raise ConfigError(f"model config must be a mapping, got {type(d).__name__}")
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    _check_keys(d, fields, "model config")
    kwargs = dict(d)
    if "backbone" in kwargs:
        bb = kwargs["backbone"]
        if not isinstance(bb, dict):
            raise ConfigError("backbone config must be a mapping")
        _check_keys(bb, {f.name for f in dataclasses.fields(BackboneConfig)}, "backbone")
        kwargs["backbone"] = BackboneConfig(**bb)
    try:
        return ModelConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from None


def train_config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def train_config_from_dict(d: dict) -> TrainConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"train config must be a mapping, got {type(d).__name__}")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    _check_keys(d, fields, "train config")
    kwargs = dict(d)
    if "betas" in kwargs:
        kwargs["betas"] = tuple(kwargs["betas"])
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from None


# -- checkpoint files --------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    tensors: dict[str, np.ndarray]
    merged: bool = False


def save_checkpoint(
    path,
    model: ProficiencyClassifier,
    train_config: TrainConfig | None = None,
    dtype=np.float64,
) -> None:
    """Write the model's parameters plus its fully-resolved configuration."""
    code = _CODE_OF.get(np.dtype(dtype))
    if code is None:
        raise ConfigError(f"unsupported checkpoint dtype {dtype!r}; use float32/float64")
    # A model whose adapters were folded away stores dense weights only; the
    # flag tells build_model to fold a fresh model's adapters before loading.
    merged = not any(isinstance(m, LoraLinear) for m in model.modules())
    blob = json.dumps(
        {
            "merged": merged,
            "model": model_config_to_dict(model.config),
            "train": None if train_config is None else train_config_to_dict(train_config),
        },
        sort_keys=True,
    ).encode("utf-8")
    state = model.state_dict()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, value in state.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(value, dtype=_DTYPE_CODES[code])
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    chunk = fh.read(n)
    if len(chunk) != n:
        raise DataError(f"truncated checkpoint while reading {what}")
    return chunk


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise DataError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise DataError(
                f"unsupported checkpoint version {version} (expected {_VERSION})"
            )
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        try:
            blob = json.loads(_read_exact(fh, blob_len, "config blob").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DataError(f"corrupt checkpoint config blob: {exc}") from None
        if not isinstance(blob, dict) or "model" not in blob:
            raise DataError("checkpoint config blob lacks a model config")
        model_config = model_config_from_dict(blob["model"])
        train_config = (
            None if blob.get("train") is None else train_config_from_dict(blob["train"])
        )
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, f"name length {i}"))
            name = _read_exact(fh, name_len, f"name {i}").decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2, f"header of {name}"))
            if code not in _DTYPE_CODES:
                raise DataError(f"tensor {name}: unknown dtype code {code}")
            dt = _DTYPE_CODES[code]
            dims = struct.unpack(
                f"<{rank}I", _read_exact(fh, 4 * rank, f"dims of {name}")
            )
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
            payload = _read_exact(fh, n_bytes, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
        if fh.read(1):
            raise DataError("trailing bytes after last tensor")
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        tensors=tensors,
        merged=bool(blob.get("merged", False)),
    )


def build_model(checkpoint: Checkpoint) -> ProficiencyClassifier:
    """Instantiate the classifier a checkpoint describes and load its weights."""
    model = ProficiencyClassifier(checkpoint.model_config, np.random.default_rng(0))
    if checkpoint.merged:
        merge_lora(model)
    model.load_state_dict(checkpoint.tensors)
    return model
