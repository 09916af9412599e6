"""Bit-exact little-endian file formats for datasets and checkpoints, plus
plain key=value config files.

Dataset ("TSPD1"): magic, then three uint64 header fields (city count n,
instance count k, generator seed), then k*n*2 float64 coordinates.

Checkpoint ("TSPM1"): magic, a uint32 header length, a UTF-8 header holding
the model config as key=value lines and an ordered parameter manifest
(name=dim,dim lines), then the parameters as float32 in manifest order.
Header sizes are always validated against the actual file size before use.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Node
from .model import ModelConfig, PolicyParams, param_shapes
from .tsp import TspInstance

DATASET_MAGIC = b"TSPD1"
CHECKPOINT_MAGIC = b"TSPM1"
_DATASET_HEADER = struct.Struct("<QQQ")
_U32 = struct.Struct("<I")


class FormatError(ValueError):
    """File does not carry the expected magic or header structure."""


class CorruptFileError(ValueError):
    """Header-declared sizes disagree with the actual file contents."""


class IncompatibleCheckpointError(ValueError):
    """Checkpoint parameters do not fit the declared model configuration."""


def save_dataset(path, instances: list[TspInstance], seed: int) -> None:
    if not instances:
        raise ValueError("dataset must contain at least one instance")
    n = instances[0].n
    if any(inst.n != n for inst in instances):
        raise ValueError("all instances in a dataset must share one size")
    body = np.stack([inst.coords for inst in instances]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_DATASET_HEADER.pack(n, len(instances), seed))
        fh.write(body.tobytes())


def load_dataset(path) -> tuple[list[TspInstance], int]:
    """Returns (instances, generator seed recorded at write time)."""
    blob = Path(path).read_bytes()
    if blob[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad dataset magic")
    offset = len(DATASET_MAGIC)
    if len(blob) < offset + _DATASET_HEADER.size:
        raise CorruptFileError(f"{path}: truncated dataset header")
    n, count, seed = _DATASET_HEADER.unpack_from(blob, offset)
    offset += _DATASET_HEADER.size
    expected = offset + count * n * 2 * 8
    if n < 2 or count < 1 or len(blob) != expected:
        raise CorruptFileError(
            f"{path}: body size {len(blob) - offset} != header-declared {expected - offset}"
        )
    coords = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(count, n, 2)
    return [TspInstance(c.astype(np.float64)) for c in coords], seed


def _config_lines(config: ModelConfig) -> list[str]:
    return [
        f"n_cities={config.n_cities}",
        f"d_model={config.d_model}",
        f"n_heads={config.n_heads}",
        f"n_enc_layers={config.n_enc_layers}",
        f"n_dec_layers={config.n_dec_layers}",
        f"d_ff={config.d_ff}",
        f"input_mode={config.input_mode}",
        f"use_pe={'true' if config.use_pe else 'false'}",
    ]


def _parse_config_block(lines: list[str]) -> ModelConfig:
    kv = parse_key_values(lines)
    try:
        return ModelConfig(
            n_cities=int(kv["n_cities"]),
            d_model=int(kv["d_model"]),
            n_heads=int(kv["n_heads"]),
            n_enc_layers=int(kv["n_enc_layers"]),
            n_dec_layers=int(kv["n_dec_layers"]),
            d_ff=int(kv["d_ff"]),
            input_mode=kv["input_mode"],
            use_pe=kv["use_pe"] == "true",
        )
    except KeyError as exc:
        raise FormatError(f"checkpoint config missing key {exc}") from exc


def save_checkpoint(path, params: PolicyParams, config: ModelConfig) -> None:
    """Parameters land as float32; load() restores them into float64 nodes."""
    schema = param_shapes(config)
    if set(schema) != set(params):
        raise IncompatibleCheckpointError("parameter names do not match the schema")
    lines = ["[config]"]
    lines += _config_lines(config)
    lines.append("[params]")
    for name, shape in schema.items():
        if params[name].value.shape != shape:
            raise IncompatibleCheckpointError(f"shape mismatch for {name}")
        lines.append(f"{name}=" + ",".join(str(s) for s in shape))
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_U32.pack(len(header)))
        fh.write(header)
        for name in schema:
            fh.write(params[name].value.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, ModelConfig]:
    blob = Path(path).read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + _U32.size:
        raise CorruptFileError(f"{path}: truncated checkpoint header")
    (header_len,) = _U32.unpack_from(blob, offset)
    offset += _U32.size
    if len(blob) < offset + header_len:
        raise CorruptFileError(f"{path}: header length exceeds file size")
    header = blob[offset : offset + header_len].decode("utf-8")
    offset += header_len

    lines = [ln for ln in header.splitlines() if ln.strip()]
    try:
        cfg_at = lines.index("[config]")
        par_at = lines.index("[params]")
    except ValueError as exc:
        raise FormatError(f"{path}: missing checkpoint header sections") from exc
    config = _parse_config_block(lines[cfg_at + 1 : par_at])

    manifest: list[tuple[str, tuple[int, ...]]] = []
    for ln in lines[par_at + 1 :]:
        name, _, dims = ln.partition("=")
        try:
            shape = tuple(int(s) for s in dims.split(","))
        except ValueError as exc:
            raise FormatError(f"{path}: bad manifest line {ln!r}") from exc
        manifest.append((name, shape))

    schema = param_shapes(config)
    if [(n, s) for n, s in manifest] != list(schema.items()):
        raise IncompatibleCheckpointError(
            f"{path}: parameter manifest does not match the declared config"
        )
    total = sum(int(np.prod(s)) for _, s in manifest)
    if len(blob) - offset != total * 4:
        raise CorruptFileError(
            f"{path}: body size {len(blob) - offset} != manifest-declared {total * 4}"
        )
    params: PolicyParams = {}
    for name, shape in manifest:
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        offset += size * 4
        params[name] = Node(arr.astype(np.float64).reshape(shape))
    return params, config


def parse_key_values(lines) -> dict[str, str]:
    """key=value lines; blank lines and #-comments are ignored."""
    out: dict[str, str] = {}
    for raw in lines:
        ln = raw.strip()
        if not ln or ln.startswith("#"):
            continue
        key, sep, value = ln.partition("=")
        if not sep:
            raise FormatError(f"expected key=value, got {ln!r}")
        out[key.strip()] = value.strip()
    return out


def load_config_file(path) -> dict[str, str]:
    return parse_key_values(Path(path).read_text(encoding="utf-8").splitlines())
