"""Binary checkpoint files.

Layout: 8-byte magic, u32 header length, JSON header (version, encoder
config, dtype, free-form extra such as the vocabulary and provenance),
u32 tensor count, then named tensors as (u16 name length, name, u8 ndim,
u64 dims, raw little-endian row-major payload).  Optimizer moments ride
along under an "adam." name prefix so training can resume exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from anchorrank.encoder.adam import AdamState
from anchorrank.encoder.config import EncoderConfig
from anchorrank.encoder.params import param_shapes

MAGIC = b"ANCRCKPT"
VERSION = 1
DEFAULT_DTYPE = "<f8"
_SUPPORTED_DTYPES = ("<f8", "<f4")


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: EncoderConfig
    extra: dict
    adam: AdamState | None


def _write_tensor(f, name: str, arr: np.ndarray, dtype: str) -> None:
    payload = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        f.write(struct.pack("<Q", dim))
    f.write(payload)


def _read_exact(f, count: int) -> bytes:
    data = f.read(count)
    if len(data) != count:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_tensor(f, dtype: str) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(f, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = _read_exact(f, count * np.dtype(dtype).itemsize)
    arr = np.frombuffer(raw, dtype=np.dtype(dtype)).reshape(shape).astype(np.float64)
    return name, arr


def save_checkpoint(
    path: str | Path,
    params: dict[str, np.ndarray],
    config: EncoderConfig,
    extra: dict | None = None,
    adam: AdamState | None = None,
    dtype: str = DEFAULT_DTYPE,
) -> None:
    if dtype not in _SUPPORTED_DTYPES:
        raise CheckpointError(f"unsupported payload dtype {dtype!r}")
    header = {
        "version": VERSION,
        "config": config.to_dict(),
        "dtype": dtype,
        "extra": extra or {},
        "adam_step": adam.step if adam is not None else None,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")

    names = sorted(params)
    tensors: list[tuple[str, np.ndarray]] = [(n, params[n]) for n in names]
    if adam is not None:
        tensors += [(f"adam.m.{n}", adam.m[n]) for n in names]
        tensors += [(f"adam.v.{n}", adam.v[n]) for n in names]

    with Path(path).open("wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            _write_tensor(f, name, arr, dtype)


def load_checkpoint(path: str | Path, expected_config: EncoderConfig | None = None) -> Checkpoint:
    """Read a checkpoint; validates magic, version, and parameter shapes.

    If expected_config is given, every differing field is an error (this is
    how a reranker refuses a checkpoint with, say, the wrong vocab_size).
    """
    with Path(path).open("rb") as f:
        if _read_exact(f, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", _read_exact(f, 4))
        header = json.loads(_read_exact(f, header_len).decode("utf-8"))
        if header.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        dtype = header.get("dtype", DEFAULT_DTYPE)
        if dtype not in _SUPPORTED_DTYPES:
            raise CheckpointError(f"{path}: unsupported payload dtype {dtype!r}")
        config = EncoderConfig.from_dict(header["config"])
        (n_tensors,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = dict(_read_tensor(f, dtype) for _ in range(n_tensors))

    if expected_config is not None and expected_config != config:
        diff = [
            f"{k}: checkpoint={getattr(config, k)} expected={getattr(expected_config, k)}"
            for k in config.to_dict()
            if getattr(config, k) != getattr(expected_config, k)
        ]
        raise CheckpointError(f"{path}: config mismatch ({'; '.join(diff)})")

    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
        params[name] = tensors[name]

    adam = None
    if header.get("adam_step") is not None:
        try:
            m = {n: tensors[f"adam.m.{n}"] for n in shapes}
            v = {n: tensors[f"adam.v.{n}"] for n in shapes}
        except KeyError as exc:
            raise CheckpointError(f"{path}: incomplete optimizer state ({exc})") from None
        adam = AdamState(step=int(header["adam_step"]), m=m, v=v)

    return Checkpoint(params=params, config=config, extra=header.get("extra", {}), adam=adam)
