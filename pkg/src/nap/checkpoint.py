"""Binary checkpoints: magic, header length, JSON header, little-endian payload."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .architecture import ModelConfig, ModelParams

MAGIC = b"NAPCKPT\x00"
FORMAT_VERSION = 1
DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    mode: str = "NAP"
    iteration: int = 0
    extra: dict = field(default_factory=dict)  # free-form JSON (train config, best regret, ...)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)  # "m/<name>", "v/<name>"
    precision: str = "float32"
    rng_digest: str = ""


def rng_digest(seed: int, iteration: int) -> str:
    """Digest of the generator state the next iteration will start from."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, iteration]))
    return hashlib.sha256(json.dumps(rng.bit_generator.state, sort_keys=True).encode()).hexdigest()[:16]


def _entries(ckpt: Checkpoint):
    for name, arr in ckpt.params.arrays.items():
        yield name, arr
    for name, arr in ckpt.optimizer.items():
        yield f"optimizer/{name}", arr


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    if ckpt.precision not in DTYPES:
        raise CheckpointError(f"unsupported precision {ckpt.precision!r}")
    dtype = np.dtype(DTYPES[ckpt.precision])
    tensors, chunks = [], []
    for name, arr in _entries(ckpt):
        arr = np.ascontiguousarray(arr, dtype=dtype)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": ckpt.precision})
        chunks.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.params.config.to_dict(),
        "mode": ckpt.mode,
        "iteration": ckpt.iteration,
        "parameter_count": ckpt.params.count(),
        "rng_digest": ckpt.rng_digest,
        "tensors": tensors,
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)
    return path


def read_header(path: str | Path) -> tuple[dict, int]:
    """Header dict and payload offset; validates magic, version and payload length."""
    path = Path(path)
    size = path.stat().st_size
    with path.open("rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        raw = fh.read(8)
        if len(raw) != 8:
            raise CheckpointError(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw)
        blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob)
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: corrupt header ({err})") from err
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})")
    offset = len(MAGIC) + 8 + n
    expected = sum(int(np.prod(t["shape"], dtype=np.int64)) * np.dtype(DTYPES[t["dtype"]]).itemsize
                   for t in header["tensors"])
    if size - offset != expected:
        raise CheckpointError(f"{path}: payload length mismatch (header implies {expected} bytes, found {size - offset})")
    return header, offset


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, offset = read_header(path)
    payload = Path(path).read_bytes()[offset:]
    arrays, optimizer, pos = {}, {}, 0
    for t in header["tensors"]:
        dtype = np.dtype(DTYPES[t["dtype"]])
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=pos).astype(np.float64).reshape(t["shape"])
        pos += count * dtype.itemsize
        if t["name"].startswith("optimizer/"):
            optimizer[t["name"][len("optimizer/"):]] = arr
        else:
            arrays[t["name"]] = arr
    config = ModelConfig(**header["model_config"])
    try:
        params = ModelParams(config, arrays)
    except ValueError as err:
        raise CheckpointError(f"{path}: {err}") from err
    precision = header["tensors"][0]["dtype"] if header["tensors"] else "float32"
    return Checkpoint(params, header["mode"], header["iteration"], header.get("extra", {}), optimizer,
                      precision, header.get("rng_digest", ""))


def describe(header: Mapping) -> str:
    cfg = header["model_config"]
    lines = [
        f"format_version: {header['format_version']}",
        f"mode: {header['mode']}",
        f"iteration: {header['iteration']}",
        f"parameter_count: {header['parameter_count']}",
        f"precision: {header['tensors'][0]['dtype'] if header['tensors'] else '-'}",
        f"rng_digest: {header.get('rng_digest', '')}",
        "model_config: " + ", ".join(f"{k}={v}" for k, v in cfg.items()),
    ]
    return "\n".join(lines)
