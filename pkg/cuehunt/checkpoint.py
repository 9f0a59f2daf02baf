"""Binary checkpoint container.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
raw little-endian tensor payloads in header order, CRC32 of everything before
it as a little-endian uint32 trailer.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import CheckpointError, ConfigurationError
from .model import ArchitectureConfig, ParameterSet
from .optim import AdamState

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = b"CUEHUNT\x00"
_DTYPE_CODES = {np.dtype(np.float64): "<f8", np.dtype(np.float32): "<f4"}


@dataclass
class Checkpoint:
    architecture: ArchitectureConfig
    params: ParameterSet
    adam: AdamState
    step: int = 0
    seed: int = 0
    metrics: Dict[str, object] = field(default_factory=dict)
    train_config: Optional[Dict[str, object]] = None
    version: int = FORMAT_VERSION

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.tensors.values())).dtype


def _header(ckpt: Checkpoint):
    code = _DTYPE_CODES.get(np.dtype(ckpt.dtype))
    if code is None:
        raise CheckpointError(f"Unsupported parameter dtype {ckpt.dtype}")
    entries, payloads = [], []
    for group, tensors in (("params", ckpt.params.tensors), ("adam.m", ckpt.adam.m), ("adam.v", ckpt.adam.v)):
        for name, value in tensors.items():
            data = np.ascontiguousarray(value, dtype=code).tobytes()
            entries.append({"group": group, "name": name, "shape": list(value.shape), "nbytes": len(data)})
            payloads.append(data)
    hyper = ckpt.adam.hyperparameters()
    header = {
        "version": ckpt.version,
        "dtype": code,
        "architecture": ckpt.architecture.to_dict(),
        "init": {"scheme": ckpt.params.scheme, "seed": ckpt.params.seed},
        "adam": hyper,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "metrics": ckpt.metrics,
        "train_config": ckpt.train_config,
        "tensors": entries,
    }
    return header, payloads


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    header, payloads = _header(ckpt)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(head)) + head + b"".join(payloads)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(body)
    os.replace(tmp, path)
    logger.debug(f"Checkpoint (step {ckpt.step}) written to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, verifying checksum, version and tensor shapes."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found at {path}")
    with open(path, "rb") as f:
        blob = f.read()

    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a cuehunt checkpoint (bad magic or truncated)")
    (expected_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != expected_crc:
        raise CheckpointError(f"{path} is corrupt (checksum mismatch or truncated file)")
    (head_len,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    offset = len(MAGIC) + 4
    try:
        header = json.loads(blob[offset:offset + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has an unreadable header: {e}") from e
    offset += head_len

    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint format version {header.get('version')}, this build reads version {FORMAT_VERSION}",
            incompatible=True,
        )
    code = header["dtype"]
    try:
        architecture = ArchitectureConfig.from_dict(header["architecture"])
    except ConfigurationError as e:
        raise CheckpointError(f"{path} embeds an invalid architecture: {e}", incompatible=True) from e

    groups: Dict[str, Dict[str, np.ndarray]] = {"params": {}, "adam.m": {}, "adam.v": {}}
    for entry in header["tensors"]:
        end = offset + entry["nbytes"]
        if end > len(blob) - 4:
            raise CheckpointError(f"{path} is truncated inside tensor '{entry['name']}'")
        value = np.frombuffer(blob[offset:end], dtype=code)
        if value.size != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: tensor '{entry['name']}' payload does not match shape {entry['shape']}")
        groups[entry["group"]][entry["name"]] = value.reshape(entry["shape"]).astype(code).copy()
        offset = end
    if offset != len(blob) - 4:
        raise CheckpointError(f"{path} has {len(blob) - 4 - offset} unexpected trailing bytes")

    native = np.dtype(code).newbyteorder("=")
    params = ParameterSet(
        tensors={k: v.astype(native) for k, v in groups["params"].items()},
        scheme=header["init"]["scheme"],
        seed=header["init"]["seed"],
    )
    try:
        params.check_shapes(architecture)
    except ConfigurationError as e:
        raise CheckpointError(f"{path}: parameters do not match the embedded architecture. {e}", incompatible=True) from e
    hyper = dict(header["adam"])
    adam = AdamState(
        m={k: v.astype(native) for k, v in groups["adam.m"].items()},
        v={k: v.astype(native) for k, v in groups["adam.v"].items()},
        **hyper,
    )
    return Checkpoint(
        architecture=architecture,
        params=params,
        adam=adam,
        step=header["step"],
        seed=header["seed"],
        metrics=header.get("metrics") or {},
        train_config=header.get("train_config"),
        version=header["version"],
    )
