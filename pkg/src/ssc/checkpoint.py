"""Binary parameter container used for checkpoints and loss-network weights.

Layout: magic ``SSCK``, format version u32, then one record per tensor:
name length u32, name bytes (utf-8), rank u32, dims u32 * rank, float32
little-endian payload in C order. All integers little-endian.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Raised for a malformed or truncated checkpoint file."""


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors to `path` (write-to-temp, then rename)."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name, value in tensors.items():
            arr = np.ascontiguousarray(np.asarray(value), dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> float32 array mapping."""
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    offset = 8
    out: dict[str, np.ndarray] = {}
    while offset < len(data):
        try:
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            payload = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated record at byte {offset}") from exc
        out[name] = payload.reshape(dims).copy()
    return out


def save_module(path: str | Path, module) -> None:
    """Serialize a torch module's state_dict into the container."""
    tensors = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_checkpoint(path, tensors)


def load_module(path: str | Path, module) -> None:
    """Load container tensors into a torch module, strict on names and shapes."""
    import torch

    stored = load_checkpoint(path)
    state = module.state_dict()
    if set(stored) != set(state):
        missing = sorted(set(state) - set(stored))
        extra = sorted(set(stored) - set(state))
        raise CheckpointError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, arr in stored.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: file {arr.shape}, module {tuple(state[name].shape)}"
            )
    module.load_state_dict({k: torch.as_tensor(v, dtype=module.state_dict()[k].dtype) for k, v in stored.items()})
