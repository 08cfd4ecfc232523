"""Single-file checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header
{version, meta, tensors: [{name, shape, offset}], optimizer: [...] | null},
then the concatenated float32 little-endian tensor payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from sketchchat.errors import AlignmentError, FormatError

MAGIC = b"SKCHKPT\n"
VERSION = 1


@dataclass
class Checkpoint:
    version: int
    meta: dict
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] | None = field(default=None)


def _pack_section(entries: list, payload: bytearray, tensors: dict[str, np.ndarray]) -> None:
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())


def save_checkpoint(
    path: str | Path,
    tensors: dict[str, np.ndarray],
    meta: dict | None = None,
    optimizer: dict[str, np.ndarray] | None = None,
) -> None:
    tensor_entries: list = []
    optim_entries: list = []
    payload = bytearray()
    _pack_section(tensor_entries, payload, tensors)
    if optimizer is not None:
        _pack_section(optim_entries, payload, optimizer)
    header = json.dumps(
        {
            "version": VERSION,
            "meta": meta or {},
            "tensors": tensor_entries,
            "optimizer": optim_entries if optimizer is not None else None,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)


def _unpack_section(entries: list, payload: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for e in entries:
        shape = tuple(int(d) for d in e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(e["offset"])
        end = start + 4 * count
        if end > len(payload):
            raise FormatError(f"tensor {e['name']!r} overruns payload")
        out[e["name"]] = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
    return out


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    if header_start + header_len > len(raw):
        raise FormatError("truncated header")
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    if header.get("version") != VERSION:
        raise FormatError(f"unsupported version {header.get('version')!r}")
    payload = raw[header_start + header_len :]
    tensors = _unpack_section(header["tensors"], payload)
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = _unpack_section(header["optimizer"], payload)
    return Checkpoint(version=header["version"], meta=header["meta"], tensors=tensors, optimizer=optimizer)


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy() for name, p in module.named_parameters()}


def load_module_arrays(module: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise AlignmentError(f"checkpoint missing parameters: {missing[:5]}")
    with torch.no_grad():
        for name, p in params.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise AlignmentError(
                    f"shape mismatch for {name}: {tuple(arr.shape)} vs {tuple(p.shape)}"
                )
            p.copy_(torch.from_numpy(arr.astype(np.float32, copy=False)))
