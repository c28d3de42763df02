"""Versioned binary checkpoints.

Layout (little-endian): magic "DGCK", u32 version=2, u32 block count, then
per block: u16 name length, name bytes (utf-8), u8 dtype tag (4=f32,
8=f64, 1=i64), u8 rank, u32 dims..., raw row-major values. Parameter
blocks are stored under ``p/``, optimizer moments under ``m/`` and ``v/``,
and scalar bookkeeping (epoch, step) under ``meta/``.
"""

from __future__ import annotations

import struct

import numpy as np

from ..numcore import ContractViolationError

_MAGIC = b"DGCK"
_VERSION = 2
_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8"), 1: np.dtype("<i8")}
_TAG_OF = {np.dtype(np.float32): 4, np.dtype(np.float64): 8, np.dtype(np.int64): 1}


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _TAG_OF:
        raise ContractViolationError(f"unsupported checkpoint dtype {arr.dtype}")
    tag = _TAG_OF[arr.dtype]
    encoded = name.encode()
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
    fh.write(arr.astype(_TAGS[tag], copy=False).tobytes(order="C"))


def save_blocks(path, blocks: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _MAGIC, _VERSION, len(blocks)))
        for name in sorted(blocks):
            _write_block(fh, name, np.asarray(blocks[name]))


def load_blocks(path) -> dict[str, np.ndarray]:
    blocks: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic, version, count = struct.unpack("<4sII", fh.read(12))
        if magic != _MAGIC:
            raise ContractViolationError(f"bad checkpoint magic {magic!r}")
        if version != _VERSION:
            raise ContractViolationError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            tag, rank = struct.unpack("<BB", fh.read(2))
            if tag not in _TAGS:
                raise ContractViolationError(f"unknown dtype tag {tag} in {name!r}")
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            dt = _TAGS[tag]
            n_values = int(np.prod(shape)) if shape else 1
            raw = fh.read(n_values * dt.itemsize)
            values = np.frombuffer(raw, dtype=dt)
            if values.size != n_values:
                raise ContractViolationError(f"truncated block {name!r}")
            native = {4: np.float32, 8: np.float64, 1: np.int64}[tag]
            blocks[name] = values.astype(native).reshape(shape)
    return blocks


def save_checkpoint(path, params: dict[str, np.ndarray],
                    adam_m: dict[str, np.ndarray], adam_v: dict[str, np.ndarray],
                    step: int, epoch: int) -> None:
    blocks: dict[str, np.ndarray] = {}
    for name, value in params.items():
        blocks[f"p/{name}"] = value
    for name, value in adam_m.items():
        blocks[f"m/{name}"] = value
    for name, value in adam_v.items():
        blocks[f"v/{name}"] = value
    blocks["meta/step"] = np.asarray([step], dtype=np.int64)
    blocks["meta/epoch"] = np.asarray([epoch], dtype=np.int64)
    save_blocks(path, blocks)


def load_checkpoint(path):
    blocks = load_blocks(path)
    params = {k[2:]: v for k, v in blocks.items() if k.startswith("p/")}
    adam_m = {k[2:]: v for k, v in blocks.items() if k.startswith("m/")}
    adam_v = {k[2:]: v for k, v in blocks.items() if k.startswith("v/")}
    step = int(blocks["meta/step"][0])
    epoch = int(blocks["meta/epoch"][0])
    return params, adam_m, adam_v, step, epoch
