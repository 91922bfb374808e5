"""Versioned binary checkpoint container.

Layout (all integers little-endian):
    magic     8 bytes  b"NVSPCK01"
    version   u32      currently 1
    hash_len  u16      followed by the config hash as UTF-8
    n_params  u32
then per parameter:
    name_len  u16      followed by the dotted name as UTF-8
    tag       u8       0 = frozen, 1 = tuned
    ndim      u8       followed by ndim x u32 dims
    payload   float64 little-endian, C order

Round trips are bit-exact: values are stored as float64 regardless of the
engine's active dtype (float32 values upcast losslessly).
"""
from __future__ import annotations

import struct

import numpy as np

from .autodiff import default_dtype
from .errors import ValidationError
from .nn import FROZEN, TUNED, ParameterStore

MAGIC = b"NVSPCK01"
VERSION = 1
_TAG_CODE = {FROZEN: 0, TUNED: 1}
_CODE_TAG = {0: FROZEN, 1: TUNED}


def save_checkpoint(path, store: ParameterStore, config_hash: str) -> None:
    params = sorted(store.parameters(), key=lambda p: p.name)
    hash_bytes = config_hash.encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<H", len(hash_bytes)))
        fh.write(hash_bytes)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name_bytes = p.name.encode()
            data = p.tensor.data
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", _TAG_CODE[p.tag]))
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[str, dict[str, tuple[str, np.ndarray]]]:
    """Return (config_hash, {name: (tag, float64 array)})."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValidationError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        (hash_len,) = struct.unpack("<H", fh.read(2))
        config_hash = fh.read(hash_len).decode()
        (n_params,) = struct.unpack("<I", fh.read(4))
        entries: dict[str, tuple[str, np.ndarray]] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (tag_code,) = struct.unpack("<B", fh.read(1))
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 8)
            arr = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
            entries[name] = (_CODE_TAG[tag_code], arr)
    return config_hash, entries


def load_checkpoint(path, store: ParameterStore, expect_hash: str | None = None,
                    prefix: str | None = None, strict: bool = True) -> str:
    """Load values (and tags) into an existing store; returns the stored hash.

    With prefix set, only parameters under that prefix are considered.
    strict demands an exact name/shape match over the considered set.
    """
    config_hash, entries = read_checkpoint(path)
    if expect_hash is not None and config_hash != expect_hash:
        raise ValidationError(
            f"{path}: checkpoint config hash {config_hash[:12]}... does not match expected {expect_hash[:12]}..."
        )
    names = [n for n in store.names() if prefix is None or n.startswith(prefix)]
    wanted = {n for n in entries if prefix is None or n.startswith(prefix)}
    if strict:
        missing = sorted(set(names) - wanted)
        extra = sorted(wanted - set(names))
        if missing or extra:
            raise ValidationError(
                f"{path}: parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})"
            )
    for name in names:
        if name not in entries:
            continue
        tag, arr = entries[name]
        param = store[name]
        if arr.shape != param.tensor.data.shape:
            raise ValidationError(
                f"{path}: shape mismatch for {name}: checkpoint {arr.shape} vs store {param.tensor.data.shape}"
            )
        param.tensor.data = arr.astype(default_dtype())
        param.tag = tag
    return config_hash
