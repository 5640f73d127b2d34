"""Versioned binary container for one parameter store.

Layout (all integers little-endian):

    8 bytes   magic  b"KGDCKPT\\0"
    u32       format version
    u32       header length n
    u32       CRC32 of the header bytes
    n bytes   UTF-8 JSON header: owner, config_hash, meta, arrays
    ...       raw array payloads in header order

Each header array entry carries name, bits (32 or 64), shape and byte
length.  The JSON is written with sorted keys so identical stores always
serialize to identical bytes.
"""
from __future__ import annotations

import json
import struct
import warnings
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"KGDCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIII")
_DTYPES = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CorruptHeader(CheckpointError):
    pass


class UnknownVersion(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


class ConfigHashMismatch(CheckpointError):
    pass


class OwnerMismatch(CheckpointError):
    pass


class MissingArrays(CheckpointError):
    pass


@dataclass
class Checkpoint:
    owner: str
    config_hash: str
    meta: dict
    arrays: OrderedDict = field(default_factory=OrderedDict)
    version: int = VERSION


def encode(ckpt: Checkpoint) -> bytes:
    entries, payload = [], []
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr)
        bits = arr.dtype.itemsize * 8
        if arr.dtype.kind != "f" or bits not in _DTYPES:
            raise TypeError(f"array {name}: only float32/float64 are supported, got {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[bits]).tobytes()
        entries.append({"name": name, "bits": bits, "shape": list(arr.shape), "nbytes": len(raw)})
        payload.append(raw)
    header = json.dumps(
        {"owner": ckpt.owner, "config_hash": ckpt.config_hash, "meta": ckpt.meta, "arrays": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    prefix = _PREFIX.pack(MAGIC, ckpt.version, len(header), zlib.crc32(header))
    return prefix + header + b"".join(payload)


def decode(blob: bytes, source="<bytes>") -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CorruptHeader(f"{source}: file too short for a checkpoint header")
    magic, version, n, crc = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CorruptHeader(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise UnknownVersion(f"{source}: format version {version} (this build reads {VERSION})")
    header = blob[_PREFIX.size:_PREFIX.size + n]
    if len(header) != n or zlib.crc32(header) != crc:
        raise CorruptHeader(f"{source}: header checksum mismatch")
    try:
        head = json.loads(header.decode("utf-8"))
        entries = head["arrays"]
        ckpt = Checkpoint(head["owner"], head["config_hash"], head["meta"], OrderedDict(), version)
    except (ValueError, KeyError, TypeError) as err:
        raise CorruptHeader(f"{source}: unreadable header ({err})") from None
    offset = _PREFIX.size + n
    for e in entries:
        try:
            dtype, shape, nbytes = _DTYPES[e["bits"]], tuple(e["shape"]), e["nbytes"]
        except KeyError as err:
            raise CorruptHeader(f"{source}: bad array entry {e!r}") from None
        if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)) or offset + nbytes > len(blob):
            raise CorruptHeader(f"{source}: payload of {e['name']} is truncated or mis-sized")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)
        ckpt.arrays[e["name"]] = arr.copy()
        offset += nbytes
    if offset != len(blob):
        raise CorruptHeader(f"{source}: {len(blob) - offset} trailing bytes after the last array")
    return ckpt


def save(path, store, config_hash, meta=None):
    """Write ``store`` (a ParameterStore) to ``path``; returns the bytes written."""
    ckpt = Checkpoint(store.owner, config_hash, meta or {},
                      OrderedDict((name, p.data) for name, p in store.items()))
    blob = encode(ckpt)
    Path(path).write_bytes(blob)
    return blob


def read(path) -> Checkpoint:
    return decode(Path(path).read_bytes(), source=str(path))


def load_into(store, ckpt, config_hash=None, force=False):
    """Copy checkpoint arrays into ``store``; returns the names loaded.

    Without ``force`` every store array must be present with its exact
    shape and the config hash must match.  With ``force`` a warning is
    emitted and only arrays matching by name and shape are copied.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = read(ckpt)
    if ckpt.owner != store.owner:
        raise OwnerMismatch(f"checkpoint belongs to {ckpt.owner!r}, store is {store.owner!r}")
    loadable, problems = [], []
    for name, param in store.items():
        arr = ckpt.arrays.get(name)
        if arr is None:
            problems.append((MissingArrays, f"array {name} missing from checkpoint"))
        elif arr.shape != param.data.shape:
            problems.append((ShapeMismatch, f"array {name}: checkpoint shape {arr.shape}, model {param.data.shape}"))
        else:
            loadable.append(name)
    hash_ok = config_hash is None or config_hash == ckpt.config_hash
    if not force:
        if problems:
            kind, msg = problems[0]
            raise kind(msg)
        if not hash_ok:
            raise ConfigHashMismatch(f"config hash {ckpt.config_hash[:12]} != expected {config_hash[:12]}")
    elif problems or not hash_ok:
        skipped = len(store) - len(loadable)
        warnings.warn(f"forced load: config hash {'differs' if not hash_ok else 'matches'}; "
                      f"{len(loadable)} arrays loaded, {skipped} skipped", stacklevel=2)
    store.restore({n: ckpt.arrays[n] for n in loadable})
    return loadable
