"""Binary checkpoint format.

Layout, all integers little-endian:

    magic  b"NMAT1"
    u32    format version (1)
    u32    meta length; meta UTF-8 JSON: architecture dict, iteration,
           training-config hash, RNG state
    u32    entry count
    per entry: u16 name length, name UTF-8, u8 ndim, u32 x ndim extents
    raw float32 blobs, one per entry, in manifest order

Entries hold the model parameters plus optimizer moment buffers
(``adam.m.*`` / ``adam.v.*``).  Loading validates every shape against
the architecture it is restored into.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"NMAT1"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint file rejected: bad magic, version, or layout."""


@dataclass
class CheckpointData:
    arch: dict
    iteration: int
    config_hash: str
    rng_state: dict | None
    entries: dict[str, np.ndarray]


def save_checkpoint(path, *, arch: dict, iteration: int, config_hash: str,
                    rng_state: dict | None, entries: dict[str, np.ndarray]) -> None:
    meta = json.dumps({
        "arch": arch,
        "iteration": int(iteration),
        "config_hash": config_hash,
        "rng_state": rng_state,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for arr in entries.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != MAGIC:
        raise CheckpointFormatError(
            f"not a checkpoint file: magic {blob[:5]!r}, expected {MAGIC!r}")
    off = 5
    try:
        version, meta_len = struct.unpack_from("<II", blob, off)
        off += 8
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(
                f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
        meta = json.loads(blob[off:off + meta_len].decode())
        off += meta_len
        (n_entries,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            shapes.append((name, shape))
    except struct.error as exc:
        raise CheckpointFormatError(f"checkpoint manifest truncated: {exc}") from exc

    expected = off + sum(int(np.prod(s, dtype=np.int64)) * 4 for _, s in shapes)
    if len(blob) != expected:
        raise CheckpointFormatError(
            f"truncated or padded checkpoint: expected {expected} bytes, "
            f"found {len(blob)}")
    entries = {}
    for name, shape in shapes:
        count = int(np.prod(shape, dtype=np.int64))
        entries[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                      offset=off).reshape(shape).copy()
        off += count * 4
    return CheckpointData(arch=meta["arch"], iteration=meta["iteration"],
                          config_hash=meta["config_hash"],
                          rng_state=meta.get("rng_state"), entries=entries)
