"""Checkpoint files: a human-readable manifest followed by a raw blob of
little-endian float32 values in manifest order.

Layout::

    ckpt-v1 <n_entries>
    meta <key> <value>          (zero or more)
    entry <name> <dim0xdim1x...> <element_count> <byte_offset>
    ...
    ---
    <raw little-endian float32 blob>

Byte offsets are relative to the start of the blob. Round trips are
bit-exact because parameters are stored as float32 in memory.
"""
from __future__ import annotations

import numpy as np

__all__ = ["checkpoint_save", "checkpoint_load"]

_SEP = b"---\n"


def checkpoint_save(arrays: dict, path, meta: dict | None = None) -> None:
    """Write named float32 arrays; entry order is the dict order."""
    lines = [f"ckpt-v1 {len(arrays)}"]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)):
            raise ValueError(f"meta key {key!r} must not contain whitespace")
        lines.append(f"meta {key} {value}")
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"entry name {name!r} must not contain whitespace")
        arr = np.asarray(arr, dtype="<f4")  # keeps 0-d entries 0-d
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"entry {name} {shape} {arr.size} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(_SEP)
        for blob in blobs:
            fh.write(blob)


def checkpoint_load(path, expect: tuple = ()) -> tuple:
    """Read (arrays, meta). Raises on corrupt manifests or truncated blobs.

    ``expect`` names entries that must be present; the error message names
    the first missing one.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    sep = raw.find(_SEP)
    if sep < 0:
        raise ValueError(f"{path}: missing manifest separator")
    manifest = raw[:sep].decode("utf-8").splitlines()
    blob = raw[sep + len(_SEP):]
    if not manifest or not manifest[0].startswith("ckpt-v1 "):
        raise ValueError(f"{path}: unrecognised manifest header")
    try:
        n_entries = int(manifest[0].split()[1])
    except (IndexError, ValueError):
        raise ValueError(f"{path}: malformed manifest header") from None

    meta: dict = {}
    arrays: dict = {}
    entry_lines = []
    for line in manifest[1:]:
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "entry":
            entry_lines.append(rest)
        else:
            raise ValueError(f"{path}: unknown manifest line {line!r}")
    if len(entry_lines) != n_entries:
        raise ValueError(
            f"{path}: manifest declares {n_entries} entries, found {len(entry_lines)}")

    for rest in entry_lines:
        parts = rest.split()
        if len(parts) != 4:
            raise ValueError(f"{path}: malformed entry line {rest!r}")
        name, shape_s, count_s, offset_s = parts
        count, offset = int(count_s), int(offset_s)
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise ValueError(f"{path}: entry {name!r} shape/count mismatch")
        end = offset + count * 4
        if end > len(blob):
            raise ValueError(f"{path}: blob truncated for entry {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                     offset=offset).reshape(shape).copy()
    for name in expect:
        if name not in arrays:
            raise KeyError(f"{path}: checkpoint is missing entry {name!r}")
    return arrays, meta
