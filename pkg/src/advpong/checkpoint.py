"""Self-describing checkpoint files.

Layout: one JSON header line (format tag, version, architecture, array
manifest, run metadata) terminated by a newline, followed by the raw
little-endian float32 payload of every array in manifest order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .nn import Architecture

FORMAT_TAG = "advpong-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: dict
    arch: Architecture
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params: dict, arch: Architecture, meta: dict | None = None) -> None:
    arrays = [{"name": name, "shape": list(arr.shape)} for name, arr in params.items()]
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "arch": arch.to_json_dict(),
        "arrays": arrays,
        "dtype": "<f4",
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint header") from exc
        if header.get("format") != FORMAT_TAG:
            raise CheckpointError(f"{path}: not a checkpoint file")
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('version')}")
        params: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
            params[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    return Checkpoint(params=params, arch=Architecture.from_json_dict(header["arch"]), meta=header["meta"])


def param_digest(params: dict) -> str:
    """Order-sensitive digest of names and raw values; purity/repro checks."""
    h = hashlib.sha256()
    for name, arr in params.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
