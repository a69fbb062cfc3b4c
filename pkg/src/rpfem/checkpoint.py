"""Parameter checkpoints: JSON manifest + raw little-endian float64 blob.

The manifest lists {name, shape, offset} per parameter; the loader validates
the blob length against the manifest before reading anything.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

_DTYPE = "<f8"


def save_checkpoint(named_params: list[tuple[str, Tensor]], base_path) -> tuple[Path, Path]:
    base = Path(base_path)
    manifest = {"dtype": _DTYPE, "params": []}
    chunks = []
    offset = 0
    for name, p in named_params:
        arr = np.ascontiguousarray(p.data, dtype=np.float64)
        manifest["params"].append({"name": name, "shape": list(p.data.shape), "offset": offset})
        chunks.append(arr.astype(_DTYPE).tobytes())
        offset += arr.size * 8
    manifest["total_bytes"] = offset
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    bin_path.write_bytes(b"".join(chunks))
    return json_path, bin_path


def load_checkpoint(base_path) -> dict[str, np.ndarray]:
    base = Path(base_path)
    json_path = base.with_suffix(".json")
    bin_path = base.with_suffix(".bin")
    try:
        manifest = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint manifest {json_path}: {exc}")
    if manifest.get("dtype") != _DTYPE:
        raise FormatError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
    blob = bin_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise FormatError(
            f"checkpoint blob is {len(blob)} bytes, manifest declares {manifest['total_bytes']}"
        )
    out: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(blob):
            raise FormatError(f"parameter {entry['name']!r} overruns the checkpoint blob")
        out[entry["name"]] = np.frombuffer(blob[start:end], dtype=_DTYPE).reshape(shape).copy()
    return out


def restore_params(named_params: list[tuple[str, Tensor]], loaded: dict[str, np.ndarray]) -> None:
    for name, p in named_params:
        if name not in loaded:
            raise FormatError(f"checkpoint has no parameter {name!r}")
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"parameter {name!r} shape {arr.shape} does not match model shape {p.data.shape}"
            )
        p.data = arr.copy()
