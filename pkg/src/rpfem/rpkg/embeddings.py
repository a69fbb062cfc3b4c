"""Class embeddings are ingested from file, never computed here.

embeddings.json: {"classes": [str, ...], "F": int, "vectors": [[...], ...]}.
A seeded synthetic generator exists for tests and the toy task.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError
from ..rng import SplitRng
from ..tensor import Tensor


def load_class_embeddings(path, classes: list[str]) -> Tensor:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read embeddings {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"embeddings {path} is not valid JSON: {exc}")
    try:
        file_classes = list(raw["classes"])
        width = int(raw["F"])
        vectors = raw["vectors"]
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"embeddings {path} must define classes, F and vectors")
    if len(vectors) != len(file_classes):
        raise FormatError(
            f"embeddings {path}: {len(file_classes)} classes but {len(vectors)} vectors"
        )
    by_name = {}
    for name, vec in zip(file_classes, vectors):
        if len(vec) != width:
            raise FormatError(
                f"embeddings {path}: vector for {name!r} has width {len(vec)}, declared F={width}"
            )
        by_name[name] = vec
    rows = []
    for name in classes:
        if name not in by_name:
            raise FormatError(f"no embedding for class {name}")
        rows.append(by_name[name])
    return Tensor(np.array(rows, dtype=np.float64))


def synthetic_embeddings(classes: list[str], width: int, seed: int) -> Tensor:
    """Deterministic stand-in embeddings, identical across runs for a seed."""
    rng = SplitRng(seed).child("embeddings")
    return Tensor(rng.normal((len(classes), width)))


def write_embeddings(path, classes: list[str], matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    payload = {
        "classes": list(classes),
        "F": int(matrix.shape[1]),
        "vectors": [[float(v) for v in row] for row in matrix],
    }
    Path(path).write_text(json.dumps(payload) + "\n")
