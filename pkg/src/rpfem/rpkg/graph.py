"""Relational prior knowledge graph: class embeddings D plus prior tensor K.

The on-disk container is: magic "RPKG", version u16 LE, header length u32 LE,
JSON header (classes, relations, shapes), raw little-endian float64 blobs for
D then K, and a trailing CRC32 over everything before it.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DimensionError, FormatError
from ..tensor import Tensor
from .corpus import AnnotatedImage
from .priors import ORIENTATION_CHANNELS, compute_cooccurrence, compute_distance, compute_orientation

MAGIC = b"RPKG"
VERSION = 1

RELATION_ORDER = ("cooccurrence", "orientation", "distance")
RELATION_WIDTHS = {"cooccurrence": 1, "orientation": 5, "distance": 2}
_CHANNEL_LABELS = {
    "cooccurrence": ("cooccurrence",),
    "orientation": ORIENTATION_CHANNELS,
    "distance": ("distance_mean", "distance_std"),
}


def normalize_relations(relations) -> tuple[str, ...]:
    """Validate a relation subset and return it in canonical order."""
    chosen = set(relations)
    unknown = chosen - set(RELATION_ORDER)
    if unknown:
        raise ConfigError(f"unknown relations {sorted(unknown)}; valid: {list(RELATION_ORDER)}")
    if not chosen:
        raise ConfigError("at least one relation must be selected")
    return tuple(r for r in RELATION_ORDER if r in chosen)


@dataclass
class RelationalPriorKnowledgeGraph:
    classes: list[str]
    embeddings: Tensor  # D, (C, F_r)
    relations: tuple[str, ...]
    priors: Tensor  # K, (C, C, R)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def feature_dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def prior_width(self) -> int:
        return self.priors.shape[2]

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ConfigError(f"unknown class {name!r}; known: {self.classes}")

    def channel_labels(self) -> list[str]:
        labels = []
        for rel in self.relations:
            labels.extend(_CHANNEL_LABELS[rel])
        return labels

    def prior_vector(self, class_a: str, class_b: str) -> np.ndarray:
        return self.priors.data[self.class_index(class_a), self.class_index(class_b)].copy()


def assemble_rpkg(
    embeddings: Tensor,
    relation_selection,
    computed: dict[str, Tensor],
    classes: list[str],
) -> RelationalPriorKnowledgeGraph:
    """Stack computed prior channels in canonical order for the selection."""
    relations = normalize_relations(relation_selection)
    c = len(classes)
    if embeddings.ndim != 2 or embeddings.shape[0] != c:
        raise DimensionError(
            f"embeddings shape {embeddings.shape} does not match {c} classes"
        )
    chunks = []
    for rel in relations:
        if rel not in computed:
            raise ConfigError(f"relation {rel!r} selected but not computed")
        block = computed[rel]
        want = (c, c, RELATION_WIDTHS[rel])
        if block.shape != want:
            raise DimensionError(
                f"prior {rel!r} has shape {block.shape}, expected {want} (class-set mismatch?)"
            )
        chunks.append(block.data)
    return RelationalPriorKnowledgeGraph(
        classes=list(classes),
        embeddings=Tensor(embeddings.data.copy()),
        relations=relations,
        priors=Tensor(np.concatenate(chunks, axis=2)),
    )


def build_rpkg(
    corpus: list[AnnotatedImage],
    classes: list[str],
    embeddings: Tensor,
    relations,
) -> RelationalPriorKnowledgeGraph:
    relations = normalize_relations(relations)
    computed: dict[str, Tensor] = {}
    if "cooccurrence" in relations:
        computed["cooccurrence"] = compute_cooccurrence(corpus, classes)
    if "orientation" in relations:
        computed["orientation"] = compute_orientation(corpus, classes)
    if "distance" in relations:
        computed["distance"] = compute_distance(corpus, classes)
    return assemble_rpkg(embeddings, relations, computed, classes)


def save_rpkg(rpkg: RelationalPriorKnowledgeGraph, path) -> None:
    header = {
        "classes": rpkg.classes,
        "relations": list(rpkg.relations),
        "embedding_shape": list(rpkg.embeddings.shape),
        "prior_shape": list(rpkg.priors.shape),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    body = (
        MAGIC
        + struct.pack("<H", VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + np.ascontiguousarray(rpkg.embeddings.data, dtype="<f8").tobytes()
        + np.ascontiguousarray(rpkg.priors.data, dtype="<f8").tobytes()
    )
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_rpkg(path) -> RelationalPriorKnowledgeGraph:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read rpkg {path}: {exc}")
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise FormatError(f"{path} is not an rpkg file (bad magic)")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: version mismatch, file v{version} vs supported v{VERSION}")
    (header_len,) = struct.unpack_from("<I", blob, 6)
    header_end = 10 + header_len
    if len(blob) < header_end + 4:
        raise FormatError(f"{path}: truncated header")
    stored_crc = struct.unpack_from("<I", blob, len(blob) - 4)[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise FormatError(f"{path}: checksum failure")
    try:
        header = json.loads(blob[10:header_end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid header JSON ({exc.msg})")
    classes = list(header["classes"])
    relations = normalize_relations(header["relations"])
    emb_shape = tuple(header["embedding_shape"])
    prior_shape = tuple(header["prior_shape"])
    c = len(classes)
    want_r = sum(RELATION_WIDTHS[r] for r in relations)
    if emb_shape[0] != c or prior_shape != (c, c, want_r):
        raise FormatError(
            f"{path}: header declares {c} classes but shapes D={emb_shape}, K={prior_shape}"
        )
    emb_bytes = int(np.prod(emb_shape)) * 8
    prior_bytes = int(np.prod(prior_shape)) * 8
    expected_len = header_end + emb_bytes + prior_bytes + 4
    if len(blob) != expected_len:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, expected {expected_len}")
    emb = np.frombuffer(blob, dtype="<f8", count=int(np.prod(emb_shape)), offset=header_end)
    priors = np.frombuffer(
        blob, dtype="<f8", count=int(np.prod(prior_shape)), offset=header_end + emb_bytes
    )
    return RelationalPriorKnowledgeGraph(
        classes=classes,
        embeddings=Tensor(emb.reshape(emb_shape).copy()),
        relations=relations,
        priors=Tensor(priors.reshape(prior_shape).copy()),
    )
