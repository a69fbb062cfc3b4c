"""Annotation corpus ingest: line-delimited records relabeled through a class map.

annotations.jsonl carries one record per line:
    {"image_id": str, "width": int, "height": int,
     "objects": [{"label": str, "bbox": [x, y, w, h]}, ...]}
Pixels, top-left origin, y increasing downward.  labelmap.json:
    {"target_classes": [str, ...], "source_to_target": {str: str, ...}}
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..errors import ConfigError, FormatError


@dataclass
class ObjectInstance:
    label: str
    bbox: tuple[float, float, float, float]  # (x, y, w, h)

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.bbox
        return (x + w / 2.0, y + h / 2.0)


@dataclass
class AnnotatedImage:
    image_id: str
    width: float
    height: float
    objects: list[ObjectInstance] = field(default_factory=list)


@dataclass
class LabelMap:
    target_classes: list[str]
    source_to_target: dict[str, str]

    def __post_init__(self):
        if len(set(self.target_classes)) != len(self.target_classes):
            raise ConfigError("labelmap target_classes contains duplicates")
        for src, dst in self.source_to_target.items():
            if dst not in self.target_classes:
                raise ConfigError(
                    f"labelmap maps {src!r} to unknown target class {dst!r}"
                )
        self._index = {name: i for i, name in enumerate(self.target_classes)}

    def class_index(self, name: str) -> int:
        return self._index[name]

    @classmethod
    def identity(cls, classes: list[str]) -> "LabelMap":
        return cls(list(classes), {c: c for c in classes})


def load_label_map(path) -> LabelMap:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read labelmap {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"labelmap {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict) or "target_classes" not in raw or "source_to_target" not in raw:
        raise FormatError(f"labelmap {path} must define target_classes and source_to_target")
    return LabelMap(list(raw["target_classes"]), dict(raw["source_to_target"]))


def _clamped_bbox(bbox, width, height):
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        return None
    x0 = min(max(x, 0.0), width)
    y0 = min(max(y, 0.0), height)
    x1 = min(max(x + w, 0.0), width)
    y1 = min(max(y + h, 0.0), height)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _parse_record(raw: dict, label_map: LabelMap, where: str) -> AnnotatedImage:
    try:
        image_id = str(raw["image_id"])
        width = float(raw["width"])
        height = float(raw["height"])
        objects_raw = raw["objects"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: missing or invalid field ({exc})")
    if width <= 0 or height <= 0:
        raise FormatError(f"{where}: image size must be positive, got {width}x{height}")
    if not isinstance(objects_raw, list):
        raise FormatError(f"{where}: objects must be a list")
    objects = []
    for obj in objects_raw:
        try:
            label = str(obj["label"])
            bbox = obj["bbox"]
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{where}: malformed object ({exc})")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise FormatError(f"{where}: bbox must be [x, y, w, h], got {bbox!r}")
        target = label_map.source_to_target.get(label)
        if target is None:
            continue  # unmapped source labels are dropped
        clamped = _clamped_bbox(bbox, width, height)
        if clamped is None:
            raise FormatError(f"{where}: degenerate bbox {bbox!r} for label {label!r}")
        objects.append(ObjectInstance(target, clamped))
    return AnnotatedImage(image_id, width, height, objects)


def ingest_corpus(lines: Iterable[str], label_map: LabelMap, source: str = "<stream>") -> list[AnnotatedImage]:
    """Parse and relabel a corpus; images are kept even when all their objects drop."""
    corpus = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        where = f"{source} line {lineno}"
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{where}: invalid JSON ({exc.msg})")
        corpus.append(_parse_record(raw, label_map, where))
    return corpus


def ingest_file(path, label_map: LabelMap) -> list[AnnotatedImage]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read annotations {path}: {exc}")
    return ingest_corpus(text.splitlines(), label_map, source=str(path))
