"""The three relational priors, computed from a relabeled corpus.

All accumulation is order-invariant to the last bit: indicator and presence
counters are integer-valued (exact in float64 in any order) and distance
moments use exactly-rounded sums (math.fsum) over per-class-pair buckets, so
shuffling corpus records or switching kernel backends never changes a value.
"""
from __future__ import annotations

from math import fsum, sqrt

import numpy as np

from ..kernels import pair_geometry
from ..tensor import Tensor
from .corpus import AnnotatedImage

ORIENTATION_CHANNELS = ("center_of", "left_of", "right_of", "above", "below")


def _class_indices(img: AnnotatedImage, index: dict[str, int]) -> np.ndarray:
    return np.array([index[o.label] for o in img.objects], dtype=np.int64)


def compute_cooccurrence(corpus: list[AnnotatedImage], classes: list[str]) -> Tensor:
    """Directed image-level conditional presence: P(B present | A present);
    the diagonal is P(>=2 instances of A | A present)."""
    c = len(classes)
    index = {name: i for i, name in enumerate(classes)}
    present = np.zeros(c)
    joint = np.zeros((c, c))
    multi = np.zeros(c)
    for img in corpus:
        if not img.objects:
            continue
        cls = _class_indices(img, index)
        uniq, counts = np.unique(cls, return_counts=True)
        present[uniq] += 1.0
        joint[np.ix_(uniq, uniq)] += 1.0
        multi[uniq[counts >= 2]] += 1.0
    denom = np.where(present > 0, present, 1.0)
    cooc = joint / denom[:, None]
    np.fill_diagonal(cooc, multi / denom)
    cooc[present == 0, :] = 0.0
    return Tensor(cooc[:, :, None])


def _geometry_pass(corpus: list[AnnotatedImage], classes: list[str]):
    c = len(classes)
    index = {name: i for i, name in enumerate(classes)}
    orient_acc = np.zeros((c, c, 5))
    pair_cnt = np.zeros((c, c))
    buckets: dict[tuple[int, int], list[float]] = {}
    for img in corpus:
        if len(img.objects) < 2:
            continue
        cls = _class_indices(img, index)
        centers = np.array([o.center for o in img.objects])
        boxes = np.array([o.bbox for o in img.objects])
        inv_diag = 1.0 / sqrt(img.width * img.width + img.height * img.height)
        pa, pb, dist = pair_geometry(
            cls,
            np.ascontiguousarray(centers[:, 0]),
            np.ascontiguousarray(centers[:, 1]),
            np.ascontiguousarray(boxes[:, 0]),
            np.ascontiguousarray(boxes[:, 1]),
            np.ascontiguousarray(boxes[:, 2]),
            np.ascontiguousarray(boxes[:, 3]),
            inv_diag,
            orient_acc,
            pair_cnt,
        )
        for a, b, d in zip(pa.tolist(), pb.tolist(), dist.tolist()):
            buckets.setdefault((a, b), []).append(d)
    return orient_acc, pair_cnt, buckets


def compute_orientation(corpus: list[AnnotatedImage], classes: list[str]) -> Tensor:
    """Mean of the 5 geometric indicators over every ordered co-occurring
    instance pair; ties on a coordinate count as neither side."""
    orient_acc, pair_cnt, _ = _geometry_pass(corpus, classes)
    denom = np.where(pair_cnt > 0, pair_cnt, 1.0)
    return Tensor(orient_acc / denom[:, :, None])


def compute_distance(corpus: list[AnnotatedImage], classes: list[str]) -> Tensor:
    """Mean and population std of center distance over co-occurring instance
    pairs, normalized by the image diagonal."""
    c = len(classes)
    _, _, buckets = _geometry_pass(corpus, classes)
    out = np.zeros((c, c, 2))
    for (a, b), values in buckets.items():
        n = len(values)
        mean = fsum(values) / n
        var = fsum((v - mean) ** 2 for v in values) / n
        out[a, b, 0] = mean
        out[a, b, 1] = sqrt(var)
    return Tensor(out)
