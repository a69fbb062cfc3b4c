"""Desk-scale synthetic task exercising the full enhancement stack.

Scenes draw their classes from a context distribution (for the default task:
three classes out of one of two four-class groups, so group membership is the
scene context).  Ambiguous proposals are 50/50 prototype mixtures of a class
and its confusable partner from the other group — unresolvable without
context by construction — and duplicate proposals copy an earlier proposal's
realized feature with fresh noise and carry a reserved label.  A matching
annotation corpus generator feeds the prior builder so the priors reflect
the same generating distribution.
"""
from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from itertools import combinations
from math import ceil, cos, pi, sin
from pathlib import Path

import numpy as np

from .backend import thread_count
from .errors import ConfigError, ContractError, DimensionError, TrainingDiverged
from .optim import Adam, collect_grads, zero_grads
from .relation import RelationHeadWeights, SceneGraph, init_relation_weights, predict_edges
from .rng import SplitRng
from .rpkg.corpus import AnnotatedImage, ObjectInstance
from .rpkg.embeddings import write_embeddings
from .rpkg.graph import RELATION_ORDER, RelationalPriorKnowledgeGraph, build_rpkg
from .tensor import Tensor, concat, log_softmax, mul, no_grad, scale, sum_all
from .transformer import AffineMap, ContextUpdateLayer, _affine, init_context_stack, run_stack

DUPLICATE_NAME = "duplicate"


def class_names(n_classes: int) -> list[str]:
    return [f"class_{i}" for i in range(n_classes)]


@dataclass(frozen=True)
class ToyTaskSpec:
    n_classes: int = 8
    feature_dim: int = 16
    proposals_per_scene: int = 12
    noise_scale: float = 0.3
    ambiguity_rate: float = 0.5
    duplicate_rate: float = 0.15
    prototype_seed: int = 101
    # context structure: scene classes come from one subset; None = independent
    subsets: tuple[tuple[int, ...], ...] | None = None
    subset_probs: tuple[float, ...] | None = None
    confusable_partner: tuple[int, ...] | None = None
    independent_presence: float = 0.5
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError("toy task needs at least one class")
        if not (0.0 <= self.ambiguity_rate <= 1.0 and 0.0 <= self.duplicate_rate <= 1.0):
            raise ConfigError("ambiguity and duplicate rates must lie in [0, 1]")
        if self.noise_scale <= 0:
            raise ConfigError("noise scale must be > 0")
        if self.subsets is not None:
            if self.subset_probs is None or len(self.subset_probs) != len(self.subsets):
                raise ConfigError("subset_probs must match subsets")
            if abs(sum(self.subset_probs) - 1.0) > 1e-9:
                raise ConfigError("subset_probs must sum to 1")
            for s in self.subsets:
                if not s or any(not 0 <= c < self.n_classes for c in s):
                    raise ConfigError(f"invalid class subset {s}")
        if self.ambiguity_rate > 0 and self.confusable_partner is None:
            raise ConfigError("ambiguity_rate > 0 needs a confusable_partner table")
        if self.confusable_partner is not None:
            p = self.confusable_partner
            if len(p) != self.n_classes or any(p[p[c]] != c or p[c] == c for c in range(self.n_classes)):
                raise ConfigError("confusable_partner must be a fixed-point-free involution")

    @property
    def duplicate_index(self) -> int:
        return self.n_classes

    def prototypes(self) -> np.ndarray:
        return _prototypes(self.prototype_seed, self.n_classes, self.feature_dim)

    def fingerprint(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=8)
def _prototypes(seed: int, n_classes: int, feature_dim: int) -> np.ndarray:
    rng = SplitRng(seed).child("prototypes")
    return rng.normal((n_classes, feature_dim))


def spec_from_fingerprint(d: dict) -> ToyTaskSpec:
    """Rebuild a task spec from its JSON-round-tripped fingerprint."""
    d = dict(d)
    if d.get("subsets") is not None:
        d["subsets"] = tuple(tuple(s) for s in d["subsets"])
    if d.get("subset_probs") is not None:
        d["subset_probs"] = tuple(d["subset_probs"])
    if d.get("confusable_partner") is not None:
        d["confusable_partner"] = tuple(d["confusable_partner"])
    return ToyTaskSpec(**d)


def default_context_spec(**overrides) -> ToyTaskSpec:
    """Two four-class groups; scenes hold three classes of one group; each
    class's confusable partner lives in the other group."""
    n_classes = int(overrides.pop("n_classes", 8))
    if n_classes % 2 != 0 or n_classes < 4:
        raise ConfigError("the context task needs an even class count >= 4")
    even = tuple(range(0, n_classes, 2))
    odd = tuple(range(1, n_classes, 2))
    size = min(3, len(even))
    subsets = [tuple(s) for s in combinations(even, size)] + [tuple(s) for s in combinations(odd, size)]
    probs = tuple(1.0 / len(subsets) for _ in subsets)
    partner = tuple(c + 1 if c % 2 == 0 else c - 1 for c in range(n_classes))
    return ToyTaskSpec(
        n_classes=n_classes,
        subsets=tuple(subsets),
        subset_probs=probs,
        confusable_partner=partner,
        **overrides,
    )


def independent_spec(**overrides) -> ToyTaskSpec:
    """Scene classes sampled independently; no ambiguity, no duplicates."""
    overrides.setdefault("ambiguity_rate", 0.0)
    overrides.setdefault("duplicate_rate", 0.0)
    return ToyTaskSpec(subsets=None, subset_probs=None, confusable_partner=None, **overrides)


# ---------------------------------------------------------------------------
# geometry shared by corpus and scene generation


def _class_box(spec: ToyTaskSpec, cls: int, rng: SplitRng) -> tuple[float, float, float, float]:
    """Class-anchored box (home position on a ring plus jitter)."""
    angle = 2.0 * pi * cls / spec.n_classes
    cx = spec.image_width / 2 + 0.27 * spec.image_width * cos(angle) + rng.uniform(-20, 20)
    cy = spec.image_height / 2 + 0.27 * spec.image_height * sin(angle) + rng.uniform(-20, 20)
    w = 60.0 + rng.uniform(-10, 10)
    h = 48.0 + rng.uniform(-8, 8)
    x = min(max(cx - w / 2, 0.0), spec.image_width - w)
    y = min(max(cy - h / 2, 0.0), spec.image_height - h)
    return (x, y, w, h)


def _sample_scene_classes(spec: ToyTaskSpec, rng: SplitRng) -> tuple[int, ...] | None:
    if spec.subsets is None:
        return None
    return spec.subsets[rng.choice(len(spec.subsets), p=spec.subset_probs)]


# ---------------------------------------------------------------------------
# corpus generation (feeds the prior builder)


@dataclass
class CorpusPaths:
    annotations: Path
    labelmap: Path
    embeddings: Path


def synthesize_annotated_corpus(spec: ToyTaskSpec, n_images: int, rng: SplitRng) -> list[AnnotatedImage]:
    if spec.n_classes < 1:
        raise ConfigError("degenerate task spec: empty class set")
    names = class_names(spec.n_classes)
    images = []
    for i in range(n_images):
        img_rng = rng.child(i)
        subset = _sample_scene_classes(spec, img_rng)
        if subset is None:
            present = [c for c in range(spec.n_classes) if img_rng.random() < spec.independent_presence]
        else:
            present = list(subset)
        objects = [ObjectInstance(names[c], _class_box(spec, c, img_rng.child(c))) for c in present]
        images.append(AnnotatedImage(f"toy-{i:05d}", spec.image_width, spec.image_height, objects))
    return images


def generate_corpus(spec: ToyTaskSpec, n_images: int, seed: int, out_dir) -> CorpusPaths:
    """Write annotations.jsonl, labelmap.json and embeddings.json; the class
    embeddings are the task prototypes so priors and features share geometry."""
    if n_images < 1:
        raise ConfigError(f"n_images must be >= 1, got {n_images}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = class_names(spec.n_classes)
    corpus = synthesize_annotated_corpus(spec, n_images, SplitRng(seed).child("corpus"))
    ann_path = out / "annotations.jsonl"
    with ann_path.open("w") as fh:
        for img in corpus:
            record = {
                "image_id": img.image_id,
                "width": img.width,
                "height": img.height,
                "objects": [{"label": o.label, "bbox": list(o.bbox)} for o in img.objects],
            }
            fh.write(json.dumps(record) + "\n")
    map_path = out / "labelmap.json"
    map_path.write_text(
        json.dumps({"target_classes": names, "source_to_target": {n: n for n in names}}, indent=1)
        + "\n"
    )
    emb_path = out / "embeddings.json"
    write_embeddings(emb_path, names, spec.prototypes())
    return CorpusPaths(annotations=ann_path, labelmap=map_path, embeddings=emb_path)


def build_toy_rpkg(spec: ToyTaskSpec, n_images: int, seed: int, relations=RELATION_ORDER) -> RelationalPriorKnowledgeGraph:
    """In-memory corpus -> priors, for tests and the ablation runner."""
    corpus = synthesize_annotated_corpus(spec, n_images, SplitRng(seed).child("corpus"))
    return build_rpkg(corpus, class_names(spec.n_classes), Tensor(spec.prototypes()), relations)


# ---------------------------------------------------------------------------
# scene generation


@dataclass
class ToyScene:
    features: np.ndarray  # (N, F_p)
    labels: np.ndarray  # (N,) int, duplicate slots carry the reserved index
    ambiguous_mask: np.ndarray  # (N,) bool
    boxes: np.ndarray  # (N, 4)
    n_classes: int = 0  # label universe; index n_classes is the duplicate label


def generate_scene(spec: ToyTaskSpec, seed) -> ToyScene:
    rng = seed.child("scene") if isinstance(seed, SplitRng) else SplitRng(int(seed)).child("scene")
    protos = spec.prototypes()
    n = spec.proposals_per_scene
    subset = _sample_scene_classes(spec, rng)
    features = np.zeros((n, spec.feature_dim))
    labels = np.zeros(n, dtype=np.int64)
    ambiguous = np.zeros(n, dtype=bool)
    boxes = np.zeros((n, 4))
    base_slots: list[int] = []
    for s in range(n):
        slot_rng = rng.child(s)
        if base_slots and slot_rng.random() < spec.duplicate_rate:
            src = base_slots[slot_rng.choice(len(base_slots))]
            features[s] = features[src] + slot_rng.normal(spec.feature_dim, spec.noise_scale)
            labels[s] = spec.duplicate_index
            boxes[s] = boxes[src] + np.append(slot_rng.uniform(-6, 6, 2), (0.0, 0.0))
            continue
        if subset is None:
            cls = int(slot_rng.choice(spec.n_classes))
        else:
            cls = subset[slot_rng.choice(len(subset))]
        if spec.ambiguity_rate > 0 and slot_rng.random() < spec.ambiguity_rate:
            partner = spec.confusable_partner[cls]
            mean = 0.5 * (protos[cls] + protos[partner])
            ambiguous[s] = True
        else:
            mean = protos[cls]
        features[s] = mean + slot_rng.normal(spec.feature_dim, spec.noise_scale)
        labels[s] = cls
        boxes[s] = _class_box(spec, cls, slot_rng)
        base_slots.append(s)
    return ToyScene(
        features=features,
        labels=labels,
        ambiguous_mask=ambiguous,
        boxes=boxes,
        n_classes=spec.n_classes,
    )


def make_eval_scenes(spec: ToyTaskSpec, n_proposals: int, seed: int) -> list[ToyScene]:
    n_scenes = max(1, ceil(n_proposals / spec.proposals_per_scene))
    root = SplitRng(seed).child("eval")
    return [generate_scene(spec, root.child(i)) for i in range(n_scenes)]


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ModelDims:
    proposal: int
    class_embed: int
    edge: int
    context: int
    adjacency: int | None = None
    attn: int | None = None
    value: int | None = None

    def __post_init__(self):
        if self.context != self.proposal:
            raise ConfigError(
                f"context width {self.context} must equal proposal width {self.proposal} "
                "(the first residual adds messages to the raw proposal features)"
            )

    @classmethod
    def square(cls, width: int) -> "ModelDims":
        return cls(proposal=width, class_embed=width, edge=width, context=width)


@dataclass
class EnhancedHead:
    relation: RelationHeadWeights
    layers: list[ContextUpdateLayer]
    classifier: AffineMap

    def forward(self, features: Tensor, rpkg: RelationalPriorKnowledgeGraph) -> Tensor:
        edges = predict_edges(features, rpkg, self.relation)
        z = run_stack(SceneGraph(features, edges), self.layers)
        return self.classifier.apply(concat([features, z], axis=1))

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = self.relation.named_params()
        for i, layer in enumerate(self.layers):
            out += layer.named_params(f"context.l{i}")
        out += self.classifier.named_params("classifier")
        return out


@dataclass
class BaselineHead:
    """Context-free comparison model: the same classifier on P alone."""

    classifier: AffineMap

    def forward(self, features: Tensor, rpkg=None) -> Tensor:
        return self.classifier.apply(features)

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.classifier.named_params("classifier")


def init_enhanced_head(
    rng: SplitRng,
    dims: ModelDims,
    rpkg: RelationalPriorKnowledgeGraph,
    n_heads: int,
    n_layers: int,
    n_out: int,
) -> EnhancedHead:
    if rpkg.feature_dim != dims.class_embed:
        raise DimensionError(
            f"prior embeddings width {rpkg.feature_dim} vs configured {dims.class_embed}"
        )
    relation = init_relation_weights(
        rng.child("relation"),
        proposal_dim=dims.proposal,
        class_dim=dims.class_embed,
        prior_width=rpkg.prior_width,
        edge_dim=dims.edge,
        n_heads=n_heads,
        attn_dim=dims.attn,
        value_dim=dims.value,
    )
    layers = init_context_stack(
        rng.child("context"),
        n_layers,
        edge_dim=dims.edge,
        node_dim=dims.context,
        adj_dim=dims.adjacency,
    )
    classifier = _affine(rng.child("classifier"), dims.proposal + dims.context, n_out)
    return EnhancedHead(relation=relation, layers=layers, classifier=classifier)


def init_baseline_head(rng: SplitRng, feature_dim: int, n_out: int) -> BaselineHead:
    return BaselineHead(classifier=_affine(rng.child("classifier"), feature_dim, n_out))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} vs logits rows {n}")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return scale(sum_all(mul(Tensor(onehot), log_softmax(logits, axis=1))), -1.0 / n)


def forward(scene: ToyScene, rpkg: RelationalPriorKnowledgeGraph | None, head) -> Tensor:
    """Per-proposal logits for one scene through whichever head is given."""
    return head.forward(Tensor(scene.features), rpkg)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    lr: float = 3e-3
    batch_scenes: int = 6
    seed: int = 0
    n_heads: int = 2
    n_layers: int = 1
    eval_every: int = 0  # 0 = no periodic eval
    eval_proposals: int = 600

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")


@dataclass
class MetricRow:
    step: int
    loss: float
    overall_acc: float | None = None
    ambiguous_acc: float | None = None
    duplicate_detection_rate: float | None = None


@dataclass
class TrainResult:
    model: EnhancedHead | BaselineHead
    rows: list[MetricRow]
    final: "EvalMetrics | None" = None


def train(
    spec: ToyTaskSpec,
    rpkg: RelationalPriorKnowledgeGraph | None,
    config: TrainConfig,
    baseline: bool = False,
) -> TrainResult:
    """Minimize mean cross-entropy over proposals; deterministic under seed."""
    root = SplitRng(config.seed)
    n_out = spec.n_classes + 1
    if baseline:
        model: EnhancedHead | BaselineHead = init_baseline_head(root.child("init"), spec.feature_dim, n_out)
    else:
        if rpkg is None:
            raise ConfigError("training the enhanced model needs a prior graph (or pass baseline=True)")
        dims = ModelDims.square(spec.feature_dim)
        model = init_enhanced_head(root.child("init"), dims, rpkg, config.n_heads, config.n_layers, n_out)
    params = [t for _, t in model.named_params()]
    opt = Adam(config.lr) if config.lr > 0 else None
    train_rng = root.child("batches")
    eval_scenes = None
    if config.eval_every:
        eval_scenes = make_eval_scenes(spec, config.eval_proposals, config.seed)
    rows: list[MetricRow] = []
    for step in range(1, config.steps + 1):
        scenes = [generate_scene(spec, train_rng.child(f"{step}.{k}")) for k in range(config.batch_scenes)]
        zero_grads(params)
        total = None
        for scene in scenes:
            piece = cross_entropy(forward(scene, rpkg, model), scene.labels)
            total = piece if total is None else total + piece
        loss = scale(total, 1.0 / len(scenes))
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step}")
        loss.backward()
        if opt is not None:
            opt.step(params, collect_grads(params))
        row = MetricRow(step=step, loss=value)
        if eval_scenes and step % config.eval_every == 0:
            m = evaluate(model, eval_scenes, rpkg)
            row.overall_acc = m.overall_acc
            row.ambiguous_acc = m.ambiguous_acc
            row.duplicate_detection_rate = m.duplicate_detection_rate
        rows.append(row)
    return TrainResult(model=model, rows=rows)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalMetrics:
    overall_acc: float
    ambiguous_acc: float | None
    duplicate_detection_rate: float | None
    per_class_acc: dict[str, float]

    def as_dict(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "ambiguous_acc": self.ambiguous_acc,
            "duplicate_detection_rate": self.duplicate_detection_rate,
            "per_class_acc": self.per_class_acc,
        }


def _predict_scene(args) -> np.ndarray:
    model, scene, rpkg = args
    with no_grad():
        logits = forward(scene, rpkg, model)
    return np.argmax(logits.data, axis=1)


def evaluate(model, scenes: list[ToyScene], rpkg: RelationalPriorKnowledgeGraph | None = None) -> EvalMetrics:
    """Accuracy metrics over fixed scene order; ambiguous/duplicate metrics
    are reported absent (None) when their populations are empty."""
    if not scenes:
        raise ContractError("evaluate needs at least one scene")
    n_classes = scenes[0].n_classes
    workers = thread_count()
    jobs = [(model, scene, rpkg) for scene in scenes]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(_predict_scene, jobs))
    else:
        preds = [_predict_scene(j) for j in jobs]
    pred = np.concatenate(preds)
    truth = np.concatenate([s.labels for s in scenes])
    ambiguous = np.concatenate([s.ambiguous_mask for s in scenes])
    hits = pred == truth
    per_class: dict[str, float] = {}
    for cls in np.unique(truth):
        name = DUPLICATE_NAME if cls == n_classes else f"class_{int(cls)}"
        per_class[name] = float(hits[truth == cls].mean())
    duplicates = truth == n_classes
    return EvalMetrics(
        overall_acc=float(hits.mean()),
        ambiguous_acc=float(hits[ambiguous].mean()) if ambiguous.any() else None,
        duplicate_detection_rate=float(hits[duplicates].mean()) if duplicates.any() else None,
        per_class_acc=per_class,
    )


# ---------------------------------------------------------------------------
# ablation sweep


REFERENCE_ABLATION = {"heads": 2, "layers": 1, "relations": tuple(RELATION_ORDER)}
FULL_ABLATION_GRID = {
    "heads": (1, 2, 4),
    "layers": (1, 2, 3),
    "relations": (
        ("cooccurrence",),
        ("orientation",),
        ("distance",),
        tuple(RELATION_ORDER),
    ),
}


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


@dataclass
class AblationRow:
    study: str
    heads: int
    layers: int
    relations: tuple[str, ...]
    run_hash: str
    metrics: EvalMetrics
    final_loss: float
    wall_seconds: float


def run_ablation(
    grid: dict,
    spec: ToyTaskSpec,
    seed: int,
    train_config: TrainConfig,
    n_corpus_images: int = 300,
    eval_proposals: int = 1200,
) -> list[AblationRow]:
    """One row per listed axis value, other axes at the reference setting.

    Rows are keyed by (study, config); identical configurations reached from
    different studies train once and reuse the cached result.
    """
    if not grid:
        raise ConfigError("ablation grid is empty")
    unknown = set(grid) - set(REFERENCE_ABLATION)
    if unknown:
        raise ConfigError(f"unknown ablation axes {sorted(unknown)}")
    corpus = synthesize_annotated_corpus(spec, n_corpus_images, SplitRng(seed).child("corpus"))
    names = class_names(spec.n_classes)
    embeddings = Tensor(spec.prototypes())
    rpkg_cache: dict[tuple[str, ...], RelationalPriorKnowledgeGraph] = {}
    trained: dict[str, tuple[EvalMetrics, float, float]] = {}
    eval_scenes = make_eval_scenes(spec, eval_proposals, seed)
    rows: list[AblationRow] = []
    for axis in ("heads", "layers", "relations"):
        if axis not in grid:
            continue
        for value in grid[axis]:
            cfg = dict(REFERENCE_ABLATION)
            cfg[axis] = tuple(value) if axis == "relations" else int(value)
            relations = tuple(cfg["relations"])
            run_hash = config_hash(
                {
                    "spec": spec.fingerprint(),
                    "seed": seed,
                    "steps": train_config.steps,
                    "lr": train_config.lr,
                    "batch": train_config.batch_scenes,
                    "heads": cfg["heads"],
                    "layers": cfg["layers"],
                    "relations": list(relations),
                    "corpus_images": n_corpus_images,
                    "eval_proposals": eval_proposals,
                }
            )
            if run_hash not in trained:
                if relations not in rpkg_cache:
                    rpkg_cache[relations] = build_rpkg(corpus, names, embeddings, relations)
                started = time.perf_counter()
                cfg_train = TrainConfig(
                    steps=train_config.steps,
                    lr=train_config.lr,
                    batch_scenes=train_config.batch_scenes,
                    seed=seed,
                    n_heads=cfg["heads"],
                    n_layers=cfg["layers"],
                )
                result = train(spec, rpkg_cache[relations], cfg_train)
                metrics = evaluate(result.model, eval_scenes, rpkg_cache[relations])
                trained[run_hash] = (metrics, result.rows[-1].loss, time.perf_counter() - started)
            metrics, final_loss, wall = trained[run_hash]
            rows.append(
                AblationRow(
                    study=axis,
                    heads=cfg["heads"],
                    layers=cfg["layers"],
                    relations=relations,
                    run_hash=run_hash,
                    metrics=metrics,
                    final_loss=final_loss,
                    wall_seconds=wall,
                )
            )
    return rows
