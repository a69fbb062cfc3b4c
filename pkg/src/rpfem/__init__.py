"""Relational prior knowledge graphs, prior-conditioned scene-graph edge
prediction, and graph-transformer context updates on a float64 autodiff
substrate, with a desk-scale synthetic task to train and measure it all."""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    RpfemError,
    TrainingDiverged,
)
from .relation import RelationHeadWeights, SceneGraph, attention_maps, init_relation_weights, predict_edges
from .rng import SplitRng, xavier_uniform
from .rpkg import (
    AnnotatedImage,
    LabelMap,
    ObjectInstance,
    RelationalPriorKnowledgeGraph,
    assemble_rpkg,
    build_rpkg,
    compute_cooccurrence,
    compute_distance,
    compute_orientation,
    ingest_corpus,
    load_class_embeddings,
    load_rpkg,
    save_rpkg,
    synthetic_embeddings,
)
from .tensor import (
    Tensor,
    concat,
    grad_check,
    layer_norm,
    leaky_relu,
    log_softmax,
    matmul,
    no_grad,
    sigmoid,
    softmax,
)
from .transformer import (
    ContextState,
    ContextUpdateLayer,
    context_update,
    init_context_stack,
    run_stack,
    update_adjacency,
)

__version__ = "0.1.0"
