from .corpus import AnnotatedImage, LabelMap, ObjectInstance, ingest_corpus, ingest_file, load_label_map
from .embeddings import load_class_embeddings, synthetic_embeddings, write_embeddings
from .graph import (
    RELATION_ORDER,
    RELATION_WIDTHS,
    RelationalPriorKnowledgeGraph,
    assemble_rpkg,
    build_rpkg,
    load_rpkg,
    normalize_relations,
    save_rpkg,
)
from .priors import ORIENTATION_CHANNELS, compute_cooccurrence, compute_distance, compute_orientation

__all__ = [
    "AnnotatedImage",
    "LabelMap",
    "ObjectInstance",
    "ORIENTATION_CHANNELS",
    "RELATION_ORDER",
    "RELATION_WIDTHS",
    "RelationalPriorKnowledgeGraph",
    "assemble_rpkg",
    "build_rpkg",
    "compute_cooccurrence",
    "compute_distance",
    "compute_orientation",
    "ingest_corpus",
    "ingest_file",
    "load_class_embeddings",
    "load_label_map",
    "load_rpkg",
    "normalize_relations",
    "save_rpkg",
    "synthetic_embeddings",
    "write_embeddings",
]
