from pathlib import Path

import pytest

from rpfem.rpkg import ingest_file, load_class_embeddings, load_label_map

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA


@pytest.fixture(scope="session")
def micro_label_map():
    return load_label_map(DATA / "labelmap_micro.json")


@pytest.fixture(scope="session")
def micro_corpus(micro_label_map):
    return ingest_file(DATA / "annotations_micro.jsonl", micro_label_map)


@pytest.fixture(scope="session")
def micro_embeddings(micro_label_map):
    return load_class_embeddings(DATA / "embeddings_micro.json", micro_label_map.target_classes)
