"""Prior graph construction: ingest, the three priors, serialization."""
from math import fsum, sqrt
from pathlib import Path

import numpy as np
import pytest

from rpfem.errors import ConfigError, DimensionError, FormatError
from rpfem.rng import SplitRng
from rpfem.rpkg import (
    AnnotatedImage,
    LabelMap,
    ObjectInstance,
    assemble_rpkg,
    build_rpkg,
    compute_cooccurrence,
    compute_distance,
    compute_orientation,
    ingest_corpus,
    ingest_file,
    load_class_embeddings,
    load_rpkg,
    save_rpkg,
    synthetic_embeddings,
)
DATA = Path(__file__).parent / "data"
MICRO_CLASSES = ["cat", "dog", "hair dryer"]


def img(image_id, objects, size=(300, 400)):
    return AnnotatedImage(image_id, size[0], size[1], objects)


def obj(label, cx, cy, w=20.0, h=20.0):
    return ObjectInstance(label, (cx - w / 2, cy - h / 2, w, h))


class TestIngest:
    def test_alias_maps_to_target_class(self, micro_corpus):
        by_id = {im.image_id: im for im in micro_corpus}
        labels = [o.label for o in by_id["img05"].objects]
        assert labels == ["cat", "hair dryer"]

    def test_unmapped_labels_dropped_image_retained(self, micro_corpus):
        by_id = {im.image_id: im for im in micro_corpus}
        assert [o.label for o in by_id["img04"].objects] == ["dog"]
        assert by_id["img09"].objects == []
        assert len(micro_corpus) == 10

    def test_malformed_line_error_names_line_two(self, micro_label_map):
        with pytest.raises(FormatError, match="line 2"):
            ingest_file(DATA / "annotations_malformed.jsonl", micro_label_map)

    def test_record_with_only_unmapped_labels_keeps_empty_image(self, micro_label_map):
        lines = ['{"image_id": "x", "width": 10, "height": 10, "objects": [{"label": "unknown", "bbox": [1, 1, 2, 2]}]}']
        corpus = ingest_corpus(lines, micro_label_map)
        assert len(corpus) == 1 and corpus[0].objects == []

    def test_bbox_clamped_into_image(self, micro_label_map):
        lines = ['{"image_id": "x", "width": 100, "height": 100, "objects": [{"label": "cat", "bbox": [-10, 90, 30, 30]}]}']
        corpus = ingest_corpus(lines, micro_label_map)
        assert corpus[0].objects[0].bbox == (0.0, 90.0, 20.0, 10.0)

    def test_fully_outside_bbox_is_malformed(self, micro_label_map):
        lines = ['{"image_id": "x", "width": 100, "height": 100, "objects": [{"label": "cat", "bbox": [200, 200, 10, 10]}]}']
        with pytest.raises(FormatError, match="line 1"):
            ingest_corpus(lines, micro_label_map)

    def test_ingest_order_preserving(self, micro_corpus):
        assert [im.image_id for im in micro_corpus] == [f"img{i:02d}" for i in range(1, 11)]

    def test_labelmap_rejects_unknown_target(self):
        with pytest.raises(ConfigError, match="unknown target"):
            LabelMap(["a"], {"x": "b"})

    def test_labelmap_rejects_duplicate_targets(self):
        with pytest.raises(ConfigError, match="duplicates"):
            LabelMap(["a", "a"], {})


class TestCooccurrence:
    def test_three_image_hand_count(self):
        corpus = [
            img("1", [obj("A", 10, 10), obj("B", 30, 30)]),
            img("2", [obj("A", 10, 10)]),
            img("3", [obj("A", 10, 10), obj("B", 50, 50)]),
        ]
        cooc = compute_cooccurrence(corpus, ["A", "B"]).data[:, :, 0]
        assert cooc[0, 1] == 2 / 3
        assert cooc[1, 0] == 1.0

    def test_never_cooccurring_is_zero(self):
        corpus = [img("1", [obj("A", 10, 10)]), img("2", [obj("B", 10, 10)])]
        cooc = compute_cooccurrence(corpus, ["A", "B"]).data[:, :, 0]
        assert cooc[0, 1] == 0.0 and cooc[1, 0] == 0.0

    def test_two_instances_make_diagonal_one(self):
        corpus = [img("1", [obj("A", 10, 10), obj("A", 40, 40)])]
        cooc = compute_cooccurrence(corpus, ["A"]).data[:, :, 0]
        assert cooc[0, 0] == 1.0

    def test_absent_class_rows_zero(self):
        corpus = [img("1", [obj("A", 10, 10)])]
        cooc = compute_cooccurrence(corpus, ["A", "ghost"]).data[:, :, 0]
        assert np.array_equal(cooc[1], [0.0, 0.0])

    def test_ratio_times_count_is_integral(self, micro_corpus):
        cooc = compute_cooccurrence(micro_corpus, MICRO_CLASSES).data[:, :, 0]
        counts = np.array([7.0, 5.0, 3.0])  # images containing each class
        products = cooc * counts[:, None]
        assert np.abs(products - np.round(products)).max() <= 1e-9


class TestOrientation:
    def test_left_of_indicators(self):
        corpus = [img("1", [obj("A", 10, 10), obj("B", 20, 10)])]
        orient = compute_orientation(corpus, ["A", "B"]).data
        assert np.array_equal(orient[0, 1], [0, 1, 0, 0, 0])
        assert np.array_equal(orient[1, 0], [0, 0, 1, 0, 0])

    def test_identical_centers_count_as_neither_side_but_center_of(self):
        a = ObjectInstance("A", (0.0, 0.0, 40.0, 40.0))  # center (20, 20)
        b = ObjectInstance("B", (10.0, 10.0, 20.0, 20.0))  # center (20, 20)
        orient = compute_orientation([img("1", [a, b])], ["A", "B"]).data
        assert np.array_equal(orient[0, 1], [1, 0, 0, 0, 0])
        assert np.array_equal(orient[1, 0], [1, 0, 0, 0, 0])

    def test_symmetry_left_right_above_below(self, micro_corpus):
        orient = compute_orientation(micro_corpus, MICRO_CLASSES).data
        assert np.array_equal(orient[:, :, 1], orient[:, :, 2].T)
        assert np.array_equal(orient[:, :, 3], orient[:, :, 4].T)


class TestDistance:
    def test_three_four_five_triangle(self):
        corpus = [img("1", [obj("A", 0, 0, 2, 2), obj("B", 30, 40, 2, 2)])]
        dist = compute_distance(corpus, ["A", "B"]).data
        assert dist[0, 1, 0] == 50.0 / 500.0
        assert dist[0, 1, 1] == 0.0  # single observation

    def test_two_observations_mean_and_std(self):
        corpus = [
            img("1", [obj("A", 0, 0, 2, 2), obj("B", 30, 40, 2, 2)]),  # d = 0.1
            img("2", [obj("A", 0, 0, 2, 2), obj("B", 90, 120, 2, 2)]),  # d = 0.3
        ]
        dist = compute_distance(corpus, ["A", "B"]).data
        vals = [50.0 / 500.0, 150.0 / 500.0]
        mean = fsum(vals) / 2
        std = sqrt(fsum((v - mean) ** 2 for v in vals) / 2)
        assert dist[0, 1, 0] == mean
        assert dist[0, 1, 1] == std
        assert mean == pytest.approx(0.2) and std == pytest.approx(0.1)

    def test_symmetry_bitwise(self, micro_corpus):
        dist = compute_distance(micro_corpus, MICRO_CLASSES).data
        assert np.array_equal(dist[:, :, 0], dist[:, :, 0].T)
        assert np.array_equal(dist[:, :, 1], dist[:, :, 1].T)
        assert np.all(dist >= 0)


def random_corpus(seed, n_classes=4, n_images=12):
    rng = SplitRng(seed)
    classes = [f"c{i}" for i in range(n_classes)]
    corpus = []
    for i in range(n_images):
        irng = rng.child(i)
        n_obj = int(irng.integers(0, 6, None))
        objects = []
        for k in range(n_obj):
            orng = irng.child(k)
            label = classes[int(orng.integers(0, n_classes, None))]
            cx = float(orng.uniform(5, 295))
            cy = float(orng.uniform(5, 395))
            w = float(orng.uniform(4, 60))
            h = float(orng.uniform(4, 60))
            objects.append(ObjectInstance(label, (min(max(cx - w / 2, 0), 300 - w), min(max(cy - h / 2, 0), 400 - h), w, h)))
        corpus.append(img(f"r{i:03d}", objects))
    return classes, corpus


class TestInvariantsOnRandomCorpora:
    @pytest.mark.parametrize("seed", range(10))
    def test_symmetries_hold_exactly(self, seed):
        classes, corpus = random_corpus(seed)
        orient = compute_orientation(corpus, classes).data
        dist = compute_distance(corpus, classes).data
        cooc = compute_cooccurrence(corpus, classes).data[:, :, 0]
        assert np.array_equal(orient[:, :, 1], orient[:, :, 2].T)
        assert np.array_equal(orient[:, :, 3], orient[:, :, 4].T)
        assert np.array_equal(dist[:, :, 0], dist[:, :, 0].T)
        assert np.array_equal(dist[:, :, 1], dist[:, :, 1].T)
        assert np.all(cooc >= 0) and np.all(cooc <= 1)
        assert np.all(orient >= 0) and np.all(orient <= 1)
        # never-co-occurring class pairs stay all-zero everywhere
        never = cooc == 0
        np.fill_diagonal(never, False)
        assert np.all(orient[never] == 0)
        assert np.all(dist[never] == 0)

    @pytest.mark.parametrize("seed", range(4))
    def test_record_shuffle_leaves_every_prior_bit_identical(self, seed):
        classes, corpus = random_corpus(seed, n_images=15)
        shuffled = [corpus[i] for i in SplitRng(seed + 50).permutation(len(corpus))]
        for compute in (compute_cooccurrence, compute_orientation, compute_distance):
            assert np.array_equal(compute(corpus, classes).data, compute(shuffled, classes).data)


class TestAssemble:
    def _priors(self, corpus, classes):
        return {
            "cooccurrence": compute_cooccurrence(corpus, classes),
            "orientation": compute_orientation(corpus, classes),
            "distance": compute_distance(corpus, classes),
        }

    def test_all_three_relations_width_eight(self, micro_corpus, micro_embeddings):
        rpkg = assemble_rpkg(
            micro_embeddings,
            ("cooccurrence", "orientation", "distance"),
            self._priors(micro_corpus, MICRO_CLASSES),
            MICRO_CLASSES,
        )
        assert rpkg.prior_width == 8

    def test_single_relation_widths(self, micro_corpus, micro_embeddings):
        priors = self._priors(micro_corpus, MICRO_CLASSES)
        assert assemble_rpkg(micro_embeddings, ("cooccurrence",), priors, MICRO_CLASSES).prior_width == 1
        assert assemble_rpkg(micro_embeddings, ("distance",), priors, MICRO_CLASSES).prior_width == 2
        assert assemble_rpkg(micro_embeddings, ("orientation", "distance"), priors, MICRO_CLASSES).prior_width == 7

    def test_channel_order_is_canonical(self, micro_corpus, micro_embeddings):
        priors = self._priors(micro_corpus, MICRO_CLASSES)
        rpkg = assemble_rpkg(micro_embeddings, ("distance", "cooccurrence"), priors, MICRO_CLASSES)
        assert rpkg.relations == ("cooccurrence", "distance")
        assert rpkg.channel_labels() == ["cooccurrence", "distance_mean", "distance_std"]

    def test_class_set_mismatch_rejected(self, micro_corpus, micro_embeddings):
        small = compute_cooccurrence(micro_corpus[:2], ["cat", "dog"])
        with pytest.raises(DimensionError):
            assemble_rpkg(micro_embeddings, ("cooccurrence",), {"cooccurrence": small}, MICRO_CLASSES)


class TestSerialization:
    def _build(self, micro_corpus, micro_embeddings):
        return build_rpkg(micro_corpus, MICRO_CLASSES, micro_embeddings, ("cooccurrence", "orientation", "distance"))

    def test_round_trip_bitwise(self, tmp_path, micro_corpus, micro_embeddings):
        rpkg = self._build(micro_corpus, micro_embeddings)
        save_rpkg(rpkg, tmp_path / "x.rpkg")
        back = load_rpkg(tmp_path / "x.rpkg")
        assert back.classes == rpkg.classes
        assert back.relations == rpkg.relations
        assert np.array_equal(back.embeddings.data, rpkg.embeddings.data)
        assert np.array_equal(back.priors.data, rpkg.priors.data)

    def test_truncated_file_fails_checksum(self, tmp_path, micro_corpus, micro_embeddings):
        target = tmp_path / "x.rpkg"
        save_rpkg(self._build(micro_corpus, micro_embeddings), target)
        target.write_bytes(target.read_bytes()[:-20])
        with pytest.raises(FormatError, match="(checksum|bytes|truncated)"):
            load_rpkg(target)

    def test_corrupted_payload_fails_checksum(self, tmp_path, micro_corpus, micro_embeddings):
        target = tmp_path / "x.rpkg"
        save_rpkg(self._build(micro_corpus, micro_embeddings), target)
        raw = bytearray(target.read_bytes())
        raw[60] ^= 0xFF
        target.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="checksum"):
            load_rpkg(target)

    def test_version_mismatch(self, tmp_path, micro_corpus, micro_embeddings):
        import struct
        import zlib

        target = tmp_path / "x.rpkg"
        save_rpkg(self._build(micro_corpus, micro_embeddings), target)
        raw = bytearray(target.read_bytes()[:-4])
        raw[4:6] = struct.pack("<H", 9)
        raw += struct.pack("<I", zlib.crc32(bytes(raw)))
        target.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_rpkg(target)

    def test_header_shape_mismatch(self, tmp_path, micro_corpus, micro_embeddings):
        import json
        import struct
        import zlib

        target = tmp_path / "x.rpkg"
        save_rpkg(self._build(micro_corpus, micro_embeddings), target)
        raw = target.read_bytes()
        (hlen,) = struct.unpack_from("<I", raw, 6)
        header = json.loads(raw[10 : 10 + hlen])
        header["prior_shape"] = [2, 2, 8]  # contradicts the declared classes
        new_header = json.dumps(header, sort_keys=True).encode()
        body = raw[:6] + struct.pack("<I", len(new_header)) + new_header + raw[10 + hlen : -4]
        target.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(FormatError, match="declares"):
            load_rpkg(target)

    def test_golden_micro_corpus_matches_checked_in_file(self, micro_corpus, micro_embeddings):
        rpkg = self._build(micro_corpus, micro_embeddings)
        golden = load_rpkg(DATA / "golden_micro.rpkg")
        assert golden.classes == rpkg.classes
        assert np.array_equal(golden.priors.data, rpkg.priors.data)
        assert np.array_equal(golden.embeddings.data, rpkg.embeddings.data)


class TestEmbeddings:
    def test_loads_in_class_order(self, micro_embeddings):
        assert micro_embeddings.shape == (3, 4)
        assert np.array_equal(micro_embeddings.data[0], [1.0, 0.0, 0.0, 0.5])

    def test_missing_class_error_names_it(self, tmp_path):
        path = tmp_path / "e.json"
        path.write_text('{"classes": ["cat"], "F": 2, "vectors": [[1, 2]]}')
        with pytest.raises(FormatError, match="no embedding for class dog"):
            load_class_embeddings(path, ["cat", "dog"])

    def test_inconsistent_width_rejected(self, tmp_path):
        path = tmp_path / "e.json"
        path.write_text('{"classes": ["a", "b"], "F": 2, "vectors": [[1, 2], [1, 2, 3]]}')
        with pytest.raises(FormatError, match="width"):
            load_class_embeddings(path, ["a", "b"])

    def test_synthetic_mode_is_seed_deterministic(self):
        a = synthetic_embeddings(["x", "y"], 8, seed=3)
        b = synthetic_embeddings(["x", "y"], 8, seed=3)
        c = synthetic_embeddings(["x", "y"], 8, seed=4)
        assert np.array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
