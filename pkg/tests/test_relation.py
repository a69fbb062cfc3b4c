"""Edge prediction: forced-attention cases, oracle agreement, symmetries."""
import os

import numpy as np
import pytest

from rpfem.errors import ContractError, DimensionError
from rpfem.relation import attention_maps, init_relation_weights, predict_edges
from rpfem.rng import SplitRng
from rpfem.rpkg import RelationalPriorKnowledgeGraph
from rpfem.tensor import Tensor, grad_check, mul, sum_all

from reference import reference_predict_edges


def make_rpkg(seed, c=2, fr=4, r=2, identical_embeddings=False):
    rng = SplitRng(seed)
    emb = rng.child("D").normal((c, fr))
    if identical_embeddings:
        emb = np.tile(emb[:1], (c, 1))
    return RelationalPriorKnowledgeGraph(
        classes=[f"k{i}" for i in range(c)],
        embeddings=Tensor(emb),
        relations=("distance",) if r == 2 else ("cooccurrence",),
        priors=Tensor(rng.child("K").normal((c, c, r))),
    )


def make_setup(seed, n=3, c=2, fp=4, r=2, heads=2, fe=4):
    rpkg = make_rpkg(seed, c=c, fr=fp, r=r)
    weights = init_relation_weights(SplitRng(seed).child("w"), fp, fp, r, fe, n_heads=heads)
    p = Tensor(SplitRng(seed).child("P").normal((n, fp)))
    return p, rpkg, weights


class TestForcedAttention:
    def test_single_class_forces_uniform_output(self):
        p, _, weights = make_setup(0, n=4, c=1)
        rpkg = make_rpkg(0, c=1)
        edges = predict_edges(p, rpkg, weights).data
        expected = np.concatenate(
            [rpkg.priors.data[0, 0] @ w.data for w in weights.wv]
        ) @ weights.we.data
        for i in range(4):
            for j in range(4):
                assert np.allclose(edges[i, j], expected, atol=1e-12)

    def test_identical_embeddings_average_the_priors(self):
        rng = SplitRng(1)
        c, fp, r = 3, 4, 2
        rpkg = make_rpkg(1, c=c, fr=fp, r=r, identical_embeddings=True)
        weights = init_relation_weights(rng.child("w"), fp, fp, r, 4, n_heads=2)
        p = Tensor(rng.child("P").normal((2, fp)))
        edges = predict_edges(p, rpkg, weights).data
        mean_prior = rpkg.priors.data.reshape(c * c, r).mean(axis=0)
        expected = np.concatenate([mean_prior @ w.data for w in weights.wv]) @ weights.we.data
        assert np.allclose(edges, expected[None, None, :], atol=1e-10)


class TestOracle:
    @pytest.mark.parametrize("seed,heads", [(0, 1), (1, 2), (2, 4)])
    def test_matches_quadruple_loop(self, seed, heads):
        rng = SplitRng(seed + 700)
        n = 2 + seed % 5
        c = 2 + seed % 3
        p, rpkg, weights = make_setup(seed + 700, n=n, c=c, heads=heads)
        rpkg = make_rpkg(seed + 700, c=c, fr=4, r=2)
        produced = predict_edges(p, rpkg, weights).data
        expected = reference_predict_edges(p.data, rpkg.embeddings.data, rpkg.priors.data, weights)
        assert np.abs(produced - expected).max() <= 1e-10

    def test_backends_agree(self, monkeypatch):
        p, rpkg, weights = make_setup(5, n=5, c=3)
        monkeypatch.setenv("RPFEM_BACKEND", "numpy")
        via_numpy = predict_edges(p, rpkg, weights).data
        monkeypatch.setenv("RPFEM_BACKEND", "numba")
        via_numba = predict_edges(p, rpkg, weights).data
        assert np.abs(via_numpy - via_numba).max() <= 1e-12


class TestAttentionMaps:
    def test_slices_are_distributions(self):
        p, rpkg, weights = make_setup(3, n=4, c=3)
        rpkg = make_rpkg(3, c=3)
        maps = attention_maps(p, rpkg, weights)
        assert maps.shape == (2, 4, 4, 3, 3)
        sums = maps.reshape(2, 4, 4, -1).sum(axis=-1)
        assert np.abs(sums - 1).max() <= 1e-9
        assert maps.min() >= 0

    def test_single_class_is_exactly_one(self):
        p, _, weights = make_setup(4, n=3, c=1)
        maps = attention_maps(p, make_rpkg(4, c=1), weights)
        assert np.array_equal(maps, np.ones_like(maps))

    def test_class_permutation_permutes_axes(self):
        p, rpkg, weights = make_setup(6, n=3, c=3)
        rpkg = make_rpkg(6, c=3)
        perm = np.array([2, 0, 1])
        permuted = RelationalPriorKnowledgeGraph(
            classes=[rpkg.classes[i] for i in perm],
            embeddings=Tensor(rpkg.embeddings.data[perm]),
            relations=rpkg.relations,
            priors=Tensor(rpkg.priors.data[perm][:, perm]),
        )
        base = attention_maps(p, rpkg, weights)
        other = attention_maps(p, permuted, weights)
        assert np.abs(other - base[:, :, :, perm][:, :, :, :, perm]).max() <= 1e-12

    def test_desk_scale_cap(self):
        p, rpkg, weights = make_setup(7, n=3, c=2)
        import rpfem.relation as relation

        original = relation._ATTENTION_MAP_CAP
        relation._ATTENTION_MAP_CAP = 10
        try:
            with pytest.raises(ContractError, match="desk-scale"):
                attention_maps(p, rpkg, weights)
        finally:
            relation._ATTENTION_MAP_CAP = original


class TestSymmetries:
    @pytest.mark.parametrize("seed", range(5))
    def test_proposal_permutation_equivariance(self, seed):
        p, rpkg, weights = make_setup(seed + 20, n=5, c=3)
        rpkg = make_rpkg(seed + 20, c=3)
        perm = SplitRng(seed).permutation(5)
        base = predict_edges(p, rpkg, weights).data
        permuted = predict_edges(Tensor(p.data[perm]), rpkg, weights).data
        assert np.abs(permuted - base[perm][:, perm]).max() <= 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_class_permutation_invariance(self, seed):
        p, rpkg, weights = make_setup(seed + 40, n=4, c=3)
        rpkg = make_rpkg(seed + 40, c=3)
        perm = SplitRng(seed + 1).permutation(3)
        permuted = RelationalPriorKnowledgeGraph(
            classes=[rpkg.classes[i] for i in perm],
            embeddings=Tensor(rpkg.embeddings.data[perm]),
            relations=rpkg.relations,
            priors=Tensor(rpkg.priors.data[perm][:, perm]),
        )
        base = predict_edges(p, rpkg, weights).data
        other = predict_edges(p, permuted, weights).data
        assert np.abs(other - base).max() <= 1e-9


class TestGradientsAndErrors:
    def test_end_to_end_gradient(self):
        p, rpkg, weights = make_setup(8, n=3, c=2)
        inputs = [p] + [t for _, t in weights.named_params()]
        report = grad_check(
            lambda *ts: sum_all(mul(predict_edges(ts[0], rpkg, weights), predict_edges(ts[0], rpkg, weights))),
            inputs,
        )
        assert report.max_rel_err <= 1e-4

    def test_dimension_mismatch_is_config_error(self):
        p, rpkg, weights = make_setup(9, n=3, c=2, fp=4)
        bad = Tensor(SplitRng(9).normal((3, 6)))
        with pytest.raises(DimensionError):
            predict_edges(bad, rpkg, weights)

    def test_empty_class_set_rejected(self):
        p, rpkg, weights = make_setup(10)
        empty = RelationalPriorKnowledgeGraph(
            classes=[], embeddings=Tensor(np.zeros((0, 4))), relations=("distance",), priors=Tensor(np.zeros((0, 0, 2)))
        )
        with pytest.raises(ContractError):
            predict_edges(p, empty, weights)

    def test_output_deterministic(self):
        p, rpkg, weights = make_setup(11, n=4, c=3)
        rpkg = make_rpkg(11, c=3)
        assert np.array_equal(predict_edges(p, rpkg, weights).data, predict_edges(p, rpkg, weights).data)
