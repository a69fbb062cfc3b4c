"""Prior-conditioned edge prediction over the fully connected scene graph.

Every ordered proposal pair (i, j) forms a query [p_i + p_j concatenated];
every ordered class pair (u, v) of the prior graph forms a key; attention
over all C^2 class pairs aggregates linearly projected prior edge values,
and the concatenated head outputs map to the edge width.  The production
path streams attention row blocks through the backend kernels so the full
(N^2 x C^2) attention matrix is never materialized; the diagnostic
attention_maps path materializes it and is restricted to desk-scale shapes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .kernels import attn_backward, attn_forward
from .rng import SplitRng, xavier_uniform
from .rpkg.graph import RelationalPriorKnowledgeGraph
from .tensor import Tensor, _wire, is_grad_enabled


@dataclass
class SceneGraph:
    """Proposal node features plus the predicted edge tensor."""

    nodes: Tensor  # P, (N, F_p)
    edges: Tensor | None = None  # E, (N, N, F_e)

    @property
    def n_proposals(self) -> int:
        return self.nodes.shape[0]


@dataclass
class RelationHeadWeights:
    """Per-head query/key/value projections plus the shared edge projection."""

    wq: list[Tensor]  # H x (2*F_p, d_a)
    wk: list[Tensor]  # H x (2*F_r, d_a)
    wv: list[Tensor]  # H x (R, d_v)
    we: Tensor  # (H*d_v, F_e)

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    @property
    def edge_dim(self) -> int:
        return self.we.shape[1]

    def named_params(self, prefix: str = "relation") -> list[tuple[str, Tensor]]:
        out = []
        for h in range(self.n_heads):
            out.append((f"{prefix}.h{h}.wq", self.wq[h]))
            out.append((f"{prefix}.h{h}.wk", self.wk[h]))
            out.append((f"{prefix}.h{h}.wv", self.wv[h]))
        out.append((f"{prefix}.we", self.we))
        return out


def init_relation_weights(
    rng: SplitRng,
    proposal_dim: int,
    class_dim: int,
    prior_width: int,
    edge_dim: int,
    n_heads: int = 2,
    attn_dim: int | None = None,
    value_dim: int | None = None,
) -> RelationHeadWeights:
    if n_heads < 1:
        raise ContractError(f"n_heads must be >= 1, got {n_heads}")
    attn_dim = attn_dim or edge_dim
    value_dim = value_dim or edge_dim
    wq, wk, wv = [], [], []
    for h in range(n_heads):
        sub = rng.child(f"head{h}")
        wq.append(Tensor(xavier_uniform(sub.child("wq"), 2 * proposal_dim, attn_dim), requires_grad=True))
        wk.append(Tensor(xavier_uniform(sub.child("wk"), 2 * class_dim, attn_dim), requires_grad=True))
        wv.append(Tensor(xavier_uniform(sub.child("wv"), prior_width, value_dim), requires_grad=True))
    we = Tensor(xavier_uniform(rng.child("we"), n_heads * value_dim, edge_dim), requires_grad=True)
    return RelationHeadWeights(wq=wq, wk=wk, wv=wv, we=we)


def _pair_index(n: int) -> tuple[np.ndarray, np.ndarray]:
    ii = np.repeat(np.arange(n), n)
    jj = np.tile(np.arange(n), n)
    return ii, jj


def _class_pair_features(rpkg: RelationalPriorKnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
    d = rpkg.embeddings.data
    c = d.shape[0]
    uu, vv = _pair_index(c)
    dd = np.concatenate([d[uu], d[vv]], axis=1)  # (C^2, 2*F_r)
    kf = rpkg.priors.data.reshape(c * c, -1)  # (C^2, R)
    return dd, kf


def _validate(p: Tensor, rpkg: RelationalPriorKnowledgeGraph, weights: RelationHeadWeights) -> None:
    if rpkg.n_classes == 0:
        raise ContractError("prior graph has no classes")
    if p.ndim != 2 or p.shape[0] < 1:
        raise DimensionError(f"proposal features must be (N, F_p) with N >= 1, got {p.shape}")
    fp = p.shape[1]
    fr = rpkg.feature_dim
    r = rpkg.prior_width
    for h in range(weights.n_heads):
        if weights.wq[h].shape[0] != 2 * fp:
            raise DimensionError(
                f"head {h}: W_q expects pair width {weights.wq[h].shape[0]}, proposals give {2 * fp}"
            )
        if weights.wk[h].shape[0] != 2 * fr:
            raise DimensionError(
                f"head {h}: W_k expects pair width {weights.wk[h].shape[0]}, prior classes give {2 * fr}"
            )
        if weights.wv[h].shape[0] != r:
            raise DimensionError(
                f"head {h}: W_v expects prior width {weights.wv[h].shape[0]}, prior graph has R={r}"
            )
        if weights.wq[h].shape[1] != weights.wk[h].shape[1]:
            raise DimensionError(
                f"head {h}: W_q width {weights.wq[h].shape[1]} vs W_k width {weights.wk[h].shape[1]}"
            )


def predict_edges(p: Tensor, rpkg: RelationalPriorKnowledgeGraph, weights: RelationHeadWeights) -> Tensor:
    """Predict the (N, N, F_e) edge tensor for every ordered proposal pair."""
    _validate(p, rpkg, weights)
    n, fp = p.shape
    heads = weights.n_heads
    ii, jj = _pair_index(n)
    pp = np.concatenate([p.data[ii], p.data[jj]], axis=1)  # (N^2, 2*F_p)
    dd, kf = _class_pair_features(rpkg)

    qs, kks, vs, us = [], [], [], []
    for h in range(heads):
        q = pp @ weights.wq[h].data
        kk = dd @ weights.wk[h].data
        v = kf @ weights.wv[h].data
        scl = 1.0 / np.sqrt(q.shape[1])
        qs.append(q)
        kks.append(kk)
        vs.append(v)
        us.append(attn_forward(q, kk, v, scl))
    u = np.concatenate(us, axis=1)  # (N^2, H*d_v)
    e_flat = u @ weights.we.data
    fe = weights.edge_dim

    parents = (p, *weights.wq, *weights.wk, *weights.wv, weights.we)
    if not (is_grad_enabled() and any(t.requires_grad for t in parents)):
        return Tensor(e_flat.reshape(n, n, fe))

    def backward(g):
        g2 = g.reshape(n * n, fe)
        if weights.we.requires_grad:
            weights.we.accumulate_grad(u.T @ g2)
        du = g2 @ weights.we.data.T
        dv_width = us[0].shape[1]
        dpp = np.zeros_like(pp) if p.requires_grad else None
        for h in range(heads):
            duh = du[:, h * dv_width : (h + 1) * dv_width]
            scl = 1.0 / np.sqrt(qs[h].shape[1])
            dq, dkk, dvv = attn_backward(qs[h], kks[h], vs[h], np.ascontiguousarray(duh), scl)
            if weights.wv[h].requires_grad:
                weights.wv[h].accumulate_grad(kf.T @ dvv)
            if weights.wk[h].requires_grad:
                weights.wk[h].accumulate_grad(dd.T @ dkk)
            if weights.wq[h].requires_grad:
                weights.wq[h].accumulate_grad(pp.T @ dq)
            if dpp is not None:
                dpp += dq @ weights.wq[h].data.T
        if dpp is not None:
            dp = dpp[:, :fp].reshape(n, n, fp).sum(axis=1)
            dp += dpp[:, fp:].reshape(n, n, fp).sum(axis=0)
            p.accumulate_grad(dp)

    return _wire(e_flat.reshape(n, n, fe), parents, backward)


_ATTENTION_MAP_CAP = 50_000_000


def attention_maps(p: Tensor, rpkg: RelationalPriorKnowledgeGraph, weights: RelationHeadWeights) -> np.ndarray:
    """Materialized attention coefficients (H, N, N, C, C); diagnostic only."""
    _validate(p, rpkg, weights)
    n = p.shape[0]
    c = rpkg.n_classes
    if weights.n_heads * n * n * c * c > _ATTENTION_MAP_CAP:
        raise ContractError(
            f"attention_maps is restricted to desk-scale shapes; H*N^2*C^2 = "
            f"{weights.n_heads * n * n * c * c} exceeds {_ATTENTION_MAP_CAP}"
        )
    ii, jj = _pair_index(n)
    pp = np.concatenate([p.data[ii], p.data[jj]], axis=1)
    dd, _ = _class_pair_features(rpkg)
    maps = np.empty((weights.n_heads, n, n, c, c))
    for h in range(weights.n_heads):
        q = pp @ weights.wq[h].data
        kk = dd @ weights.wk[h].data
        t = (q @ kk.T) / np.sqrt(q.shape[1])
        t -= t.max(axis=1, keepdims=True)
        np.exp(t, out=t)
        t /= t.sum(axis=1, keepdims=True)
        maps[h] = t.reshape(n, n, c, c)
    return maps
