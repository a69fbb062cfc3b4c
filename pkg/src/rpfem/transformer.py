"""Graph-transformer context updates over the predicted edge tensor.

Each layer transforms edge features, scores them against the receiving node
per role (head = outgoing edges, tail = incoming edges), aggregates
softmax-weighted messages, and refines nodes through two residual LayerNorm
blocks.  Between layers the edge tensor is replaced by a learned pairwise
adjacency built from role-projected nodes scaled by role-normalized
coefficients; after the final layer the edge tensor is discarded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .relation import SceneGraph
from .rng import SplitRng, xavier_uniform
from .tensor import (
    Tensor,
    add,
    concat,
    gather_rows,
    layer_norm,
    leaky_relu,
    matmul,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_axis,
)

DEFAULT_SLOPE = 0.01


@dataclass
class AffineMap:
    w: Tensor
    b: Tensor

    def apply(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def _affine(rng: SplitRng, n_in: int, n_out: int) -> AffineMap:
    return AffineMap(
        w=Tensor(xavier_uniform(rng, n_in, n_out), requires_grad=True),
        b=Tensor(np.zeros(n_out), requires_grad=True),
    )


@dataclass
class AdjacencyParams:
    """Role projections and the shared adjacency scorer of one layer."""

    to_head: AffineMap  # F_z -> F_a/2
    to_tail: AffineMap  # F_z -> F_a/2
    scorer: AffineMap  # (edge_in + F_a/2) -> F_a/2

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        return (
            self.to_head.named_params(f"{prefix}.head")
            + self.to_tail.named_params(f"{prefix}.tail")
            + self.scorer.named_params(f"{prefix}.scorer")
        )


@dataclass
class ContextUpdateLayer:
    edge_transform: AffineMap  # edge_in -> F_z
    attn_scorer: AffineMap  # (F_z + F_z) -> 1
    ffn1: AffineMap  # F_z -> F_z
    ffn2: AffineMap  # F_z -> F_z
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    adjacency: AdjacencyParams | None
    edge_in_dim: int
    node_dim: int  # == F_z (the residual in the first LayerNorm requires it)
    adj_dim: int  # F_a, even

    @property
    def out_dim(self) -> int:
        return self.node_dim

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = self.edge_transform.named_params(f"{prefix}.edge")
        out += self.attn_scorer.named_params(f"{prefix}.attn")
        out += self.ffn1.named_params(f"{prefix}.ffn1")
        out += self.ffn2.named_params(f"{prefix}.ffn2")
        out += [
            (f"{prefix}.ln1.gain", self.ln1_gain),
            (f"{prefix}.ln1.bias", self.ln1_bias),
            (f"{prefix}.ln2.gain", self.ln2_gain),
            (f"{prefix}.ln2.bias", self.ln2_bias),
        ]
        if self.adjacency is not None:
            out += self.adjacency.named_params(f"{prefix}.adj")
        return out


@dataclass
class ContextState:
    """Node features after one update; adjacency present iff a layer follows."""

    z: Tensor  # (N, F_z)
    a: Tensor | None  # (N, N, F_a)
    layer_index: int


def init_context_layer(
    rng: SplitRng,
    edge_in_dim: int,
    node_dim: int,
    adj_dim: int,
    with_adjacency: bool,
) -> ContextUpdateLayer:
    if adj_dim % 2 != 0:
        raise ContractError(f"adjacency width must be even (two role halves), got {adj_dim}")
    half = adj_dim // 2
    adjacency = None
    if with_adjacency:
        adjacency = AdjacencyParams(
            to_head=_affine(rng.child("to_head"), node_dim, half),
            to_tail=_affine(rng.child("to_tail"), node_dim, half),
            scorer=_affine(rng.child("adj_scorer"), edge_in_dim + half, half),
        )
    return ContextUpdateLayer(
        edge_transform=_affine(rng.child("edge"), edge_in_dim, node_dim),
        attn_scorer=_affine(rng.child("attn"), 2 * node_dim, 1),
        ffn1=_affine(rng.child("ffn1"), node_dim, node_dim),
        ffn2=_affine(rng.child("ffn2"), node_dim, node_dim),
        ln1_gain=Tensor(np.ones(node_dim), requires_grad=True),
        ln1_bias=Tensor(np.zeros(node_dim), requires_grad=True),
        ln2_gain=Tensor(np.ones(node_dim), requires_grad=True),
        ln2_bias=Tensor(np.zeros(node_dim), requires_grad=True),
        adjacency=adjacency,
        edge_in_dim=edge_in_dim,
        node_dim=node_dim,
        adj_dim=adj_dim,
    )


def init_context_stack(
    rng: SplitRng,
    n_layers: int,
    edge_dim: int,
    node_dim: int,
    adj_dim: int | None = None,
) -> list[ContextUpdateLayer]:
    if n_layers < 1:
        raise ContractError(f"need at least one context layer, got {n_layers}")
    adj_dim = adj_dim if adj_dim is not None else node_dim
    layers = []
    for l in range(n_layers):
        layers.append(
            init_context_layer(
                rng.child(f"layer{l}"),
                edge_in_dim=edge_dim if l == 0 else adj_dim,
                node_dim=node_dim,
                adj_dim=adj_dim,
                with_adjacency=l < n_layers - 1,
            )
        )
    return layers


def _check_inputs(nodes: Tensor, edges: Tensor, layer: ContextUpdateLayer, layer_index: int) -> int:
    if nodes.ndim != 2 or edges.ndim != 3:
        raise DimensionError(f"nodes {nodes.shape} and edges {edges.shape} must be (N,F)/(N,N,F)")
    n = nodes.shape[0]
    if edges.shape[0] != n or edges.shape[1] != n:
        raise DimensionError(f"edges {edges.shape} do not cover {n} nodes")
    if nodes.shape[1] != layer.node_dim:
        raise DimensionError(f"nodes width {nodes.shape[1]} vs layer node width {layer.node_dim}")
    if edges.shape[2] != layer.edge_in_dim:
        raise DimensionError(
            f"edge width {edges.shape[2]} vs layer edge width {layer.edge_in_dim} "
            f"(layer {layer_index}: expects {'E' if layer_index == 0 else 'A'})"
        )
    if layer_index < 0:
        raise ContractError(f"layer index must be >= 0, got {layer_index}")
    return n


def _tile_cols(x: Tensor, width: int) -> Tensor:
    """Expand an (M, 1) column to (M, width) via matmul with constant ones."""
    return matmul(x, Tensor(np.ones((1, width))))


def _role_messages(
    f_flat: Tensor, nodes: Tensor, layer: ContextUpdateLayer, n: int, transposed: bool, trace: dict | None, tag: str
) -> Tensor:
    """Softmax-weighted message sum for one role; rows of f_flat are (i, j) pairs."""
    fz = layer.node_dim
    if transposed:
        perm = (np.arange(n * n).reshape(n, n).T).reshape(-1)
        f_role = gather_rows(f_flat, perm)  # row (i, j) now holds f_{ji}
    else:
        f_role = f_flat
    n_rep = gather_rows(nodes, np.repeat(np.arange(n), n))
    scores = leaky_relu(layer.attn_scorer.apply(concat([f_role, n_rep], axis=1)), DEFAULT_SLOPE)
    alpha = softmax(reshape(scores, (n, n)), axis=1)
    if trace is not None:
        trace[f"alpha_{tag}"] = alpha.data.copy()
    weighted = mul(_tile_cols(reshape(alpha, (n * n, 1)), fz), f_role)
    return sum_axis(reshape(weighted, (n, n, fz)), axis=1)


def context_update(
    nodes: Tensor, edges: Tensor, layer: ContextUpdateLayer, layer_index: int, trace: dict | None = None
) -> ContextState:
    """One message-passing refinement of the node features."""
    n = _check_inputs(nodes, edges, layer, layer_index)
    fz = layer.node_dim
    f_flat = layer.edge_transform.apply(reshape(edges, (n * n, layer.edge_in_dim)))
    m_head = _role_messages(f_flat, nodes, layer, n, transposed=False, trace=trace, tag="head")
    m_tail = _role_messages(f_flat, nodes, layer, n, transposed=True, trace=trace, tag="tail")
    pre1 = add(add(nodes, m_head), m_tail)
    if trace is not None:
        trace["ln1_input"] = pre1.data.copy()
    zhat = layer_norm(pre1, layer.ln1_gain, layer.ln1_bias)
    hidden = leaky_relu(layer.ffn1.apply(zhat), DEFAULT_SLOPE)
    refined = leaky_relu(layer.ffn2.apply(hidden), DEFAULT_SLOPE)
    pre2 = add(zhat, refined)
    if trace is not None:
        trace["ln2_input"] = pre2.data.copy()
    z = layer_norm(pre2, layer.ln2_gain, layer.ln2_bias)
    return ContextState(z=z, a=None, layer_index=layer_index)


def update_adjacency(
    nodes: Tensor, edges: Tensor, layer: ContextUpdateLayer, layer_index: int, trace: dict | None = None
) -> Tensor:
    """Evolve the pairwise edge tensor from role-projected nodes (consumed by
    the next layer in place of the prior-derived edges)."""
    n = _check_inputs(nodes, edges, layer, layer_index)
    if layer.adjacency is None:
        raise ContractError(f"layer {layer_index} carries no adjacency transforms (final layer)")
    adj = layer.adjacency
    half = layer.adj_dim // 2
    h_head = adj.to_head.apply(nodes)  # (N, half)
    h_tail = adj.to_tail.apply(nodes)
    flat = reshape(edges, (n * n, layer.edge_in_dim))
    row_mean = scale(sum_axis(reshape(flat, (n, n, layer.edge_in_dim)), axis=1), 1.0 / n)
    col_mean = scale(sum_axis(reshape(flat, (n, n, layer.edge_in_dim)), axis=0), 1.0 / n)
    logit_head = leaky_relu(adj.scorer.apply(concat([row_mean, h_head], axis=1)), DEFAULT_SLOPE)
    logit_tail = leaky_relu(adj.scorer.apply(concat([col_mean, h_tail], axis=1)), DEFAULT_SLOPE)
    # two-way softmax over the stacked role axis, per node and feature position
    c_head = sigmoid(sub(logit_head, logit_tail))
    c_tail = sigmoid(sub(logit_tail, logit_head))
    if trace is not None:
        trace["role_coeff_head"] = c_head.data.copy()
        trace["role_coeff_tail"] = c_tail.data.copy()
    g_head = mul(c_head, h_head)
    g_tail = mul(c_tail, h_tail)
    ii = np.repeat(np.arange(n), n)
    jj = np.tile(np.arange(n), n)
    a_flat = concat([gather_rows(g_head, ii), gather_rows(g_tail, jj)], axis=1)
    return reshape(a_flat, (n, n, 2 * half))


def run_stack(scene: SceneGraph, layers: list[ContextUpdateLayer], trace: dict | None = None) -> Tensor:
    """Iterate context updates; adjacency is evolved only while a layer follows,
    and only the final node features survive."""
    if not layers:
        raise ContractError("run_stack needs at least one layer")
    if scene.edges is None:
        raise ContractError("scene graph has no predicted edges")
    nodes = scene.nodes
    edges = scene.edges
    for l, layer in enumerate(layers):
        layer_trace = None
        if trace is not None:
            layer_trace = {}
            trace[f"layer{l}"] = layer_trace
        state = context_update(nodes, edges, layer, l, trace=layer_trace)
        if l < len(layers) - 1:
            state.a = update_adjacency(nodes, edges, layer, l, trace=layer_trace)
            edges = state.a
        nodes = state.z
    return nodes
