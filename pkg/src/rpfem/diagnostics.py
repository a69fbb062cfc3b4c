"""Finite-difference gradient audit across every op and composed stack.

Each check builds a small random instance, runs the tape backward, and
compares against central differences; the numeric side only re-evaluates
forward passes, so it stays independent of every backward rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .relation import SceneGraph, init_relation_weights, predict_edges
from .rng import SplitRng
from .rpkg.graph import RelationalPriorKnowledgeGraph
from .tensor import (
    Tensor,
    add,
    concat,
    gather_rows,
    grad_check,
    layer_norm,
    leaky_relu,
    log_softmax,
    matmul,
    mul,
    sigmoid,
    softmax,
    sum_all,
    sum_axis,
)
from .toy import ModelDims, cross_entropy, default_context_spec, generate_scene, init_enhanced_head
from .transformer import init_context_stack, run_stack

SIZE_PRESETS = {
    "small": {"n": 3, "c": 2, "f": 4, "heads": 2, "layers": 2},
    "medium": {"n": 4, "c": 3, "f": 6, "heads": 2, "layers": 2},
}


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def _rand(rng: SplitRng, shape) -> Tensor:
    return Tensor(rng.normal(shape))


def _square(x: Tensor) -> Tensor:
    return sum_all(mul(x, x))


def _toy_rpkg(rng: SplitRng, c: int, f: int) -> RelationalPriorKnowledgeGraph:
    return RelationalPriorKnowledgeGraph(
        classes=[f"class_{i}" for i in range(c)],
        embeddings=_rand(rng.child("D"), (c, f)),
        relations=("distance",),
        priors=Tensor(np.abs(rng.child("K").normal((c, c, 2)))),
    )


def run_gradcheck_suite(seed: int, sizes: str = "small", tol: float = 1e-4, step: float = 1e-5) -> list[CheckResult]:
    if sizes not in SIZE_PRESETS:
        raise ConfigError(f"unknown size preset {sizes!r}; choose from {sorted(SIZE_PRESETS)}")
    dims = SIZE_PRESETS[sizes]
    n, c, f, heads, n_layers = dims["n"], dims["c"], dims["f"], dims["heads"], dims["layers"]
    rng = SplitRng(seed)
    results: list[CheckResult] = []

    def check(name, fn, inputs, tol_=tol):
        report = grad_check(fn, inputs, step=step, tol=tol_)
        results.append(CheckResult(name=name, max_rel_err=report.max_rel_err, tol=tol_))

    check("add", lambda a, b: _square(add(a, b)), [_rand(rng.child("add0"), (n, f)), _rand(rng.child("add1"), (n, f))])
    check("mul", lambda a, b: _square(mul(a, b)), [_rand(rng.child("mul0"), (n, f)), _rand(rng.child("mul1"), (n, f))])
    check(
        "matmul",
        lambda a, b: _square(matmul(a, b)),
        [_rand(rng.child("mm0"), (3, 4)), _rand(rng.child("mm1"), (4, 2))],
    )
    check("softmax", lambda a: _square(softmax(a, 1)), [_rand(rng.child("sm"), (n, f))])
    check("log_softmax", lambda a: _square(log_softmax(a, 1)), [_rand(rng.child("lsm"), (n, f))])
    check("sigmoid", lambda a: _square(sigmoid(a)), [_rand(rng.child("sg"), (n, f))])
    check("leaky_relu", lambda a: _square(leaky_relu(a, 0.01)), [_rand(rng.child("lr"), (n, f))])
    check(
        "layer_norm",
        lambda a, g, b: _square(layer_norm(a, g, b)),
        [
            _rand(rng.child("ln0"), (n, f)),
            _rand(rng.child("ln1"), (f,)),
            _rand(rng.child("ln2"), (f,)),
        ],
    )
    check(
        "concat",
        lambda a, b: _square(concat([a, b], axis=1)),
        [_rand(rng.child("cc0"), (n, f)), _rand(rng.child("cc1"), (n, 2))],
    )
    idx = SplitRng(seed).child("gidx").integers(0, n, 2 * n)
    check("gather_rows", lambda a: _square(gather_rows(a, idx)), [_rand(rng.child("gr"), (n, f))])
    check("sum_axis", lambda a: _square(sum_axis(a, 1)), [_rand(rng.child("sa"), (n, n, f))])

    rpkg = _toy_rpkg(rng.child("rpkg"), c, f)
    weights = init_relation_weights(rng.child("rel"), f, f, rpkg.prior_width, f, n_heads=heads)
    p = _rand(rng.child("P"), (n, f))
    rel_inputs = [p] + [t for _, t in weights.named_params()]
    check(
        "relation_head",
        lambda *ts: _square(predict_edges(ts[0], rpkg, weights)),
        rel_inputs,
    )

    layers = init_context_stack(rng.child("ctx"), n_layers, edge_dim=f, node_dim=f, adj_dim=f)
    stack_params = [t for i, layer in enumerate(layers) for _, t in layer.named_params(f"l{i}")]

    def stack_loss(*ts):
        edges = predict_edges(ts[0], rpkg, weights)
        return _square(run_stack(SceneGraph(ts[0], edges), layers))

    check("context_stack", stack_loss, [p] + [t for _, t in weights.named_params()] + stack_params)

    spec = default_context_spec(n_classes=4, feature_dim=f, proposals_per_scene=n, noise_scale=0.3)
    scene = generate_scene(spec, seed)
    toy_rpkg = _toy_rpkg(rng.child("toyrpkg"), spec.n_classes, f)
    head = init_enhanced_head(
        rng.child("head"), ModelDims.square(f), toy_rpkg, n_heads=heads, n_layers=1, n_out=spec.n_classes + 1
    )

    def toy_loss(*ts):
        return cross_entropy(head.forward(Tensor(scene.features), toy_rpkg), scene.labels)

    check("toy_forward", toy_loss, [t for _, t in head.named_params()])
    return results
