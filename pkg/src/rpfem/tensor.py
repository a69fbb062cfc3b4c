"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor is a row-major float64 ndarray plus an optional gradient buffer
and a backward closure wired to its parents.  ``backward()`` replays the
recorded graph once, in reverse topological order.  Broadcasting is limited
to a trailing-shape operand over leading batch axes; anything else needs an
explicit reshape so every adjoint stays auditable.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

_state = threading.local()  # per-thread, so parallel evaluations stay independent


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (evaluation paths)."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape).copy()
        for node in reversed(_topo_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; the module-level functions are the canonical API
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative postorder over the recorded graph (deep chains are fine)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _wire(out_data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _trailing_broadcast(a: Tensor, b: Tensor) -> bool:
    """True when b's shape matches a's trailing axes (leading-batch broadcast)."""
    return a.ndim > b.ndim and a.shape[a.ndim - b.ndim :] == b.shape


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g)

        return _wire(a.data + b.data, (a, b), backward)
    if _trailing_broadcast(a, b):
        lead = tuple(range(a.ndim - b.ndim))

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g)
            if b.requires_grad:
                b.accumulate_grad(g.sum(axis=lead))

        return _wire(a.data + b.data, (a, b), backward)
    raise DimensionError(f"add shapes {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _wire(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes {a.shape} vs {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _wire(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _wire(a.data * c, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _wire(a.data @ b.data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.T)

    return _wire(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _wire(a.data.reshape(shape).copy(), (a,), backward)


def concat(xs: list[Tensor], axis: int) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty list")
    ndim = xs[0].ndim
    for x in xs[1:]:
        if x.ndim != ndim:
            raise DimensionError(f"concat ranks differ: {[x.shape for x in xs]}")
        for ax in range(ndim):
            if ax != axis % ndim and x.shape[ax] != xs[0].shape[ax]:
                raise DimensionError(f"concat shapes incompatible off axis {axis}: {[x.shape for x in xs]}")
    axis = axis % ndim
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                idx = [slice(None)] * ndim
                idx[axis] = slice(lo, hi)
                x.accumulate_grad(g[tuple(idx)])

    return _wire(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows along axis 0; the adjoint scatter-adds them back."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows needs a 1-D index, got shape {idx.shape}")
    if a.ndim < 1:
        raise DimensionError("gather_rows needs at least one axis")

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a.accumulate_grad(acc)

    return _wire(a.data[idx].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _wire(np.asarray(a.data.sum()), (a,), backward)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _wire(a.data.sum(axis=axis), (a,), backward)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis % a.ndim]
    return scale(sum_axis(a, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def softmax(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - inner))

    return _wire(y, (a,), backward)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _wire(y, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * y * (1.0 - y))

    return _wire(y, (a,), backward)


def _leaky_relu_grad(g: np.ndarray, x: np.ndarray, slope: float) -> np.ndarray:
    return g * np.where(x >= 0, 1.0, slope)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    if slope <= 0:
        raise ContractError(f"leaky_relu slope must be > 0, got {slope}")
    x = a.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_leaky_relu_grad(g, x, slope))

    return _wire(np.where(x >= 0, x, slope * x), (a,), backward)


DEFAULT_LN_EPS = 1e-10


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = DEFAULT_LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the learned affine map."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    feat = a.shape[-1]
    if gain.shape != (feat,) or bias.shape != (feat,):
        raise DimensionError(
            f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match feature width {feat}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, feat).sum(axis=0))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, feat).sum(axis=0))
        if a.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (gh - m1 - xhat * m2))

    return _wire(y, (a, gain, bias), backward)


def normalized(x: np.ndarray, eps: float = DEFAULT_LN_EPS) -> np.ndarray:
    """The pre-affine part of layer_norm, for diagnostics and tests."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list[float]
    tol: float
    step: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err <= self.tol


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-3)


def grad_check(f, inputs: list[Tensor], step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of a scalar-valued f against central differences.

    f receives the input tensors and must return a scalar tensor; the
    numeric side re-evaluates f at x ± step per element, so it is an oracle
    independent of every backward rule.
    """
    if not 0 < step <= 1e-3:
        raise ContractError(f"grad_check step must be in (0, 1e-3], got {step}")
    for x in inputs:
        x.grad = None
        x.requires_grad = True
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    per_input = []
    for x, ana in zip(inputs, analytic):
        worst = 0.0
        flat = x.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            with no_grad():
                hi = float(f(*inputs).data)
            flat[k] = orig - step
            with no_grad():
                lo = float(f(*inputs).data)
            flat[k] = orig
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, _rel_err(float(ana.reshape(-1)[k]), numeric))
        per_input.append(worst)
    worst_all = max(per_input) if per_input else 0.0
    return GradCheckReport(max_rel_err=worst_all, per_input=per_input, tol=tol, step=step)
