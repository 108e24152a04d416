"""Reverse-mode automatic differentiation over dense float64 matrices.

Small by design: just the dense linear maps, activations, softmax, dropout,
losses and optimizers needed to train an attention-pooled bag model, with
gradients that can be verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class AutogradError(Exception):
    """Raised on misuse of the autograd graph (bad shapes, missing passes)."""


class OptimizerError(AutogradError):
    """Raised when an optimizer step is attempted without fresh gradients."""


def _as_matrix(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise AutogradError(f"tensors are 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A 2-D float64 array node in a dynamically recorded computation graph.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients in
    ``.grad`` when ``backward()`` is called on a downstream scalar. ``.grad``
    is ``None`` until a backward pass populates it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward_fn=None, _op="leaf"):
        self.data = _as_matrix(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward_fn = _backward_fn
        self._op = _op

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r})"

    def item(self) -> float:
        if self.data.size != 1:
            raise AutogradError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.shape != (1, 1):
            raise AutogradError(f"backward() starts from a scalar, got shape {self.shape}")
        if not self._parents:
            raise AutogradError("backward() called on a tensor with no recorded computation")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones((1, 1))}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and not node._parents:
                node._accumulate(g)
            if node._backward_fn is not None:
                for parent, pg in node._backward_fn(g):
                    if id(parent) in grads:
                        grads[id(parent)] += pg
                    else:
                        grads[id(parent)] = pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    return Tensor(data, _parents=parents, _backward_fn=backward_fn, _op=op)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise AutogradError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward_fn(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _node(a.data @ b.data, (a, b), backward_fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; a (1, n) right operand broadcasts over rows (bias add)."""
    if a.shape == b.shape:
        def backward_fn(g):
            return ((a, g), (b, g))
    elif b.shape == (1, a.shape[1]):
        def backward_fn(g):
            return ((a, g), (b, g.sum(axis=0, keepdims=True)))
    else:
        raise AutogradError(f"add shape mismatch: {a.shape} + {b.shape}")
    return _node(a.data + b.data, (a, b), backward_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutogradError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def backward_fn(g):
        return ((a, g), (b, -g))

    return _node(a.data - b.data, (a, b), backward_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutogradError(f"mul shape mismatch: {a.shape} * {b.shape}")

    def backward_fn(g):
        return ((a, g * b.data), (b, g * a.data))

    return _node(a.data * b.data, (a, b), backward_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return ((a, g * c),)

    return _node(a.data * c, (a,), backward_fn, "scale")


def add_scalar(a: Tensor, c: float) -> Tensor:
    def backward_fn(g):
        return ((a, g),)

    return _node(a.data + float(c), (a,), backward_fn, "add_scalar")


def transpose(a: Tensor) -> Tensor:
    def backward_fn(g):
        return ((a, g.T),)

    return _node(a.data.T.copy(), (a,), backward_fn, "transpose")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward_fn(g):
        return ((a, g * (1.0 - out * out)),)

    return _node(out, (a,), backward_fn, "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward_fn(g):
        return ((a, g * mask),)

    return _node(np.where(mask, a.data, 0.0), (a,), backward_fn, "relu")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for numerical stability."""
    if a.data.size == 0:
        raise AutogradError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((a, out * (g - dot)),)

    return _node(out, (a,), backward_fn, "softmax")


def softmax(v) -> np.ndarray:
    """Softmax of a plain 1-D vector (no gradient tracking)."""
    arr = np.asarray(v, dtype=np.float64).ravel()
    if arr.size == 0:
        raise AutogradError("softmax of an empty vector")
    if not np.all(np.isfinite(arr)):
        raise AutogradError("softmax input must be finite")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity (and no RNG draw) when not training or rate 0."""
    if not 0.0 <= rate < 1.0:
        raise AutogradError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep) / keep

    def backward_fn(g):
        return ((a, g * mask),)

    return _node(a.data * mask, (a,), backward_fn, "dropout")


def sum_all(a: Tensor) -> Tensor:
    def backward_fn(g):
        return ((a, np.full(a.shape, g[0, 0])),)

    return _node(np.array([[a.data.sum()]]), (a,), backward_fn, "sum")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows: (n, d) -> (1, d)."""
    n = a.shape[0]

    def backward_fn(g):
        return ((a, np.repeat(g, n, axis=0) / n),)

    return _node(a.data.mean(axis=0, keepdims=True), (a,), backward_fn, "mean_rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack row blocks vertically, routing gradients back to each block."""
    if not parts:
        raise AutogradError("concat_rows of an empty sequence")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise AutogradError(f"concat_rows column mismatch: {p.shape[1]} vs {cols}")
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward_fn(g):
        return tuple((p, g[offsets[i]:offsets[i + 1]]) for i, p in enumerate(parts))

    return _node(np.vstack([p.data for p in parts]), tuple(parts), backward_fn, "concat_rows")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w + b with b broadcast over rows."""
    if x.shape[1] != w.shape[0]:
        raise AutogradError(f"linear shape mismatch: input {x.shape} vs weight {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise AutogradError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    return add(matmul(x, w), b)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error against a constant target of the same shape."""
    t = _as_matrix(target)
    if pred.shape != t.shape:
        raise AutogradError(f"mse_loss shape mismatch: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size

    def backward_fn(g):
        return ((pred, g[0, 0] * 2.0 * diff / n),)

    return _node(np.array([[np.mean(diff * diff)]]), (pred,), backward_fn, "mse")


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class per row."""
    lab = np.asarray(labels, dtype=np.int64).ravel()
    n, c = logits.shape
    if lab.size != n:
        raise AutogradError(f"cross_entropy label count {lab.size} != rows {n}")
    if lab.size and (lab.min() < 0 or lab.max() >= c):
        raise AutogradError(f"cross_entropy label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), lab]))
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def backward_fn(g):
        grad = probs.copy()
        grad[np.arange(n), lab] -= 1.0
        return ((logits, g[0, 0] * grad / n),)

    return _node(np.array([[loss]]), (logits,), backward_fn, "cross_entropy")


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise AutogradError(f"non-finite values in {what}")


@dataclass
class OptimizerConfig:
    """Optimizer selection and hyperparameters shared by every training run."""

    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise AutogradError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise AutogradError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise AutogradError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


class ParameterStore:
    """Named trainable tensors plus their gradient buffers and step counter."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step_count = 0

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise AutogradError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def has_gradients(self) -> bool:
        return any(t.grad is not None for t in self._params.values())

    def coordinate_count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self._params:
                raise AutogradError(f"unknown parameter {name!r} in state")
            if self._params[name].data.shape != arr.shape:
                raise AutogradError(f"shape mismatch loading {name!r}")
            self._params[name].data = np.asarray(arr, dtype=np.float64).copy()


class Optimizer:
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg

    def step(self, store: ParameterStore) -> None:
        if not store.has_gradients():
            raise OptimizerError("optimizer step before any backward pass populated gradients")
        store.step_count += 1
        self._apply(store)

    def _apply(self, store: ParameterStore) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _apply(self, store: ParameterStore) -> None:
        lr = self.cfg.learning_rate
        for _, t in store.items():
            if t.grad is not None:
                t.data -= lr * t.grad


class Adam(Optimizer):
    """Adam with standard bias-corrected first and second moments."""

    def __init__(self, cfg: OptimizerConfig):
        super().__init__(cfg)
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def _apply(self, store: ParameterStore) -> None:
        cfg = self.cfg
        self._t += 1
        b1t = 1.0 - cfg.beta1 ** self._t
        b2t = 1.0 - cfg.beta2 ** self._t
        for name, t in store.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self._m.setdefault(name, np.zeros_like(t.data))
            v = self._v.setdefault(name, np.zeros_like(t.data))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            t.data -= cfg.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + cfg.epsilon)


def make_optimizer(cfg: OptimizerConfig) -> Optimizer:
    return Adam(cfg) if cfg.kind == "adam" else SGD(cfg)


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central finite differences."""

    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, int]
    coords_checked: int
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = self.max_rel_err < self.tolerance


def grad_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    tolerance: float = 1e-5,
    h: float = 1e-6,
    max_coords: int = 10_000,
    seed: int = 0,
) -> GradCheckReport:
    """Check every parameter coordinate of ``loss_fn`` against central differences.

    ``loss_fn`` must be a deterministic function of the store's parameters
    (dropout disabled). Above ``max_coords`` total coordinates a seeded
    uniform subsample is checked instead. The relative error per coordinate
    is |ad - fd| / max(1, |ad|, |fd|) so that near-zero gradients are judged
    on absolute error.
    """
    store.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in store.items()}

    coords: list[tuple[str, int]] = []
    for name, t in store.items():
        coords.extend((name, i) for i in range(t.data.size))
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(idx)]

    max_rel = 0.0
    worst = (store.names()[0], (0, 0))
    for name, flat in coords:
        t = store[name]
        ij = np.unravel_index(flat, t.data.shape)
        orig = t.data[ij]
        t.data[ij] = orig + h
        up = loss_fn().item()
        t.data[ij] = orig - h
        down = loss_fn().item()
        t.data[ij] = orig
        fd = (up - down) / (2.0 * h)
        ad = analytic[name][ij]
        rel = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
        if rel > max_rel:
            max_rel = rel
            worst = (name, (int(ij[0]), int(ij[1])))
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_param=worst[0],
        worst_index=worst[1],
        coords_checked=len(coords),
        tolerance=tolerance,
    )
