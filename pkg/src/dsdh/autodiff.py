"""A small reverse-mode differentiation engine over numpy arrays.

Only the primitives the detection heads need are provided: broadcasting
arithmetic, slicing and concatenation, dense layers, a 3x3 patch extractor for
optional convolution, ReLU, and the two loss terms.  Each primitive records a
closure that maps the upstream gradient to gradients of its parents.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import InvalidInputError, NonFiniteLossError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    previous = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional array that can accumulate a gradient.

    ``grad`` is ``None`` until a backward pass reaches the tensor, and only
    tensors with ``requires_grad`` (or built from such tensors while recording
    is enabled) take part in the graph.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Iterable[np.ndarray | None]] | None = None

    @classmethod
    def _make(cls, data, parents, backward) -> "Tensor":
        out = cls(data)
        tracked = tuple(p for p in parents if isinstance(p, Tensor))
        if _grad_enabled() and any(p.requires_grad for p in tracked):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise InvalidInputError("backward() without a gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if isinstance(parent, Tensor) and parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other_data = other.data if isinstance(other, Tensor) else other
        a_shape = self.shape
        b_shape = np.shape(other_data)
        return Tensor._make(
            self.data + other_data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        a = self.data
        b = other.data if isinstance(other, Tensor) else np.asarray(other)
        return Tensor._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other))

    def reciprocal(self):
        inv = 1.0 / self.data
        return Tensor._make(inv, (self,), lambda g: (-g * inv * inv,))

    def __matmul__(self, other):
        a, b = self.data, other.data
        return Tensor._make(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,))

    def clamp_max(self, bound: float):
        x = self.data
        mask = x <= bound
        return Tensor._make(np.minimum(x, bound), (self,), lambda g: (g * mask,))

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        old = self.shape
        return Tensor._make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def __getitem__(self, index):
        shape, dtype = self.shape, self.data.dtype

        def backward(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), backward)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the gradient passes only where ``x > 0``."""
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


# dense layers ---------------------------------------------------------------


@dataclass
class DenseLayer:
    weight: Tensor  # (out, in)
    bias: Tensor  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidInputError(
                f"weight {self.weight.shape} and bias {self.bias.shape} widths disagree"
            )

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def initialize(cls, in_width: int, out_width: int, rng: np.random.Generator, dtype=np.float64) -> "DenseLayer":
        """Centered uniform weights with bound ``1/sqrt(in_width)``, zero biases."""
        bound = 1.0 / math.sqrt(in_width)
        weight = rng.uniform(-bound, bound, size=(out_width, in_width)).astype(dtype)
        return cls(Tensor(weight, requires_grad=True), Tensor(np.zeros(out_width, dtype=dtype), requires_grad=True))

    @classmethod
    def zeros(cls, in_width: int, out_width: int, dtype=np.float64) -> "DenseLayer":
        return cls(
            Tensor(np.zeros((out_width, in_width), dtype=dtype), requires_grad=True),
            Tensor(np.zeros(out_width, dtype=dtype), requires_grad=True),
        )

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}weight": self.weight, f"{prefix}bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x) -> Tensor:
    """``y = x @ W.T + b`` for ``x`` of shape ``(N, in)``."""
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != layer.in_width:
        raise InvalidInputError(f"input of shape {x.shape} does not fit a layer of in-width {layer.in_width}")
    xd, w = x.data, layer.weight.data
    out = xd @ w.T + layer.bias.data
    return Tensor._make(out, (x, layer.weight, layer.bias), lambda g: (g @ w, g.T @ xd, g.sum(axis=0)))


def im2col3x3(x) -> Tensor:
    """Zero-padded 3x3 neighbourhoods of an ``(N, H, W, C)`` grid, as ``(N, H, W, 9C)``."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    offsets = [(i, j) for i in range(3) for j in range(3)]
    out = np.concatenate([padded[:, i : i + h, j : j + w, :] for i, j in offsets], axis=-1)

    def backward(g):
        gp = np.zeros_like(padded)
        for k, (i, j) in enumerate(offsets):
            gp[:, i : i + h, j : j + w, :] += g[..., k * c : (k + 1) * c]
        return (gp[:, 1:-1, 1:-1, :],)

    return Tensor._make(out, (x,), backward)


# losses -----------------------------------------------------------------------


def smooth_l1(prediction, target) -> Tensor:
    """Mean Huber loss with transition at 1: ``0.5 d^2`` inside, ``|d| - 0.5`` outside."""
    prediction = as_tensor(prediction)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=prediction.data.dtype)
    if prediction.shape != target_data.shape:
        raise InvalidInputError(f"prediction {prediction.shape} and target {target_data.shape} differ in shape")
    if prediction.data.size == 0:
        return Tensor(np.zeros((), dtype=prediction.data.dtype))
    d = prediction.data - target_data
    small = np.abs(d) < 1.0
    value = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).mean()
    n = d.size

    def backward(g):
        gd = g * np.where(small, d, np.sign(d)) / n
        return (gd, -gd)

    return Tensor._make(np.asarray(value), (prediction, target), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-probability of ``labels`` under a row softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError(f"logits {logits.shape} and labels {labels.shape} are incompatible")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidInputError(f"labels must lie in [0, {logits.shape[1] - 1}]")
    n = logits.shape[0]
    if n == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype))
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    value = -log_p[rows, labels].mean()

    def backward(g):
        grad = np.exp(log_p)
        grad[rows, labels] -= 1.0
        return (g * grad / n,)

    return Tensor._make(np.asarray(value), (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# optimization -------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Heavy-ball momentum state: ``v <- m v + g``, ``p <- p - lr v``."""

    learning_rate: float = 2e-3
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidInputError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidInputError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """Update ``params`` in place; parameters without a gradient are skipped."""
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != param.shape:
            raise InvalidInputError(f"gradient for {name!r} has shape {g.shape}, parameter has {param.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = g.astype(param.data.dtype, copy=True)
        else:
            v *= state.momentum
            v += g
        param.data -= state.learning_rate * v


def collect_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# verification -------------------------------------------------------------------


@dataclass
class GradientCheckReport:
    errors: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __bool__(self) -> bool:
        return bool(self.errors)


def gradient_check(model, inputs, loss_fn, epsilon: float = 1e-5, floor: float = 1e-8) -> GradientCheckReport:
    """Compare backprop gradients of ``loss_fn(model, inputs)`` with central differences.

    ``model.parameters()`` must return a name-to-Tensor mapping.  The error for
    each parameter tensor is ``|a - n| / max(|a|, |n|, floor)`` in the Euclidean
    norm, where ``a`` is the analytic and ``n`` the numerical gradient.
    """
    if not 0 < epsilon <= 1e-2:
        raise InvalidInputError(f"epsilon must lie in (0, 1e-2], got {epsilon}")
    params = dict(model.parameters())
    if not params:
        return GradientCheckReport({})
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            raise InvalidInputError(f"parameter {name!r} is not finite")

    zero_grads(params)
    loss = loss_fn(model, inputs)
    if not math.isfinite(loss.item()):
        raise NonFiniteLossError(f"loss is {loss.item()}")
    loss.backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    def evaluate() -> float:
        with no_grad():
            value = loss_fn(model, inputs).item()
        if not math.isfinite(value):
            raise NonFiniteLossError(f"loss became {value} under perturbation")
        return value

    errors = {}
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        flat, num_flat = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            up = evaluate()
            flat[i] = original - epsilon
            down = evaluate()
            flat[i] = original
            num_flat[i] = (up - down) / (2 * epsilon)
        a = analytic[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        errors[name] = float(np.linalg.norm(a - numeric) / scale)
    zero_grads(params)
    return GradientCheckReport(errors)
