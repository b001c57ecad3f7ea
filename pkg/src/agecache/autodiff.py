"""Dense float64 tensors with reverse-mode autodiff, Adam, and checkpoints.

Deliberately small: only the operations the popularity model needs. Data
lives in numpy arrays; each op attaches a gradient closure to its output,
and ``Tensor.backward`` replays the closures in reverse topological order.
Everything runs in float64 so finite-difference checks stay stable.
"""

from __future__ import annotations

import json
import math
import os
import tempfile

import numpy as np


class AutodiffError(Exception):
    """Base class for all tensor-engine failures."""


class ShapeMismatchError(AutodiffError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonScalarRootError(AutodiffError):
    def __init__(self, shape):
        super().__init__(f"backward() requires a scalar root, got shape {tuple(shape)}")


class MissingGradientError(AutodiffError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__("missing gradients for parameters: " + ", ".join(self.names))


class AllMaskedError(AutodiffError):
    """A softmax row (or an aggregation target) has no unmasked entries."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode AD needs."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    _grad_enabled = True

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # ---- basics ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._non_scalar()

    def _non_scalar(self):
        raise ShapeMismatchError("item", self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable node that requires it."""
        if self.data.size != 1:
            raise NonScalarRootError(self.shape)
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # ---- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def mT(self) -> "Tensor":
        return transpose_last(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def cos(self):
        return cos(self)

    def log(self):
        return log(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def select_rows(self, index):
        return select_rows(self, index)

    def mask(self, keep):
        return mask(self, keep)

    def masked_softmax(self, keep):
        return masked_softmax(self, keep)


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        self._prev = Tensor._grad_enabled
        Tensor._grad_enabled = False
        return self

    def __exit__(self, *exc):
        Tensor._grad_enabled = self._prev
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _result(data: np.ndarray, parents: tuple, backward_factory) -> Tensor:
    """Build an op output; attach the closure only when gradients are live."""
    track = Tensor._grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward_factory(out)
    return out


# ---- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError("add", a.shape, b.shape) from None

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad, b.data.shape))
        return _bw

    return _result(data, (a, b), factory)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(-out.grad)
        return _bw

    return _result(-a.data, (a,), factory)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError("mul", a.shape, b.shape) from None

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(out.grad * a.data, b.data.shape))
        return _bw

    return _result(data, (a, b), factory)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from None

    def factory(out):
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))
        return _bw

    return _result(data, (a, b), factory)


def transpose_last(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatchError("transpose", a.shape)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(np.swapaxes(out.grad, -1, -2))
        return _bw

    return _result(np.swapaxes(a.data, -1, -2), (a,), factory)


# ---- activations ------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum((a.data > 0) * out.grad)
        return _bw

    return _result(np.maximum(a.data, 0.0), (a,), factory)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum((1.0 - out.data ** 2) * out.grad)
        return _bw

    return _result(data, (a,), factory)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = _stable_sigmoid(a.data)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(out.data * (1.0 - out.data) * out.grad)
        return _bw

    return _result(data, (a,), factory)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(-np.sin(a.data) * out.grad)
        return _bw

    return _result(np.cos(a.data), (a,), factory)


def log(a) -> Tensor:
    a = as_tensor(a)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(out.grad / a.data)
        return _bw

    return _result(np.log(a.data), (a,), factory)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was in range."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(inside * out.grad)
        return _bw

    return _result(np.clip(a.data, lo, hi), (a,), factory)


# ---- reductions, shaping, gathering -----------------------------------------


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def factory(out):
        def _bw():
            if not a.requires_grad:
                return
            g = out.grad
            if axis is not None and not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                for ax in sorted(ax % a.ndim for ax in axes):
                    g = np.expand_dims(g, ax)
            a._accum(np.broadcast_to(g, a.data.shape))
        return _bw

    return _result(data, (a,), factory)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax % a.ndim] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    s = tensor_sum(a, axis=axis, keepdims=keepdims)
    return mul(s, 1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, shape) from None

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(out.grad.reshape(a.data.shape))
        return _bw

    return _result(data, (a,), factory)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *[p.shape for p in parts]) from None
    widths = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def factory(out):
        def _bw():
            g = out.grad
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, stop)
                    p._accum(g[tuple(sl)])
        return _bw

    return _result(data, tuple(parts), factory)


def select_rows(a, index) -> Tensor:
    """Gather rows along axis 0; duplicate indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    data = a.data[idx]

    def factory(out):
        def _bw():
            if a.requires_grad:
                g = np.zeros_like(a.data)
                np.add.at(g, idx, out.grad)
                a._accum(g)
        return _bw

    return _result(data, (a,), factory)


def mask(a, keep) -> Tensor:
    """Multiply by a constant 0/1 array; masked positions get exactly 0 grad."""
    a = as_tensor(a)
    k = np.asarray(keep, dtype=np.float64)
    if not np.all((k == 0.0) | (k == 1.0)):
        raise ValueError("mask: keep array must contain only 0s and 1s")
    try:
        data = a.data * k
    except ValueError:
        raise ShapeMismatchError("mask", a.shape, k.shape) from None

    def factory(out):
        def _bw():
            if a.requires_grad:
                a._accum(_unbroadcast(out.grad * k, a.data.shape))
        return _bw

    return _result(data, (a,), factory)


def masked_softmax(a, keep) -> Tensor:
    """Row softmax over the last axis, restricted to ``keep``-flagged entries.

    Masked entries are exactly 0 in the output and receive exactly 0
    gradient. Raises AllMaskedError if any row has no kept entry.
    """
    a = as_tensor(a)
    k = np.asarray(keep, dtype=bool)
    if k.shape != a.data.shape:
        raise ShapeMismatchError("masked-softmax", a.shape, k.shape)
    if not k.any(axis=-1).all():
        raise AllMaskedError("masked-softmax: a row has no unmasked entries")
    x = np.where(k, a.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(k, np.exp(x), 0.0)
    data = e / e.sum(axis=-1, keepdims=True)

    def factory(out):
        def _bw():
            if a.requires_grad:
                s = out.data
                g = out.grad
                a._accum(s * (g - (g * s).sum(axis=-1, keepdims=True)))
        return _bw

    return _result(data, (a,), factory)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    return masked_softmax(a, np.ones_like(a.data, dtype=bool))


# ---- parameters and optimizer ------------------------------------------------

CHECKPOINT_FORMAT = "agecache.checkpoint"
CHECKPOINT_VERSION = 1


class ParameterSet:
    """Named trainable tensors, created in a fixed order for reproducibility."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def uniform(self, name: str, shape, rng: np.random.Generator, fan_in: int | None = None) -> Tensor:
        """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        fi = fan_in if fan_in is not None else shape[0]
        bound = 1.0 / math.sqrt(max(fi, 1))
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def fill_missing_grads(self) -> None:
        """Zero-fill grads of parameters a loss did not reach (true grad is 0)."""
        for t in self._tensors.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._tensors) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint missing parameters: {missing}")
        for name, t in self._tensors.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatchError(f"load[{name}]", t.data.shape, arr.shape)
            t.data = arr.copy()

    def save(self, path: str, meta: dict | None = None) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "meta": meta or {},
            "tensors": {
                name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
                for name, t in self._tensors.items()
            },
        }
        atomic_write_text(path, json.dumps(payload, sort_keys=True))

    @staticmethod
    def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a parameter checkpoint: {path}")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
        arrays = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in payload["tensors"].items()
        }
        return payload.get("meta", {}), arrays

    def load(self, path: str) -> dict:
        meta, arrays = self.read_checkpoint(path)
        self.load_arrays(arrays)
        return meta


class Adam:
    """Adam with bias correction. ``step`` clears gradients afterwards."""

    def __init__(self, params: ParameterSet, learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.second_moment = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        missing = [name for name, t in self.params.items() if t.grad is None]
        if missing:
            raise MissingGradientError(missing)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in self.params.items():
            g = t.grad
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            t.grad = None


def atomic_write_text(path: str, text: str) -> None:
    """Write a file via a temp name + rename so partial writes never land."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
