"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation on a :class:`Tensor` records its parents and a vector-Jacobian
product. :meth:`Tensor.backward` walks the recorded graph in reverse
topological order. All arithmetic is float64.

Besides the tape, the module carries the small amount of network machinery the
rest of the package trains with: :class:`ParamStore`, :class:`Mlp` and
:class:`Adam`, plus a JSON checkpoint format.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "as_tensor",
    "stack",
    "concat",
    "where",
    "ParamStore",
    "MlpSpec",
    "Mlp",
    "Adam",
    "adam_step",
    "backward",
    "save_params",
    "load_params",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self.name = name

    @classmethod
    def _op(cls, data: np.ndarray, parents: tuple, vjp: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        live = any(p.requires_grad for p in parents)
        out.requires_grad = live
        out._parents = parents if live else ()
        out._vjp = vjp if live else None
        return out

    # -- introspection -------------------------------------------------------
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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- backward ------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_ = [(self, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._op(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._op(
            x * y,
            (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor._op(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("only constant exponents are supported")
        x = self.data
        return Tensor._op(x**p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim < 2 or y.ndim < 2:
            raise ValueError("matmul operands must be at least 2-D")

        def vjp(g):
            gx = g @ np.swapaxes(y, -1, -2)
            gy = np.swapaxes(x, -1, -2) @ g
            return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

        return Tensor._op(x @ y, (self, other), vjp)

    def __rmatmul__(self, other) -> "Tensor":
        return as_tensor(other) @ self

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._op(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._op(np.transpose(self.data, axes), (self,), lambda g: (np.transpose(g, inv),))

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor._op(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    def __getitem__(self, idx) -> "Tensor":
        shape = self.shape
        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)

        def vjp(g):
            out = np.zeros(shape)
            if basic:
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return (out,)

        return Tensor._op(self.data[idx], (self,), vjp)

    def flip(self, axis: int) -> "Tensor":
        return Tensor._op(np.flip(self.data, axis), (self,), lambda g: (np.flip(g, axis),))

    def pad(self, pad_width, mode: str = "reflect") -> "Tensor":
        """Pad like :func:`numpy.pad`; ``mode`` is ``reflect``, ``edge`` or ``constant``."""
        shape = self.shape
        pw = [(p, p) if isinstance(p, int) else tuple(p) for p in pad_width]
        data = np.pad(self.data, pw, mode=mode)
        if mode == "constant":
            sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, shape))
            return Tensor._op(data, (self,), lambda g: (g[sl],))
        # route gradients back through the index map numpy used
        index = np.pad(np.arange(self.size).reshape(shape), pw, mode=mode)

        def vjp(g):
            out = np.bincount(index.ravel(), weights=g.ravel(), minlength=self.size)
            return (out.reshape(shape),)

        return Tensor._op(data, (self,), vjp)

    # -- elementwise functions ----------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._op(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._op(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._op(out, (self,), lambda g: (g * 0.5 / out,))

    def abs(self) -> "Tensor":
        x = self.data
        return Tensor._op(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._op(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self) -> "Tensor":
        out = expit(self.data)
        return Tensor._op(out, (self,), lambda g: (g * out * (1.0 - out),))

    def relu(self) -> "Tensor":
        x = self.data
        # derivative at exactly 0 is 0
        mask = x > 0
        return Tensor._op(np.where(mask, x, 0.0), (self,), lambda g: (g * mask,))

    def softplus(self) -> "Tensor":
        x = self.data
        out = np.logaddexp(0.0, x)
        return Tensor._op(out, (self,), lambda g: (g / (1.0 + np.exp(-x)),))

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return Tensor._op(np.clip(x, lo, hi), (self,), lambda g: (g * inside,))

    def identity(self) -> "Tensor":
        return self


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._op(data, tuple(tensors), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._op(data, tuple(tensors), vjp)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where the constant mask ``cond`` holds, else from ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return Tensor._op(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ---------------------------------------------------------------------------
# parameters, networks, optimizer
# ---------------------------------------------------------------------------


class ParamStore:
    """Ordered collection of named trainable tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def assign(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            t = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {t.shape}")
            t.data = v.copy()

    def subset(self, prefix: str) -> "ParamStore":
        sub = ParamStore()
        for k, t in self._params.items():
            if k.startswith(prefix):
                sub._params[k] = t
        return sub


def backward(loss: Tensor, params: ParamStore) -> dict[str, np.ndarray]:
    """Run reverse mode from a scalar ``loss`` and return a gradient per parameter.

    Parameters the loss does not depend on receive zeros.
    """
    if loss.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    params.zero_grad()
    loss.backward()
    return {k: (t.grad.reshape(t.shape) if t.grad is not None else np.zeros(t.shape)) for k, t in params.items()}


ACTIVATIONS = ("relu", "tanh", "sigmoid", "softplus", "identity")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, h1, ..., out]`` and one activation per weight layer."""

    widths: tuple
    activations: tuple

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        acts = tuple(self.activations)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if len(acts) != len(widths) - 1:
            raise ValueError(f"{len(widths) - 1} layers but {len(acts)} activations")
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise ValueError(f"unknown activation(s) {bad}; choose from {ACTIVATIONS}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def num_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))


class Mlp:
    """Fully connected network whose weights live in a shared :class:`ParamStore`."""

    def __init__(self, spec: MlpSpec, params: ParamStore, prefix: str, rng: np.random.Generator | None = None, init: str = "uniform"):
        self.spec = spec
        self.prefix = prefix
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            if init == "zeros":
                w = np.zeros((fan_in, fan_out))
                b = np.zeros(fan_out)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                b = rng.uniform(-bound, bound, size=fan_out)
            self.weights.append(params.add(f"{prefix}.{i}.weight", w))
            self.biases.append(params.add(f"{prefix}.{i}.bias", b))

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.spec.activations)):
            if x.shape[-1] != w.shape[0]:
                raise ValueError(
                    f"{self.prefix} layer {i}: input width {x.shape[-1]} does not match expected {w.shape[0]}"
                )
            x = getattr(x @ w + b, act)()
        return x


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. ``t`` is the step count *before* this update.

    Returns ``(new_param, new_m, new_v, t + 1)``.
    """
    t += 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v, t


@dataclass
class Adam:
    """Adam over the tensors of a :class:`ParamStore`, state kept per name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def step(self, params: ParamStore, grads: dict[str, np.ndarray], names: Iterable[str] | None = None) -> None:
        for name in names if names is not None else params.names():
            t = params[name]
            m, v, count = self.state.get(name, (np.zeros(t.shape), np.zeros(t.shape), 0))
            t.data, m, v, count = adam_step(t.data, grads[name], m, v, count, self.lr, self.beta1, self.beta2, self.eps)
            self.state[name] = (m, v, count)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "scrlab-params/1"


def save_params(params: ParamStore | dict, path: str | os.PathLike) -> None:
    """Write parameters as JSON: ``{"format", "params": [{"name", "shape", "values"}]}``.

    Values are written with ``repr`` precision, so loading is bit-exact.
    """
    items = params.items() if isinstance(params, (ParamStore, dict)) else params
    records = []
    for name, t in items:
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        records.append({"name": name, "shape": list(arr.shape), "values": [float(x) for x in arr.ravel()]})
    atomic_write_text(path, json.dumps({"format": CHECKPOINT_FORMAT, "params": records}))


def load_params(path: str | os.PathLike) -> "OrderedDict[str, np.ndarray]":
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for rec in doc["params"]:
        out[rec["name"]] = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
    return out


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
