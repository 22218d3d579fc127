"""Minimal define-by-run reverse-mode differentiation over float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating the upstream gradient.  :meth:`Tensor.backward` walks the
graph once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undoes numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    # make numpy defer binary operators (ndarray @ Tensor etc.) to Tensor
    __array_ufunc__ = None

    def __init__(self, data, parents: Sequence["Tensor"] = (), op: str = "",
                 requires_grad: bool = False):
        self.data = _as_array(data)
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        backward(self)

    # arithmetic --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A named leaf whose gradient is accumulated by :func:`backward`."""

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents, op, backward_fn) -> Tensor:
    out = Tensor(data, parents, op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each once, inputs before consumers."""
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
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf that requires grad."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.data / b.data
    return _node(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(x, exponent: float) -> Tensor:
    x = tensor(x)
    e = float(exponent)

    def grad_fn(g):
        if e == 0.0:
            return (np.zeros_like(x.data),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = e * np.power(x.data, e - 1.0)
        # x**e with 0 < e < 1 has an infinite slope at 0; treat it as flat
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _node(np.power(x.data, e), (x,), "pow", grad_fn)


def exp(x) -> Tensor:
    x = tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = tensor(x)
    return _node(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def relu(x) -> Tensor:
    """max(0, x); the subgradient at 0 is taken to be 0."""
    x = tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), "relu", lambda g: (g * mask,))


# reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), "sum", grad_fn)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return div(tsum(x, axis=axes, keepdims=keepdims), float(n))


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    return _node(x.data.reshape(shape), (x,), "reshape",
                 lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape} "
                         f"(inner extents {a.shape[-1:]} vs {b.shape[-2:-1]})")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), "matmul", grad_fn)


def take_along_last(x, index: Sequence[int]) -> Tensor:
    """Pick ``x[i, index[i]]`` for a 2-D ``x``."""
    x = tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return _node(x.data[rows, idx], (x,), "take", grad_fn)


# normalisation and probabilities ---------------------------------------

def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale/shift."""
    x, gain, bias = tensor(x), tensor(gain), tensor(bias)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx_hat = g * gain.data
        n = x.shape[-1]
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return (gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))

    return _node(out, (x, gain, bias), "layer_norm", grad_fn)


def softmax(logits, axis: int = -1) -> Tensor:
    x = tensor(logits)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (x,), "softmax", grad_fn)


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = tensor(logits)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), "log_softmax", grad_fn)


def _check_labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got {sorted(set(y.tolist()))}")
    return y


def cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Per-sample ``-w[y] * log softmax(logits)[y]``; no reduction."""
    logits = tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [b, c] logits, got {logits.shape}")
    y = _check_labels(labels, logits.shape[1])
    if len(y) != logits.shape[0]:
        raise ShapeError(f"{len(y)} labels for {logits.shape[0]} rows")
    nll = -take_along_last(log_softmax(logits), y)
    if class_weights is None:
        return nll
    w = np.asarray(class_weights.data if isinstance(class_weights, Tensor) else class_weights,
                   dtype=np.float64)
    return nll * w[y]


def dropout(x, p: float, train_mode: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout as multiplication by a constant mask; identity in eval mode."""
    x = tensor(x)
    if not train_mode or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    return x * (keep / (1.0 - p))


# gradient checking -------------------------------------------------------

def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                      step: float = 1e-5) -> float:
    """Max relative error between :func:`backward` and central differences.

    ``f`` rebuilds the graph from the current parameter values on every call.
    The relative error per coordinate is ``|a - n| / max(1, |a|, |n|)``, which
    degrades to absolute error for small gradients.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    zero_grads(params)
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    zero_grads(params)
    return worst
