"""A small tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Var` holds a value and a list of ``(parent, vjp)`` pairs; ``vjp``
maps the upstream gradient to the parent's gradient contribution.
:meth:`Var.backward` walks the graph in reverse topological order.
"""

from __future__ import annotations

import numpy as np

from nmidistill.errors import NumericError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Var:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.grad = None
        self.parents = parents
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, dtype={self.value.dtype})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def _make(self, value, parents):
        parents = tuple((p, f) for p, f in parents if p.requires_grad)
        return Var(value, parents)

    # -- graph traversal -------------------------------------------------

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise NumericError("backward() without a seed gradient needs a scalar output")
            if not np.all(np.isfinite(self.value)):
                raise NumericError(f"cannot differentiate a non-finite loss ({self.value})")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                key = id(parent)
                grads[key] = contrib if key not in grads else grads[key] + contrib

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = as_var(other, like=self)
        a, b = self.shape, other.shape
        return self._make(self.value + other.value,
                          [(self, lambda g: _unbroadcast(g, a)), (other, lambda g: _unbroadcast(g, b))])

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.value, [(self, lambda g: -g)])

    def __sub__(self, other):
        return self + (-as_var(other, like=self))

    def __rsub__(self, other):
        return as_var(other, like=self) + (-self)

    def __mul__(self, other):
        other = as_var(other, like=self)
        a, b = self.shape, other.shape
        x, y = self.value, other.value
        return self._make(x * y, [(self, lambda g: _unbroadcast(g * y, a)),
                                  (other, lambda g: _unbroadcast(g * x, b))])

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other, like=self)
        a, b = self.shape, other.shape
        x, y = self.value, other.value
        return self._make(x / y, [(self, lambda g: _unbroadcast(g / y, a)),
                                  (other, lambda g: _unbroadcast(-g * x / (y * y), b))])

    def __rtruediv__(self, other):
        return as_var(other, like=self) / self

    def __pow__(self, p):
        x = self.value
        if p == 2:
            return self._make(x * x, [(self, lambda g: g * 2.0 * x)])
        return self._make(x ** p, [(self, lambda g: g * p * x ** (p - 1))])

    def __matmul__(self, other):
        other = as_var(other, like=self)
        x, y = self.value, other.value
        a, b = self.shape, other.shape

        def gx(g):
            return _unbroadcast(g @ np.swapaxes(y, -1, -2), a)

        def gy(g):
            return _unbroadcast(np.swapaxes(x, -1, -2) @ g, b)

        return self._make(x @ y, [(self, gx), (other, gy)])

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape):
        old = self.shape
        return self._make(self.value.reshape(*shape), [(self, lambda g: g.reshape(old))])

    def transpose(self, *axes):
        inv = np.argsort(axes)
        return self._make(self.value.transpose(axes), [(self, lambda g: g.transpose(inv))])

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.value.dtype

        def vjp(g):
            out = np.zeros(shape, dtype=dtype)
            if _is_basic_index(idx):
                out[idx] = g
            else:
                np.add.at(out, idx, g)
            return out

        return self._make(self.value[idx], [(self, vjp)])

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self._make(np.sum(self.value, axis=axis, keepdims=keepdims), [(self, vjp)])

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    # -- unary functions --------------------------------------------------

    def exp(self):
        y = np.exp(self.value)
        return self._make(y, [(self, lambda g: g * y)])

    def log(self):
        x = self.value
        return self._make(np.log(x), [(self, lambda g: g / x)])

    def sqrt(self):
        y = np.sqrt(self.value)
        return self._make(y, [(self, lambda g: g * 0.5 / y)])


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis), type(None))) for i in items)


def as_var(x, like: Var | None = None) -> Var:
    """Wrap a constant; Python scalars take ``like``'s dtype so float32 graphs stay float32."""
    if isinstance(x, Var):
        return x
    if like is not None and isinstance(x, (int, float)):
        return Var(np.asarray(x, dtype=like.value.dtype))
    return Var(np.asarray(x))


def parameter(value, name=None) -> Var:
    return Var(np.asarray(value), requires_grad=True, name=name)


def softmax(x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return x._make(y, [(x, vjp)])


def log_softmax(x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return g - p * g.sum(axis=axis, keepdims=True)

    return x._make(y, [(x, vjp)])


def layer_norm(x: Var, weight: Var, bias: Var, eps: float = 1e-6) -> Var:
    """LayerNorm over the last axis followed by an elementwise affine map."""
    return normalize(x, eps) * weight + bias


def normalize(x: Var, eps: float = 1e-6) -> Var:
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = v.shape[-1]

    def vjp(g):
        return inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).sum(axis=-1, keepdims=True) / d)

    return x._make(xhat, [(x, vjp)])


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Var) -> Var:
    """Tanh-approximated GELU."""
    v = x.value
    u = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(u)
    y = 0.5 * v * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)

    return x._make(y, [(x, vjp)])


def concat(vars_, axis: int = 0) -> Var:
    vars_ = [as_var(v) for v in vars_]
    sizes = np.cumsum([v.shape[axis] for v in vars_])[:-1]
    out = np.concatenate([v.value for v in vars_], axis=axis)
    parents = []
    for i, v in enumerate(vars_):
        def vjp(g, i=i):
            return np.split(g, sizes, axis=axis)[i]
        parents.append((v, vjp))
    return vars_[0]._make(out, parents)


def grad(loss_fn, params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn(vars)`` on parameter leaves and return ``(loss, gradients)``.

    Parameters the loss does not depend on get zero gradients.
    """
    leaves = {k: parameter(v, name=k) for k, v in params.items()}
    loss = loss_fn(leaves)
    if loss.value.size != 1:
        raise NumericError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.value):
        raise NumericError(f"loss is non-finite ({float(loss.value)})")
    loss.backward()
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
    return float(loss.value), grads
