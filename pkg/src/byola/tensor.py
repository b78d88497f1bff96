"""Dense tensors over numpy with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` holding its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks the graph in reverse topological order and
accumulates gradients additively into the leaves that require them.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Select float32 (training) or float64 (verification) for new tensors."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractViolation(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are plain constants."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DEFAULT_DTYPE
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        _check_finite(data, "forward pass")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        live = tuple(p for p in parents) if _GRAD_ENABLED else ()
        out.requires_grad = any(p.requires_grad for p in live)
        out._parents = live if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(
                    f"backward() needs a scalar loss, got shape {self.shape}")
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    _check_finite(g, "backward pass")
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- elementwise arithmetic --------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    def __add__(self, other):
        other = self._lift(other)
        a, b = self.shape, other.shape
        return Tensor._result(self.data + other.data, (self, other),
                              lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data
        return Tensor._result(x * y, (self, other),
                              lambda g: (_unbroadcast(g * y, x.shape),
                                         _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        x, y = self.data, other.data
        return Tensor._result(x / y, (self, other),
                              lambda g: (_unbroadcast(g / y, x.shape),
                                         _unbroadcast(-g * x / (y * y), y.shape)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent: float):
        x = self.data
        return Tensor._result(x ** exponent, (self,),
                              lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        y = np.exp(self.data)
        return Tensor._result(y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._result(y, (self,), lambda g: (g * 0.5 / y,))

    def relu(self):
        mask = self.data > 0
        return Tensor._result(self.data * mask, (self,), lambda g: (g * mask,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                              (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: int, keepdims: bool = False):
        """Maximum along one axis; the gradient goes to the first maximal entry."""
        x = self.data
        idx = np.expand_dims(x.argmax(axis=axis), axis)
        y = np.take_along_axis(x, idx, axis=axis)

        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            gx = np.zeros_like(x)
            np.put_along_axis(gx, idx, g, axis=axis)
            return (gx,)

        return Tensor._result(y if keepdims else np.squeeze(y, axis), (self,), backward)

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._result(self.data.reshape(shape), (self,),
                              lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(np.ascontiguousarray(self.data.transpose(axes)), (self,),
                              lambda g: (g.transpose(inverse),))

    @property
    def T(self):
        return self.transpose()


class Parameter(Tensor):
    """A trainable leaf; stays a parameter even when ``requires_grad`` is off."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


# -- free functions ----------------------------------------------------------


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    if x.ndim != 2 or y.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    return Tensor._result(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                          lambda g: tuple(np.split(g, bounds, axis=axis)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    """``x @ weight.T + bias`` over any number of leading dimensions."""
    if x.shape[-1] != weight.shape[1]:
        raise ContractViolation(
            f"linear: input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    w = weight.data
    y = x2 @ w.T
    if bias is not None:
        y = y + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w).reshape(*lead, w.shape[1])
        gw = g2.T @ x2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(y.reshape(*lead, w.shape[0]), parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int = 1) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) via channels-last im2col."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(
            f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    p = padding
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + Ho, j:j + Wo, :]
    cols = cols.reshape(B * Ho * Wo, kh * kw * C)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(O, -1)  # O, kh*kw*C
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh, kw, C)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + Ho, j:j + Wo, :] += dcols[:, :, :, i, j, :]
        gx = np.ascontiguousarray(dxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._result(out, parents, backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    The gradient is routed to the first maximal element of each window in
    row-major order.
    """
    if x.ndim != 4:
        raise ContractViolation(f"max_pool2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise ContractViolation(f"max_pool2d: spatial size {H}x{W} too small")
    data = x.data
    corners = [(0, 0), (0, 1), (1, 0), (1, 1)]
    views = [data[:, :, i:2 * H2:2, j:2 * W2:2] for i, j in corners]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def backward(g):
        gx = np.zeros_like(data)
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), view in zip(corners, views):
            hit = (view == out) & ~taken
            taken |= hit
            gx[:, :, i:2 * H2:2, j:2 * W2:2] = g * hit
        return (gx,)

    return Tensor._result(out, (x,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, axes: tuple, eps: float,
               mean: np.ndarray | None = None, var: np.ndarray | None = None):
    """Normalize over ``axes`` then apply the affine transform.

    With ``mean``/``var`` omitted the batch statistics are used and returned
    (biased variance) so the caller can update running estimates.
    """
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    g_, b_ = gamma.data.reshape(shape), beta.data.reshape(shape)
    data = x.data
    batch_stats = mean is None
    if batch_stats:
        mean = data.mean(axis=axes, keepdims=True)
        var = data.var(axis=axes, keepdims=True)
    else:
        mean, var = mean.reshape(shape), var.reshape(shape)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (data - mean) * inv_std
    out = g_ * xhat + b_
    n = data.size // x.shape[1]

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if batch_stats:
            dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    result = Tensor._result(out.astype(data.dtype, copy=False), (x, gamma, beta), backward)
    return result, mean.reshape(-1), var.reshape(-1)


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/keep_prob``."""
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / keep_prob
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows divided by ``max(||row||, eps)``."""
    data = x.data
    norm = np.sqrt((data * data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = data / denom
    clipped = norm <= eps

    def backward(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(clipped, g / denom, (g - y * inner) / denom),)

    return Tensor._result(y, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``[N, C]`` logits against class indices ``[N]``."""
    z = logits.data
    targets = np.asarray(targets, dtype=int)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), targets].mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(n), targets] -= 1.0
        return (g * grad / n,)

    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean per-element sigmoid binary cross-entropy."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))

    def backward(g):
        return (g * (sig - y) / z.size,)

    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), backward)
