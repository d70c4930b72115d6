"""
A small reverse-mode automatic differentiation engine on top of numpy.

Tensors hold float64 arrays.  Every operation records its parents and a
closure that maps the output gradient to parent gradients; ``backward``
walks the recorded graph in reverse topological order.  The graph is
rebuilt on every forward pass.

Broadcasting follows numpy.  Gradients flowing into a broadcast operand are
summed back to the operand's shape.
"""

from __future__ import annotations

import numpy as np

from . import kernels as _k


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array with an optional backward-graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "_released")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name
        self._released = False

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ------------------------------------------------------------------
    # graph construction
    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        parents = tuple(p for p in parents)
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    # ------------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Raises if ``self`` is not a scalar, if this graph was already
        differentiated, or if a reachable leaf still carries a gradient
        from an earlier pass (call ``zero_grad`` first).
        """
        if self.data.size != 1:
            raise GradientError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._released:
            raise GradientError("backward() already called on this graph")
        if not self.requires_grad:
            raise GradientError("loss is not connected to any trainable tensor")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        for node in order:
            if node.is_leaf and node.grad is not None:
                raise GradientError(
                    f"leaf {node.name or node.shape} already holds a gradient; call zero_grad() before backward()"
                )

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            if g is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # free the tape as we go
            node._backward = None
            node._parents = ()
            node._released = True
        self._released = True

    # ------------------------------------------------------------------
    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics (``np.matmul``)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        return _matmul_flat(a, b)
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def _matmul_flat(a: Tensor, b: Tensor) -> Tensor:
    # (..., m, k) @ (k, n) as one 2-D product
    ad, bd = a.data, b.data
    lead = ad.shape[:-1]
    a2 = ad.reshape(-1, ad.shape[-1])
    out = (a2 @ bd).reshape(*lead, bd.shape[1])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), backward)


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    sig = _k.sigmoid(a.data)
    return Tensor._make(_k.softplus(a.data), (a,), lambda g: (g * sig,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# ----------------------------------------------------------------------
# reductions and shape
# ----------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


# ----------------------------------------------------------------------
# network blocks
# ----------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]
    gd = gain.data

    def backward(g):
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._make(out, (x, gain, bias), backward)


def dropout(x, p: float, rng: np.random.Generator | None, active: bool) -> Tensor:
    """Inverted dropout; identity unless ``active``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not active or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,))


def matern_bias(dist: np.ndarray, theta_rho, theta_lambda, family, lam_override=None, cache=None) -> Tensor:
    """softplus(theta_lambda) * Psi(dist; softplus(theta_rho)).

    Scalar thetas give an ``(n, n)`` result; thetas of shape ``(h,)`` give
    ``(h, n, n)`` (one kernel per head).
    """
    theta_rho, theta_lambda = as_tensor(theta_rho), as_tensor(theta_lambda)
    rho = _k.softplus(theta_rho.data)
    drho = _k.sigmoid(theta_rho.data)
    if lam_override is None:
        lam = _k.softplus(theta_lambda.data)
        dlam = _k.sigmoid(theta_lambda.data)
    else:
        lam = np.broadcast_to(np.asarray(lam_override, dtype=np.float64), theta_lambda.shape)
        dlam = np.zeros_like(lam)
    if cache is not None:
        psi, dpsi = cache.get(dist, rho, family)
    else:
        rb = rho[:, None, None] if rho.ndim else rho
        psi = _k.matern_correlation(dist, rb, family)
        dpsi = _k.matern_correlation_grad_rho(dist, rb, family)
    per_head = rho.ndim > 0
    lb = lam[:, None, None] if per_head else lam
    out = lb * psi

    def backward(g):
        if per_head:
            g_rho = (g * dpsi).sum(axis=(-1, -2)) * lam * drho
            g_lam = (g * psi).sum(axis=(-1, -2)) * dlam
        else:
            g_rho = np.asarray((g * dpsi).sum() * lam * drho)
            g_lam = np.asarray((g * psi).sum() * dlam)
        return g_rho, g_lam

    return Tensor._make(out, (theta_rho, theta_lambda), backward)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("mse of empty vectors")
    return mean(square(pred - target))


# ----------------------------------------------------------------------
# testing helpers
# ----------------------------------------------------------------------


def numerical_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn`` at ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = fn()
        x[idx] = orig - eps
        fm = fn()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


__all__ = [
    "Tensor", "ShapeError", "GradientError", "parameter", "as_tensor", "matmul", "add", "neg", "mul",
    "scale", "relu", "softplus", "square", "tsum", "mean", "reshape", "transpose", "softmax_rows",
    "layer_norm", "dropout", "matern_bias", "mse", "numerical_grad", "relative_error",
]
