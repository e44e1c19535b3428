"""Differentiable operations over :class:`~clipmap.autodiff.Tensor`.

Each op computes its forward value with numpy and returns a node whose
backward rule maps the upstream gradient to one gradient per input.
Broadcasting follows numpy; gradients of broadcast inputs are summed back to
the input shape.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, as_array, is_grad_enabled
from .errors import ContractError, DimensionError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(as_array(x))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _t(a)
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a) -> Tensor:
    a = _t(a)
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def minimum(a, bound: float) -> Tensor:
    """Elementwise ``min(a, bound)``; gradient passes only where ``a < bound``."""
    a = _t(a)
    ad = a.data
    keep = ad < bound
    return Tensor._from_op(np.minimum(ad, bound), (a,), lambda g: (g * keep,))


_GELU_BLOCK = 1 << 14  # elements per pass; keeps the temporaries in cache


def _gelu_block(x: np.ndarray, out: np.ndarray, deriv: np.ndarray | None) -> None:
    x2 = x * x
    u = x2 * GELU_A
    u += 1.0
    u *= x
    u *= GELU_C
    t = np.tanh(u, out=u)
    half = t + 1.0
    half *= 0.5
    np.multiply(half, x, out=out)
    if deriv is None:
        return
    # d/dx = 0.5(1 + t) + 0.5·x·(1 - t²)·C·(1 + 3A·x²)
    np.multiply(t, t, out=t)
    np.subtract(1.0, t, out=t)
    x2 *= 3.0 * GELU_A
    x2 += 1.0
    x2 *= 0.5 * GELU_C
    x2 *= x
    x2 *= t
    np.add(x2, half, out=deriv)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    a = _t(a)
    x = np.ascontiguousarray(a.data).reshape(-1)
    out = np.empty_like(x)
    grad = a.requires_grad and is_grad_enabled()
    deriv = np.empty_like(x) if grad else None
    for s in range(0, x.size, _GELU_BLOCK):
        sl = slice(s, s + _GELU_BLOCK)
        _gelu_block(x[sl], out[sl], None if deriv is None else deriv[sl])
    out = out.reshape(a.shape)
    if not grad:
        return Tensor._from_op(out, (a,), None)
    deriv = deriv.reshape(a.shape)
    return Tensor._from_op(out, (a,), lambda g: (g * deriv,))


# -- reductions & shape -----------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _t(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a) -> Tensor:
    a = _t(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def getitem(a, index) -> Tensor:
    a = _t(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(a.data[index], (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"cannot stack tensors of differing shapes {sorted(shapes)}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_to(a, shape) -> Tensor:
    a = _t(a)
    old = a.shape
    return Tensor._from_op(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight laid out [out_features, in_features]."""
    x, weight = _t(x), _t(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    parents = [x, weight]
    if bias is not None:
        bias = _t(bias)
        out += bias.data
        parents.append(bias)
    out = out.reshape(xd.shape[:-1] + (wd.shape[0],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return Tensor._from_op(out, parents, backward)


def embedding(weight, ids) -> Tensor:
    """Row gather ``weight[ids]``; gradient scatter-adds into the rows."""
    weight = _t(weight)
    ids = np.asarray(ids)
    shape, dtype = weight.shape, weight.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._from_op(weight.data[ids], (weight,), backward)


# -- normalisation & probabilities --------------------------------------------

def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; ``mask`` (broadcastable bool, True = keep) zeroes excluded entries."""
    x = _t(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    p = z - z.max(axis=axis, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=axis, keepdims=True)

    def backward(g):
        gp = g * p
        gp -= p * gp.sum(axis=axis, keepdims=True)
        return (gp,)

    return Tensor._from_op(p, (x,), backward)


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of an [m x n] matrix."""
    x = _t(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


def cross_entropy_soft(logits, target_probs, tol: float = 1e-9) -> Tensor:
    """Mean over rows of ``-sum_j target[i, j] * log_softmax(logits)[i, j]``."""
    logits, target = _t(logits), _t(target_probs)
    if logits.ndim != 2 or logits.shape != target.shape:
        raise ContractError(f"cross_entropy_soft needs matching matrices, got {logits.shape} and {target.shape}")
    row_sums = target.data.sum(axis=1)
    if not np.all(np.abs(row_sums - 1.0) <= tol) or np.any(target.data < 0):
        raise ContractError("target rows must be probability vectors (non-negative, summing to 1)")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    t = target.data
    loss = -(t * logp).sum() / n

    def backward(g):
        gl = g * (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / n if logits.requires_grad else None
        gt = -g * logp / n if target.requires_grad else None
        return gl, gt

    return Tensor._from_op(np.asarray(loss), (logits, target), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params {gamma.shape}/{beta.shape} do not match width {d}")
    xd = x.data
    xhat = xd - xd.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    gd = gamma.data
    out = xhat * gd
    out += beta.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            proj = np.einsum("...i,...i->...", gh, xhat)[..., None] / d
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= inv
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), backward)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each vector along ``axis`` to unit Euclidean norm."""
    x = _t(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(y, (x,), backward)
