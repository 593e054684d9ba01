"""Differentiable operations.

Every function takes and returns :class:`Tensor` objects (numpy arrays and
scalars are promoted to constants) and records an exact backward rule.
Shapes follow numpy broadcasting; gradients are summed back over broadcast
dimensions.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from ..errors import ContractViolation
from .tensor import Tensor, as_tensor, make_result

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def subtract(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("subtract", a, b)
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "subtract")


def multiply(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("multiply", a, b)
    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), back, "multiply")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ContractViolation(f"matmul: batch shapes of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data @ b.data, (a, b), back, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ContractViolation(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    if x.ndim == 1:
        out = matmul(reshape(x, (1, -1)), weight)
        out = reshape(out, (weight.shape[1],))
    else:
        out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ContractViolation(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_result(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def slice(x: Tensor, index) -> Tensor:  # noqa: A001 - mirrors the op name
    """``x[index]`` for basic or integer-array indices."""
    x = as_tensor(x)
    try:
        data = x.data[index]
    except IndexError as exc:
        raise ContractViolation(f"slice: {exc} for shape {x.shape}") from None

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return make_result(np.array(data, copy=True), (x,), back, "slice")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractViolation("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ContractViolation(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(data, tensors, back, "concat")


def one_hot(indices, num_classes: int, dtype=np.float64) -> Tensor:
    """Constant one-hot encoding; the last axis has ``num_classes`` entries."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= num_classes):
        raise ContractViolation(f"one_hot: index outside [0, {num_classes})")
    out = np.zeros(indices.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, indices[..., None], 1.0, axis=-1)
    return Tensor(out)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ContractViolation(f"axis {a} invalid for rank {ndim}")
        out.append(a % ndim)
    return tuple(out)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_result(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), back, "mean")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _norm_axes(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), back, "softmax")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI

    def back(g):
        return (g * (cdf + x.data * pdf),)

    return make_result(x.data * cdf, (x,), back, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x = as_tensor(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ContractViolation(f"layer_norm: gain/bias {gamma.shape}/{beta.shape} do not match width {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    lead = tuple(range(x.ndim - 1))

    def back(g):
        dxhat = g * gamma.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation, channel axis 1.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, exponential
    moving average with ``momentum``). In eval mode the running statistics
    are used unchanged.
    """
    x = as_tensor(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,) or running_mean.shape != (C,):
        raise ContractViolation(f"batch_norm: parameters do not match {C} channels of input {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        n = x.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        unbiased = var.reshape(C) * (n / (n - 1) if n > 1 else 1.0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C).astype(running_mean.dtype)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)

        def back(g):
            dxhat = g * g_
            dx = rstd * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
            return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * rstd

        def back(g):
            return g * g_ * rstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(xhat * g_ + b_, (x, gamma, beta), back, "batch_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity (same object) in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractViolation("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding="valid") -> Tensor:
    """2-D cross-correlation, stride 1.

    ``x`` is (B, C_in, H, W), ``weight`` (C_out, C_in, kh, kw). ``padding`` is
    "valid", "same" (extra padding goes right/bottom for even kernels) or an
    explicit ``((top, bottom), (left, right))``.
    """
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    C_out, C_in, kh, kw = weight.shape
    if padding == "valid":
        pads = ((0, 0), (0, 0))
    elif padding == "same":
        pads = (((kh - 1) // 2, kh - 1 - (kh - 1) // 2), ((kw - 1) // 2, kw - 1 - (kw - 1) // 2))
    else:
        pads = tuple(tuple(p) for p in padding)
    xp = np.pad(x.data, ((0, 0), (0, 0)) + pads)
    B, _, Hp, Wp = xp.shape
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    if Ho < 1 or Wo < 1:
        raise ContractViolation(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    w = weight.data
    out = np.zeros((B, Ho, Wo, C_out), dtype=np.result_type(x.dtype, w.dtype))
    xpt = np.transpose(xp, (0, 2, 3, 1))  # channels last for the contractions
    for i in range(kh):
        for j in range(kw):
            out += xpt[:, i:i + Ho, j:j + Wo, :] @ w[:, :, i, j].T
    if bias is not None:
        out += bias.data
    result = np.ascontiguousarray(np.transpose(out, (0, 3, 1, 2)))

    def back(g):
        gt = np.transpose(g, (0, 2, 3, 1))  # (B, Ho, Wo, C_out)
        gxp = np.zeros_like(xpt)
        gw = np.zeros_like(w)
        g2 = gt.reshape(-1, C_out)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + Ho, j:j + Wo, :] += gt @ w[:, :, i, j]
                gw[:, :, i, j] = g2.T @ xpt[:, i:i + Ho, j:j + Wo, :].reshape(-1, C_in)
        gx = np.transpose(gxp, (0, 3, 1, 2))
        (t, bt), (l, r) = pads
        gx = gx[:, :, t:Hp - bt, l:Wp - r]
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(gt.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(result, parents, back, "conv2d")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractViolation(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractViolation("cross_entropy: label outside the class range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    B = logits.shape[0]
    loss = -logp[np.arange(B), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


__all__ = [
    "add", "subtract", "multiply", "matmul", "linear", "reshape", "transpose", "slice", "concat",
    "one_hot", "sum", "mean", "softmax", "gelu", "layer_norm", "batch_norm", "dropout", "conv2d",
    "cross_entropy",
]
