"""Forward and backward kernels for the tensor operations used by the models.

Every ``*_forward`` function returns ``(out, cache)`` and the matching
``*_backward`` consumes the upstream gradient and that cache.  Plain-named
wrappers (``conv2d``, ``slap`` ...) return only the forward output.

Feature maps are ``[N, C, H, W]`` arrays.  All kernels are dtype-preserving,
so the same code runs the float32 training path and the float64 gradient
checks.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericError, RejectedInputError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_fmap(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise RejectedInputError(f"{name} must be rank-4 [N, C, H, W], got shape {x.shape}")
    if min(x.shape) < 1:
        raise RejectedInputError(f"{name} has an empty dimension: {x.shape}")


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape ``[C*k*k, N*ho*wo]`` built from k*k strided slice copies."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                               j : j + stride * (wo - 1) + 1 : stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def conv2d_forward(x, weight, bias=None, stride: int = 1, padding: int = 0):
    _check_fmap(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise RejectedInputError(f"weight must be [C_out, C_in, k, k], got {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    n, c, h, w = x.shape
    if c != c_in:
        raise RejectedInputError(f"input has {c} channels, weight expects {c_in}")
    if stride < 1 or padding < 0:
        raise RejectedInputError("stride must be >= 1 and padding >= 0")
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise RejectedInputError(f"kernel {k} with padding {padding} does not fit input {h}x{w}")
    _check_finite(x, "conv2d input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = weight.reshape(c_out, -1) @ cols
    if bias is not None:
        out += bias[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3))
    cache = (x.shape, cols, weight, bias is not None, stride, padding, ho, wo)
    return out, cache


def conv2d_backward(dout, cache, need_dx: bool = True):
    """Return ``(dx, dweight, dbias)``.

    ``dbias`` is None for bias-free convs; ``dx`` is None when ``need_dx`` is
    false (inputs that are constants, such as images or frozen features).
    """
    (n, c, h, w), cols, weight, has_bias, stride, padding, ho, wo = cache
    c_out, _, k, _ = weight.shape
    dmat = dout.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dweight = (dmat @ cols.T).reshape(weight.shape)
    dbias = dmat.sum(axis=1) if has_bias else None
    if not need_dx:
        return None, dweight, dbias
    dcols = (weight.reshape(c_out, -1).T @ dmat).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
    dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
    return np.ascontiguousarray(dx), dweight, dbias


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    return conv2d_forward(x, weight, bias, stride, padding)[0]


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Batch norm over (N, H, W).  Updates the running statistics in place when training."""
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, invstd.astype(x.dtype), gamma, training)


def batchnorm_backward(dout, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, invstd, gamma, training = cache
    dbeta = dout.sum(axis=(0, 2, 3))
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    scale = (gamma * invstd)[None, :, None, None]
    if not training:
        return dout * scale, dgamma, dbeta
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dx = scale * (dout - (dbeta / m)[None, :, None, None] - xhat * (dgamma / m)[None, :, None, None])
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# pointwise activations
# --------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    """Logistic function, kept inside the open interval (0, 1) even when saturated."""
    x = np.asarray(x)
    with np.errstate(over="ignore"):
        e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype if x.dtype.kind == "f" else np.float64)
    lo = np.nextafter(out.dtype.type(0), out.dtype.type(1))
    hi = np.nextafter(out.dtype.type(1), out.dtype.type(0))
    return np.clip(out, lo, hi)


def sigmoid_backward(dout, out):
    return dout * out * (1 - out)


# --------------------------------------------------------------------------
# spatial resampling, all expressed as separable linear maps
# --------------------------------------------------------------------------

def slap_bounds(size: int, g: int) -> list[tuple[int, int]]:
    """Cell boundaries of the adaptive partition of ``size`` pixels into ``g`` cells."""
    return [((i * size) // g, ((i + 1) * size) // g) for i in range(g)]


def _pool_matrix(size: int, g: int, dtype) -> np.ndarray:
    m = np.zeros((g, size), dtype=dtype)
    for i, (a, b) in enumerate(slap_bounds(size, g)):
        m[i, a:b] = 1.0 / (b - a)
    return m


def _separable(x, mh, mw):
    return np.matmul(np.matmul(mh, x), mw.T)


def slap_forward(x, g: int):
    """Spatial local average pooling onto a ``g x g`` grid of cell means."""
    _check_fmap(x)
    h, w = x.shape[2:]
    if g < 1 or g > h or g > w:
        raise RejectedInputError(f"pooling grid {g} does not fit a {h}x{w} map")
    mh, mw = _pool_matrix(h, g, x.dtype), _pool_matrix(w, g, x.dtype)
    return _separable(x, mh, mw), (mh, mw)


def slap(x, g: int):
    return slap_forward(x, g)[0]


def _bilinear_matrix(src: int, dst: int, dtype) -> np.ndarray:
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for d in range(dst):
        s = min(max((d + 0.5) * scale - 0.5, 0.0), src - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, src - 1)
        frac = s - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    return m.astype(dtype)


def resize_bilinear_forward(x, out_h: int, out_w: int):
    """Bilinear resize with half-pixel centres, no corner alignment."""
    _check_fmap(x)
    if out_h < 1 or out_w < 1:
        raise RejectedInputError("target size must be positive")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return x.copy(), None
    mh, mw = _bilinear_matrix(h, out_h, x.dtype), _bilinear_matrix(w, out_w, x.dtype)
    return _separable(x, mh, mw), (mh, mw)


def resize_bilinear(x, out_h: int, out_w: int):
    return resize_bilinear_forward(x, out_h, out_w)[0]


def nearest_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_nearest_forward(x, out_h: int, out_w: int):
    _check_fmap(x)
    if out_h < 1 or out_w < 1:
        raise RejectedInputError("target size must be positive")
    h, w = x.shape[2:]
    ih, iw = nearest_indices(h, out_h), nearest_indices(w, out_w)
    return x[:, :, ih][:, :, :, iw], (h, w, ih, iw)


def upsample_nearest_backward(dout, cache):
    h, w, ih, iw = cache
    n, c = dout.shape[:2]
    mh = np.zeros((h, len(ih)), dtype=dout.dtype)
    mh[ih, np.arange(len(ih))] = 1
    mw = np.zeros((w, len(iw)), dtype=dout.dtype)
    mw[iw, np.arange(len(iw))] = 1
    return _separable(dout, mh, mw)


def upsample_nearest(x, out_h: int, out_w: int):
    return upsample_nearest_forward(x, out_h, out_w)[0]


def separable_backward(dout, cache):
    """Backward of ``slap`` and ``resize_bilinear`` (both are ``Mh @ x @ Mw^T``)."""
    if cache is None:
        return dout
    mh, mw = cache
    return _separable(dout, mh.T, mw.T)


slap_backward = separable_backward
resize_bilinear_backward = separable_backward


# --------------------------------------------------------------------------
# heads and loss
# --------------------------------------------------------------------------

def global_avg_pool(x):
    _check_fmap(x)
    return x.mean(axis=(2, 3))


def global_avg_pool_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], shape).copy()


def linear(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise RejectedInputError(
            f"linear shapes disagree: x {x.shape}, W {weight.shape}, b {bias.shape}")
    return x @ weight.T + bias


def linear_backward(dout, x, weight):
    """Return ``(dx, dweight, dbias)``."""
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise RejectedInputError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise RejectedInputError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return loss, grad / n
