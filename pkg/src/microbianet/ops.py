"""Differentiable layer primitives on plain numpy arrays.

Spatial tensors are channels-first ``(B, C, H, W)``. Every forward has a
matching hand-written backward; float32 is the training dtype and float64
is used by the gradient-check suites. All outputs pass a finiteness guard
so NaN/Inf surface as errors instead of propagating.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DegenerateBatchError,
    DimensionError,
    LabelError,
    NonFiniteError,
    ParameterError,
)

# Cap on the im2col scratch buffer; batches are chunked to stay below it.
_COL_BYTES_LIMIT = 192 * 1024 * 1024


def ensure_finite(name, *arrays):
    """Raise NonFiniteError if any array contains NaN or Inf.

    A plain sum is used as the fast path: any NaN/Inf makes the sum
    non-finite (inf - inf gives NaN, so cancellation cannot hide one).
    """
    for a in arrays:
        if not np.isfinite(np.sum(a)):
            raise NonFiniteError(f"{name}: non-finite values in output")


def _corr2d(x, w):
    """Valid cross-correlation of (B,C,H,W) with (K,C,kH,kW) -> (B,K,OH,OW).

    im2col + matrix multiply, chunked over the batch so the column buffer
    never exceeds _COL_BYTES_LIMIT.
    """
    b, c, h, width = x.shape
    k, wc, kh, kw = w.shape
    if wc != c:
        raise DimensionError(f"channel mismatch: input has {c}, kernel expects {wc}")
    if h < kh or width < kw:
        raise DimensionError(f"input {h}x{width} smaller than kernel {kh}x{kw}")
    oh, ow = h - kh + 1, width - kw + 1
    wmat = w.reshape(k, -1).T
    out = np.empty((b, k, oh, ow), dtype=x.dtype)
    per_image = oh * ow * c * kh * kw * x.itemsize
    step = max(1, _COL_BYTES_LIMIT // max(per_image, 1))
    for i in range(0, b, int(step)):
        xs = x[i:i + int(step)]
        win = sliding_window_view(xs, (kh, kw), axis=(2, 3))
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(xs.shape[0] * oh * ow, c * kh * kw)
        prod = cols @ wmat
        out[i:i + int(step)] = prod.reshape(xs.shape[0], oh, ow, k).transpose(0, 3, 1, 2)
    return out


def conv2d_forward(x, weight, bias):
    """Stride-1 valid convolution (cross-correlation) plus per-channel bias."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and 4-D weights")
    out = _corr2d(x, weight)
    out += bias[None, :, None, None]
    ensure_finite("conv2d_forward", out)
    return out


def conv2d_backward(x, weight, grad_out):
    """Gradients of conv2d_forward.

    Returns (grad_input, grad_weight, grad_bias). grad_input is computed as
    a full correlation of the padded output gradient with the spatially
    flipped, channel-swapped kernels; grad_weight as a correlation with the
    batch and channel axes exchanged.
    """
    b, c, h, width = x.shape
    k, _, kh, kw = weight.shape
    expect = (b, k, h - kh + 1, width - kw + 1)
    if grad_out.shape != expect:
        raise DimensionError(f"grad_out shape {grad_out.shape}, expected {expect}")
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_weight = _corr2d(
        x.transpose(1, 0, 2, 3), grad_out.transpose(1, 0, 2, 3)
    ).transpose(1, 0, 2, 3)
    padded = np.pad(grad_out, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_input = _corr2d(padded, np.ascontiguousarray(flipped))
    ensure_finite("conv2d_backward", grad_input, grad_weight, grad_bias)
    return grad_input, grad_weight, grad_bias


def maxpool2x2_forward(x):
    """Non-overlapping 2x2 max pooling.

    Returns (output, argmax) where argmax holds the flat index 0..3 of the
    winning cell inside each window (row-major), used to route gradients.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    argmax = windows.argmax(axis=4)
    out = np.take_along_axis(windows, argmax[..., None], axis=4)[..., 0]
    ensure_finite("maxpool2x2_forward", out)
    return out, argmax


def maxpool2x2_backward(grad_out, argmax, input_shape):
    """Route each output gradient to the cell that won its 2x2 window."""
    b, c, h, w = input_shape
    if grad_out.shape != (b, c, h // 2, w // 2):
        raise DimensionError("grad_out does not match pooled shape")
    windows = np.zeros((b, c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(windows, argmax[..., None], grad_out[..., None], axis=4)
    grad_input = (
        windows.reshape(b, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h, w)
    )
    return grad_input


def batchnorm_forward(x, gamma, beta, running_mean, running_var, momentum, eps, mode):
    """Batch normalization with affine transform.

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place (exponential moving average, unbiased variance
    like the common framework convention). Eval mode uses the running
    buffers. Returns (out, cache) where cache feeds batchnorm_backward.
    """
    if x.ndim == 4:
        axes = (0, 2, 3)
    elif x.ndim == 2:
        axes = (0,)
    else:
        raise DimensionError("batchnorm expects 2-D or 4-D input")
    if x.shape[1] != gamma.shape[0]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[1]}, params have {gamma.shape[0]}"
        )
    shape = [1] * x.ndim
    shape[1] = x.shape[1]

    if mode == "train":
        if x.shape[0] < 2:
            raise DegenerateBatchError("batchnorm train mode needs batch size >= 2")
        n = x.size // x.shape[1]
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        unbiased = var * (n / (n - 1.0))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(shape)) * inv_std.reshape(shape)
        n = 0
    else:
        raise ParameterError(f"unknown batchnorm mode {mode!r}")

    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    ensure_finite("batchnorm_forward", out)
    cache = (xhat, inv_std, gamma, axes, shape, n, mode)
    return out, cache


def batchnorm_backward(grad_out, cache):
    """Gradients of batchnorm_forward w.r.t. input, gamma and beta."""
    xhat, inv_std, gamma, axes, shape, n, mode = cache
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    scale = gamma.reshape(shape) * inv_std.reshape(shape)
    if mode == "train":
        grad_x = scale * (
            grad_out
            - grad_beta.reshape(shape) / n
            - xhat * grad_gamma.reshape(shape) / n
        )
    else:
        grad_x = scale * grad_out
    ensure_finite("batchnorm_backward", grad_x, grad_gamma, grad_beta)
    return grad_x, grad_gamma, grad_beta


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, x


def relu_backward(grad_out, cache):
    return grad_out * (cache > 0)


def linear_forward(x, weight, bias):
    """Fully connected layer: (B,D) @ (D,M) + (M,)."""
    if x.ndim != 2:
        raise DimensionError("linear expects 2-D input")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"feature mismatch: input has {x.shape[1]}, weight expects {weight.shape[0]}"
        )
    out = x @ weight + bias
    ensure_finite("linear_forward", out)
    return out


def linear_backward(x, weight, grad_out):
    grad_input = grad_out @ weight.T
    grad_weight = x.T @ grad_out
    grad_bias = grad_out.sum(axis=0)
    ensure_finite("linear_backward", grad_input, grad_weight, grad_bias)
    return grad_input, grad_weight, grad_bias


def flatten_forward(x):
    return x.reshape(x.shape[0], -1), x.shape


def flatten_backward(grad_out, input_shape):
    return grad_out.reshape(input_shape)


def dropout_forward(x, p, mode, rng=None):
    """Inverted dropout: kept units scaled by 1/(1-p); eval mode is identity.

    Returns (out, mask); mask is None in eval mode or when p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x, None
    if mode != "train":
        raise ParameterError(f"unknown dropout mode {mode!r}")
    if rng is None:
        raise ParameterError("dropout in train mode needs an rng")
    mask = rng.random(x.shape) >= p
    out = x * mask / (1.0 - p)
    return out, (mask, p)


def dropout_backward(grad_out, cache):
    if cache is None:
        return grad_out
    mask, p = cache
    return grad_out * mask / (1.0 - p)


def softmax(logits):
    """Row-wise softmax, log-sum-exp stabilized."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_crossentropy(logits, labels):
    """Mean negative log-softmax of the true class over the batch.

    Returns (loss, grad_logits) with grad = (softmax - onehot) / B.
    """
    if logits.ndim != 2:
        raise DimensionError("logits must be (B, C)")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must be ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise LabelError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    ensure_finite("softmax_crossentropy", loss, grad)
    return float(loss), grad
