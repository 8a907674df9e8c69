"""Numerical primitives for 4-D (batch, channel, height, width) tensors.

Everything here is a pure function: no globals, no hidden state, safe to
call concurrently on disjoint data. Activations and parameters are plain
numpy arrays in row-major NCHW layout so that one channel's spatial plane
is contiguous. Training runs in float32; float64 is supported for
gradient checking.
"""

import numpy as np

from .errors import ConfigError, ShapeError

VALID = "valid"
SAME = "same"


def check_nchw(x, name="x"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N,C,H,W), got ndim={x.ndim}", axis="rank")
    return x


def conv_out_size(in_size, k, stride, padding):
    """Output extent along one spatial axis for the given padding mode."""
    if padding == SAME:
        return -(-in_size // stride)  # ceil division
    if padding == VALID:
        if in_size < k:
            raise ShapeError(
                f"kernel size {k} exceeds input size {in_size} for valid padding",
                axis="spatial",
            )
        return (in_size - k) // stride + 1
    raise ConfigError(f"unknown padding mode {padding!r}")


def _pad_amounts(in_size, k, stride, padding):
    if padding == VALID:
        return 0, 0
    out = conv_out_size(in_size, k, stride, padding)
    total = max((out - 1) * stride + k - in_size, 0)
    before = total // 2
    return before, total - before


def _windows(x, kh, kw, stride, padding):
    """Strided (N, C, out_h, out_w, kh, kw) window view over padded input."""
    check_nchw(x)
    n, c, h, w = x.shape
    if kh < 1 or kw < 1:
        raise ShapeError("kernel dims must be >= 1", axis="kernel")
    if stride < 1:
        raise ShapeError("stride must be >= 1", axis="stride")
    pt, pb = _pad_amounts(h, kh, stride, padding)
    pl, pr = _pad_amounts(w, kw, stride, padding)
    out_h = conv_out_size(h, kh, stride, padding)
    out_w = conv_out_size(w, kw, stride, padding)
    img = x
    if pt or pb or pl or pr:
        img = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    sw = np.lib.stride_tricks.sliding_window_view(img, (kh, kw), axis=(2, 3))
    return sw[:, :, ::stride, ::stride], out_h, out_w


def im2col(x, kh, kw, stride, padding):
    """Unfold conv windows of a NCHW tensor into a 2-D matrix.

    Returns (col, out_h, out_w) where col has shape
    (N*out_h*out_w, C*kh*kw) and columns are channel-major: column
    c*kh*kw + r*kw + s holds input channel c at kernel offset (r, s).
    """
    sw, out_h, out_w = _windows(x, kh, kw, stride, padding)
    n, c = x.shape[0], x.shape[1]
    col = sw.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, c * kh * kw)
    return col, out_h, out_w


def im2col_channel_major(x, kh, kw, stride, padding):
    """im2col variant returning shape (C, N*out_h*out_w, kh*kw).

    Each channel's slab is contiguous, which is what the channel-sparse
    convolution wants: it touches one input channel at a time.
    """
    sw, out_h, out_w = _windows(x, kh, kw, stride, padding)
    n, c = x.shape[0], x.shape[1]
    col = sw.transpose(1, 0, 2, 3, 4, 5).reshape(c, n * out_h * out_w, kh * kw)
    return col, out_h, out_w


def im2col_spatial_last(x, kh, kw, stride, padding):
    """im2col variant with (kh, kw, C) column order, staged through NHWC.

    Keeping the channel axis innermost makes every copy in the unfold run
    over contiguous channel runs, which is markedly faster than the
    channel-major orders on strided CPU access. Dense convolution uses
    this; pair it with col2im_spatial_last.
    """
    check_nchw(x)
    n, c, h, w = x.shape
    if kh < 1 or kw < 1:
        raise ShapeError("kernel dims must be >= 1", axis="kernel")
    if stride < 1:
        raise ShapeError("stride must be >= 1", axis="stride")
    pt, pb = _pad_amounts(h, kh, stride, padding)
    pl, pr = _pad_amounts(w, kw, stride, padding)
    out_h = conv_out_size(h, kh, stride, padding)
    out_w = conv_out_size(w, kw, stride, padding)
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if pt or pb or pl or pr:
        xh = np.pad(xh, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    sw = np.lib.stride_tricks.sliding_window_view(xh, (kh, kw), axis=(1, 2))
    sw = sw[:, ::stride, ::stride]
    col = sw.transpose(0, 1, 2, 4, 5, 3).reshape(n * out_h * out_w, kh * kw * c)
    return col, out_h, out_w


def col2im_spatial_last(col, x_shape, kh, kw, stride, padding):
    """Adjoint of im2col_spatial_last: scatter-add back to NCHW."""
    n, c, h, w = x_shape
    pt, pb = _pad_amounts(h, kh, stride, padding)
    pl, pr = _pad_amounts(w, kw, stride, padding)
    out_h = conv_out_size(h, kh, stride, padding)
    out_w = conv_out_size(w, kw, stride, padding)
    colv = col.reshape(n, out_h, out_w, kh, kw, c)
    img = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=col.dtype)
    for r in range(kh):
        r_max = r + stride * out_h
        for s in range(kw):
            s_max = s + stride * out_w
            img[:, r:r_max:stride, s:s_max:stride, :] += colv[:, :, :, r, s, :]
    return np.ascontiguousarray(
        img[:, pt:pt + h, pl:pl + w, :].transpose(0, 3, 1, 2)
    )


def col2im(col, x_shape, kh, kw, stride, padding, channel_major=False):
    """Adjoint of im2col: scatter-add unfolded columns back to NCHW.

    `col` has the im2col layout, or the im2col_channel_major layout when
    channel_major is set.
    """
    n, c, h, w = x_shape
    pt, pb = _pad_amounts(h, kh, stride, padding)
    pl, pr = _pad_amounts(w, kw, stride, padding)
    out_h = conv_out_size(h, kh, stride, padding)
    out_w = conv_out_size(w, kw, stride, padding)
    if channel_major:
        col = col.reshape(c, n, out_h, out_w, kh, kw).transpose(1, 0, 4, 5, 2, 3)
    else:
        col = col.reshape(n, out_h, out_w, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    col = np.ascontiguousarray(col)  # one gather pass; keeps the slice loop local
    img = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=col.dtype)
    for r in range(kh):
        r_max = r + stride * out_h
        for s in range(kw):
            s_max = s + stride * out_w
            img[:, :, r:r_max:stride, s:s_max:stride] += col[:, :, r, s, :, :]
    return img[:, :, pt:pt + h, pl:pl + w]


def plane_convolve(plane, kernel, stride=1, padding=VALID):
    """Correlate a single 2-D plane with a 2-D kernel.

    Each output element is the dot product of the kernel with the input
    window under it (zero padding in 'same' mode).
    """
    plane = np.asarray(plane)
    kernel = np.asarray(kernel)
    if plane.ndim != 2:
        raise ShapeError(f"plane must be 2-D, got ndim={plane.ndim}", axis="rank")
    if kernel.ndim != 2:
        raise ShapeError(f"kernel must be 2-D, got ndim={kernel.ndim}", axis="rank")
    col, out_h, out_w = im2col(
        plane[None, None, :, :], kernel.shape[0], kernel.shape[1], stride, padding
    )
    out = col @ kernel.reshape(-1)
    return out.reshape(out_h, out_w)


def maxpool2x2(x):
    """2x2 max pooling with stride 2.

    Odd spatial extents are padded on the bottom/right with -inf so the
    output is always ceil(H/2) x ceil(W/2). Returns (out, idx) where idx
    stores, per output cell, the row-major position (0..3) of the window
    maximum; ties break to the first occurrence.
    """
    check_nchw(x)
    n, c, h, w = x.shape
    h2, w2 = h + (h & 1), w + (w & 1)
    if h2 != h or w2 != w:
        padded = np.full((n, c, h2, w2), -np.inf, dtype=x.dtype)
        padded[:, :, :h, :w] = x
    else:
        padded = x
    oh, ow = h2 // 2, w2 // 2
    win = padded.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2x2_backward(grad_out, idx, x_shape):
    """Route each output gradient to the single argmax input position."""
    n, c, h, w = x_shape
    h2, w2 = h + (h & 1), w + (w & 1)
    oh, ow = h2 // 2, w2 // 2
    win = np.zeros((n, c, oh, ow, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.int64), grad_out[..., None], axis=-1)
    img = win.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2)
    return img[:, :, :h, :w]


def matmul_bias(x, w, b):
    """x @ w + b for x: (N,D), w: (D,K), b: (K,)."""
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError("matmul_bias expects 2-D x and w", axis="rank")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"inner dims disagree: x has D={x.shape[1]}, w has D={w.shape[0]}",
            axis="features",
        )
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} != ({w.shape[1]},)", axis="out_features")
    return x @ w + b


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def softmax_xent(logits, labels):
    """Mean cross-entropy over the batch and its exact logit gradient.

    Returns (loss, dlogits) with dlogits = (softmax(logits) - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError("logits must be 2-D (N,K)", axis="rank")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)", axis="batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"labels must lie in [0,{k}), got range [{labels.min()},{labels.max()}]"
        )
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, eps, momentum, train):
    """Per-channel batch normalization over the (N,H,W) axes.

    Operates on each channel independently. In train mode returns batch
    statistics plus updated running stats
    (new = (1-momentum)*old + momentum*batch, biased variance); in eval
    mode normalizes with the running stats. Returns
    (y, cache, new_running_mean, new_running_var).
    """
    check_nchw(x)
    n, c, h, w = x.shape
    if eps <= 0:
        raise ConfigError(f"batchnorm eps must be > 0, got {eps}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}",
            axis="channels",
        )
    if train:
        if n * h * w < 2:
            raise ShapeError(
                f"train-mode batchnorm needs N*H*W >= 2, got {n * h * w}", axis="batch"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, gamma, inv_std, train)
    return y, cache, new_rm, new_rv


def batchnorm2d_backward(grad_out, cache):
    """Gradients of batchnorm2d_forward w.r.t. x, gamma, beta."""
    xhat, gamma, inv_std, train = cache
    n, c, h, w = grad_out.shape
    m = n * h * w
    dbeta = grad_out.sum(axis=(0, 2, 3))
    dgamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    g = gamma[None, :, None, None] * inv_std[None, :, None, None]
    if train:
        dx = g * (
            grad_out
            - dbeta[None, :, None, None] / m
            - xhat * dgamma[None, :, None, None] / m
        )
    else:
        dx = g * grad_out
    return dx, dgamma, dbeta
