"""Layer objects: dense conv, channel-sparse conv, pool, flatten, FC.

Each layer owns its parameters, caches what its backward pass needs
during forward, and leaves gradients in `self.grads` after backward.
The two convolution layers are independent implementations on purpose:
the dense one contracts the full im2col matrix against a dense kernel
stack in a single matmul, while the sparse one walks input channels and
multiplies each channel's columns only into the output channels it is
connected to. With a full mask they must agree to rounding error.
"""

import math

import numpy as np

from . import ops
from .connectivity import ConnectivityMask, full_mask
from .errors import ConfigError, ShapeError


def _he_std(fan_in, relu_gain=True):
    gain = 2.0 if relu_gain else 1.0
    return math.sqrt(gain / fan_in)


# Above this density the per-channel sparse kernel loses to one big BLAS
# matmul over the zero-expanded kernel stack, so SparseConv switches its
# compute route there. Storage stays compact either way and gradients are
# only ever written for active slots.
DENSE_FALLBACK_DENSITY = 0.25


class DenseConv:
    """Standard conv layer: every output channel sees every input channel."""

    def __init__(self, c_in, c_out, kh, kw, stride, padding, batch_norm, rng, dtype,
                 bn_eps=1e-5, bn_momentum=0.1):
        self.c_in, self.c_out = c_in, c_out
        self.kh, self.kw = kh, kw
        self.stride, self.padding = stride, padding
        self.batch_norm = batch_norm
        self.dtype = dtype
        self.skip_input_grad = False  # set on the first layer; image grads unused
        std = _he_std(kh * kw * c_in)
        self.weights = (rng.standard_normal((c_out, c_in, kh, kw)) * std).astype(dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        if batch_norm:
            self.bn_eps, self.bn_momentum = bn_eps, bn_momentum
            self.gamma = np.ones(c_out, dtype=dtype)
            self.beta = np.zeros(c_out, dtype=dtype)
            self.running_mean = np.zeros(c_out, dtype=dtype)
            self.running_var = np.ones(c_out, dtype=dtype)
        self.grads = {}
        self._cache = None

    def active_connections(self):
        return self.c_in * self.c_out

    def dense_weights(self):
        return self.weights

    def _w2d(self):
        # (c_out, kh*kw*c_in), matching the spatial-last column order
        return np.ascontiguousarray(
            self.weights.transpose(0, 2, 3, 1)
        ).reshape(self.c_out, -1)

    def forward(self, x, train=False):
        if x.shape[1] != self.c_in:
            raise ShapeError(
                f"input has {x.shape[1]} channels, layer expects {self.c_in}",
                axis="channels",
            )
        n = x.shape[0]
        col, oh, ow = ops.im2col_spatial_last(x, self.kh, self.kw, self.stride, self.padding)
        w2d = self._w2d()
        out = col @ w2d.T + self.bias
        out = np.ascontiguousarray(out.reshape(n, oh, ow, self.c_out).transpose(0, 3, 1, 2))
        bn_cache = None
        if self.batch_norm:
            out, bn_cache, rm, rv = ops.batchnorm2d_forward(
                out, self.gamma, self.beta, self.running_mean, self.running_var,
                self.bn_eps, self.bn_momentum, train,
            )
            if train:
                self.running_mean, self.running_var = rm, rv
        mask = out > 0
        self._cache = (x.shape, col, w2d, bn_cache, mask)
        return out * mask

    def backward(self, grad_out):
        x_shape, col, w2d, bn_cache, relu_mask = self._cache
        g = grad_out * relu_mask
        if self.batch_norm:
            g, dgamma, dbeta = ops.batchnorm2d_backward(g, bn_cache)
            self.grads["gamma"], self.grads["beta"] = dgamma, dbeta
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        dw = (g2d.T @ col).reshape(self.c_out, self.kh, self.kw, self.c_in)
        self.grads["weights"] = np.ascontiguousarray(dw.transpose(0, 3, 1, 2))
        self.grads["bias"] = g2d.sum(axis=0)
        if self.skip_input_grad:
            return None
        dcol = g2d @ w2d
        return ops.col2im_spatial_last(dcol, x_shape, self.kh, self.kw, self.stride, self.padding)

    def param_items(self):
        items = [("weights", self.weights), ("bias", self.bias)]
        if self.batch_norm:
            items += [("gamma", self.gamma), ("beta", self.beta)]
        return items

    def state_items(self):
        if self.batch_norm:
            return [("running_mean", self.running_mean), ("running_var", self.running_var)]
        return []

    def set_param(self, name, value):
        setattr(self, name, value.astype(self.dtype))


class SparseConv:
    """Conv layer with a channel-to-channel connectivity mask.

    Weights are stored compactly: one (kh, kw) plane per active
    connection, concatenated in (output channel, ascending input channel)
    order with a row pointer per output channel. Inactive connections
    have no storage at all, so the sparsity structure cannot leak into
    trained weights by construction.
    """

    def __init__(self, mask, kh, kw, stride, padding, batch_norm, rng, dtype,
                 bn_eps=1e-5, bn_momentum=0.1, dense_fallback=DENSE_FALLBACK_DENSITY):
        self.mask = mask.copy()
        self.c_in, self.c_out = mask.n_in, mask.n_out
        self.kh, self.kw = kh, kw
        self.stride, self.padding = stride, padding
        self.batch_norm = batch_norm
        self.dtype = dtype
        self.skip_input_grad = False
        self.dense_fallback = dense_fallback
        self._build_index()
        self.values = np.empty((self.nnz, kh, kw), dtype=dtype)
        for o in range(self.c_out):
            lo, hi = self.row_ptr[o], self.row_ptr[o + 1]
            if hi > lo:
                std = _he_std(kh * kw * (hi - lo))
                self.values[lo:hi] = (rng.standard_normal((hi - lo, kh, kw)) * std).astype(dtype)
        self.bias = np.zeros(self.c_out, dtype=dtype)
        if batch_norm:
            self.bn_eps, self.bn_momentum = bn_eps, bn_momentum
            self.gamma = np.ones(self.c_out, dtype=dtype)
            self.beta = np.zeros(self.c_out, dtype=dtype)
            self.running_mean = np.zeros(self.c_out, dtype=dtype)
            self.running_var = np.ones(self.c_out, dtype=dtype)
        self.grads = {}
        self._cache = None

    def _build_index(self):
        """Row-compacted (per-output) and column (per-input) index views."""
        rows, cols = np.nonzero(self.mask.active)  # row-major: rows sorted, cols ascending
        self.cols = cols.astype(np.int64)
        self.nnz = len(cols)
        counts = np.bincount(rows, minlength=self.c_out)
        self.row_ptr = np.zeros(self.c_out + 1, dtype=np.int64)
        np.cumsum(counts, out=self.row_ptr[1:])
        self._csc = []
        positions = np.arange(self.nnz)
        for i in range(self.c_in):
            sel = cols == i
            self._csc.append((rows[sel], positions[sel]))

    def slot_index(self, o):
        """Ascending input channel ids feeding output channel o."""
        return self.cols[self.row_ptr[o]:self.row_ptr[o + 1]]

    def active_connections(self):
        return self.nnz

    def dense_weights(self):
        """Expand compact storage to a (c_out, c_in, kh, kw) kernel stack
        with exact zeros at inactive connections."""
        w = np.zeros((self.c_out, self.c_in, self.kh, self.kw), dtype=self.dtype)
        for o in range(self.c_out):
            lo, hi = self.row_ptr[o], self.row_ptr[o + 1]
            w[o, self.cols[lo:hi]] = self.values[lo:hi]
        return w

    def load_dense_weights(self, w):
        """Gather the active entries of a full kernel stack into storage."""
        if w.shape != (self.c_out, self.c_in, self.kh, self.kw):
            raise ShapeError(f"kernel stack shape {w.shape} mismatch", axis="kernel")
        for o in range(self.c_out):
            lo, hi = self.row_ptr[o], self.row_ptr[o + 1]
            self.values[lo:hi] = w[o, self.cols[lo:hi]].astype(self.dtype)

    def _use_fallback(self):
        return self.nnz >= self.dense_fallback * self.c_in * self.c_out

    def forward(self, x, train=False):
        if x.shape[1] != self.c_in:
            raise ShapeError(
                f"input has {x.shape[1]} channels, layer expects {self.c_in}",
                axis="channels",
            )
        n = x.shape[0]
        k2 = self.kh * self.kw
        fallback = self._use_fallback()
        if fallback:
            col, oh, ow = ops.im2col_spatial_last(x, self.kh, self.kw, self.stride, self.padding)
            w2d = np.ascontiguousarray(
                self.dense_weights().transpose(0, 2, 3, 1)
            ).reshape(self.c_out, -1)
            out = col @ w2d.T
        else:
            w2d = None
            col, oh, ow = ops.im2col_channel_major(
                x, self.kh, self.kw, self.stride, self.padding
            )
            out = np.zeros((col.shape[1], self.c_out), dtype=x.dtype)
            vflat = self.values.reshape(self.nnz, k2)
            for i in range(self.c_in):
                outs, pos = self._csc[i]
                if len(outs) == 0:
                    continue
                out[:, outs] += col[i] @ vflat[pos].T
        out += self.bias
        out = np.ascontiguousarray(out.reshape(n, oh, ow, self.c_out).transpose(0, 3, 1, 2))
        bn_cache = None
        if self.batch_norm:
            out, bn_cache, rm, rv = ops.batchnorm2d_forward(
                out, self.gamma, self.beta, self.running_mean, self.running_var,
                self.bn_eps, self.bn_momentum, train,
            )
            if train:
                self.running_mean, self.running_var = rm, rv
        mask = out > 0
        self._cache = (x.shape, col, w2d, bn_cache, mask, fallback)
        return out * mask

    def backward(self, grad_out):
        x_shape, col, w2d, bn_cache, relu_mask, fallback = self._cache
        k2 = self.kh * self.kw
        g = grad_out * relu_mask
        if self.batch_norm:
            g, dgamma, dbeta = ops.batchnorm2d_backward(g, bn_cache)
            self.grads["gamma"], self.grads["beta"] = dgamma, dbeta
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, self.c_out)
        self.grads["bias"] = g2d.sum(axis=0)
        if fallback:
            dw = (g2d.T @ col).reshape(self.c_out, self.kh, self.kw, self.c_in)
            dw = np.ascontiguousarray(dw.transpose(0, 3, 1, 2)).reshape(self.c_out, self.c_in, k2)
            dvalues = np.empty((self.nnz, k2), dtype=dw.dtype)
            for o in range(self.c_out):
                lo, hi = self.row_ptr[o], self.row_ptr[o + 1]
                dvalues[lo:hi] = dw[o, self.cols[lo:hi]]
            self.grads["values"] = dvalues.reshape(self.values.shape)
            if self.skip_input_grad:
                return None
            dcol = g2d @ w2d
            return ops.col2im_spatial_last(
                dcol, x_shape, self.kh, self.kw, self.stride, self.padding
            )
        vflat = self.values.reshape(self.nnz, k2)
        dvalues = np.zeros_like(vflat)
        dcol = None if self.skip_input_grad else np.zeros_like(col)
        for i in range(self.c_in):
            outs, pos = self._csc[i]
            if len(outs) == 0:
                continue
            gi = np.ascontiguousarray(g2d[:, outs])
            dvalues[pos] = (col[i].T @ gi).T
            if dcol is not None:
                dcol[i] = gi @ vflat[pos]
        self.grads["values"] = dvalues.reshape(self.values.shape)
        if dcol is None:
            return None
        return ops.col2im(
            dcol, x_shape, self.kh, self.kw, self.stride, self.padding,
            channel_major=True,
        )

    def add_connections(self, pairs, rng, init="fresh"):
        """Activate new (out, in) connections and grow storage.

        Existing weight values are preserved bit-exactly; returns the
        mapping from old storage positions to new ones so that optimizer
        state can follow. New values are drawn at the row's init scale
        (based on its updated fan-in) or zero per `init`.
        """
        if init not in ("fresh", "zero"):
            raise ConfigError(f"init must be fresh|zero, got {init!r}")
        pairs = [(int(o), int(i)) for o, i in pairs]
        for o, i in pairs:
            if not (0 <= o < self.c_out and 0 <= i < self.c_in):
                raise ShapeError(f"connection ({o},{i}) out of range", axis="channels")
            if self.mask.active[o, i]:
                raise ConfigError(f"connection ({o},{i}) already active")
        old_cols, old_ptr, old_values = self.cols, self.row_ptr, self.values
        new_active = self.mask.active.copy()
        for o, i in pairs:
            new_active[o, i] = True
        self.mask = ConnectivityMask(self.c_in, self.c_out, new_active, self.mask.seed)
        self._build_index()
        values = np.empty((self.nnz, self.kh, self.kw), dtype=self.dtype)
        old_to_new = np.empty(len(old_cols), dtype=np.int64)
        is_new = np.ones(self.nnz, dtype=bool)
        for o in range(self.c_out):
            lo, hi = self.row_ptr[o], self.row_ptr[o + 1]
            olo, ohi = old_ptr[o], old_ptr[o + 1]
            # both col lists are ascending; place old entries at their new slots
            new_pos = lo + np.searchsorted(self.cols[lo:hi], old_cols[olo:ohi])
            values[new_pos] = old_values[olo:ohi]
            is_new[new_pos] = False
            old_to_new[olo:ohi] = new_pos
            fresh = np.flatnonzero(is_new[lo:hi]) + lo
            if len(fresh):
                if init == "zero":
                    values[fresh] = 0.0
                else:
                    std = _he_std(self.kh * self.kw * (hi - lo))
                    values[fresh] = (
                        rng.standard_normal((len(fresh), self.kh, self.kw)) * std
                    ).astype(self.dtype)
        self.values = values
        return old_to_new

    def param_items(self):
        items = [("values", self.values), ("bias", self.bias)]
        if self.batch_norm:
            items += [("gamma", self.gamma), ("beta", self.beta)]
        return items

    def state_items(self):
        if self.batch_norm:
            return [("running_mean", self.running_mean), ("running_var", self.running_var)]
        return []

    def set_param(self, name, value):
        setattr(self, name, value.astype(self.dtype))


class MaxPoolLayer:
    def __init__(self):
        self.grads = {}
        self._cache = None

    def forward(self, x, train=False):
        out, idx = ops.maxpool2x2(x)
        self._cache = (x.shape, idx)
        return out

    def backward(self, grad_out):
        x_shape, idx = self._cache
        return ops.maxpool2x2_backward(grad_out, idx, x_shape)

    def param_items(self):
        return []

    def state_items(self):
        return []


class FlattenLayer:
    def __init__(self):
        self.grads = {}
        self._cache = None

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cache)

    def param_items(self):
        return []

    def state_items(self):
        return []


class FCLayer:
    def __init__(self, d_in, d_out, relu, rng, dtype):
        self.d_in, self.d_out = d_in, d_out
        self.relu = relu
        self.dtype = dtype
        std = _he_std(d_in, relu_gain=relu)
        self.weights = (rng.standard_normal((d_in, d_out)) * std).astype(dtype)
        self.bias = np.zeros(d_out, dtype=dtype)
        self.grads = {}
        self._cache = None

    def forward(self, x, train=False):
        out = ops.matmul_bias(x, self.weights, self.bias)
        mask = out > 0 if self.relu else None
        self._cache = (x, mask)
        return out * mask if self.relu else out

    def backward(self, grad_out):
        x, mask = self._cache
        g = grad_out * mask if self.relu else grad_out
        self.grads["weights"] = x.T @ g
        self.grads["bias"] = g.sum(axis=0)
        return g @ self.weights.T

    def param_items(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def state_items(self):
        return []

    def set_param(self, name, value):
        setattr(self, name, value.astype(self.dtype))
